#pragma once

// Independent reference computations used to verify the library: central
// finite differences, numerically assembled Jacobians, round-trip error,
// midpoint quadrature of the density and brute-force advantage sums.
// Everything runs in 64-bit.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfpo/flow.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/ppo.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo::oracle {

/// Overwrites every parameter with N(0, sd^2) draws.
template <typename T>
void randomize(ParamStore<T>& store, double sd, Stream& rng) {
  for (auto& [name, p] : store) {
    for (auto& v : p.mutable_data()) v = static_cast<T>(sd * rng.normal());
  }
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double sd, Stream& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(sd * rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences over
/// every parameter in the store. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(ParamStore<double>& store,
                                 const std::function<Tensor<double>()>& loss,
                                 double h = 1e-5, double floor = 1e-6) {
  store.zero_grad();
  backward(loss());
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, p] : store) analytic[name].assign(p.grad().begin(), p.grad().end());

  GradCheck out;
  NoGradGuard no_grad;
  for (auto& [name, p] : store) {
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = loss().item();
      w[i] = keep - h;
      const double down = loss().item();
      w[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[name][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      ++out.checked;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Change of variables

/// Closed-form log|det| of the forward map for one (a, obs) row.
using LogdetFn = std::function<double(const FlowPolicy<double>&, const ParamStore<double>&,
                                      const Tensor<double>& a, const Tensor<double>& obs)>;

inline double closed_form_logdet(const FlowPolicy<double>& flow, const ParamStore<double>& store,
                                 const Tensor<double>& a, const Tensor<double>& obs) {
  NoGradGuard no_grad;
  return flow.evaluate(store, a, obs).logdet.item();
}

/// log|det J| of a -> z assembled column by column from central differences.
inline double numeric_logdet(const FlowPolicy<double>& flow, const ParamStore<double>& store,
                             const Tensor<double>& a, const Tensor<double>& obs, double h = 1e-6) {
  NoGradGuard no_grad;
  const auto d = a.cols();
  Eigen::MatrixXd jac(d, d);
  for (std::size_t k = 0; k < d; ++k) {
    auto up = a.values(), down = a.values();
    up[k] += h;
    down[k] -= h;
    auto zu = flow.evaluate(store, Tensor<double>(Shape{1, d}, up), obs).latent;
    auto zd = flow.evaluate(store, Tensor<double>(Shape{1, d}, down), obs).latent;
    for (std::size_t r = 0; r < d; ++r) jac(r, k) = (zu.at(r) - zd.at(r)) / (2.0 * h);
  }
  return std::log(std::abs(jac.fullPivLu().determinant()));
}

struct JacobianCheck {
  double max_error = 0.0;
  std::size_t cases = 0;
};

/// Draws `cases` random (params, a, obs) triples for the given architecture
/// and compares `logdet` against the numerically assembled Jacobian.
inline JacobianCheck check_jacobian(const FlowArch& arch, std::size_t cases, std::uint64_t seed,
                                    const LogdetFn& logdet = closed_form_logdet) {
  FlowPolicy<double> flow(arch);
  JacobianCheck out;
  for (std::size_t c = 0; c < cases; ++c) {
    Stream rng(seed, "jacobian_oracle", {arch.action_dim, static_cast<std::uint64_t>(arch.norm.kind), c});
    ParamStore<double> store;
    flow.init(store, seed + c);
    randomize(store, 0.1, rng);
    auto a = normal_tensor<double>({1, arch.action_dim}, 1.0, rng);
    auto obs = normal_tensor<double>({1, arch.obs_dim}, 1.0, rng);
    const double err = std::abs(logdet(flow, store, a, obs) - numeric_logdet(flow, store, a, obs));
    out.max_error = std::max(out.max_error, err);
    ++out.cases;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bijectivity

/// max |f^-1(f(a)) - a| over a batch.
template <typename T>
double roundtrip_error(const FlowPolicy<T>& flow, const ParamStore<T>& store, const Tensor<T>& a,
                       const Tensor<T>& obs) {
  NoGradGuard no_grad;
  auto z = flow.evaluate(store, a, obs).latent;
  auto back = flow.inverse(store, z, obs).first;
  double err = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(back.at(i)) - a.at(i)));
  }
  return err;
}

template <typename T>
double check_bijectivity(const FlowArch& arch, std::size_t pairs, std::uint64_t seed) {
  FlowPolicy<T> flow(arch);
  ParamStore<T> store;
  flow.init(store, seed);
  Stream rng(seed, "bijectivity_oracle", {static_cast<std::uint64_t>(arch.norm.kind)});
  randomize(store, 0.1, rng);
  auto a = normal_tensor<T>({pairs, arch.action_dim}, 1.0, rng);
  auto obs = normal_tensor<T>({pairs, arch.obs_dim}, 1.0, rng);
  return roundtrip_error(flow, store, a, obs);
}

// ---------------------------------------------------------------------------
// Density normalization

/// Midpoint rule for the integral of pi(a | obs) over [lo, hi]^2 (2-D flows).
inline double density_mass(const FlowPolicy<double>& flow, const ParamStore<double>& store,
                           const std::vector<double>& obs_row, std::size_t grid = 400,
                           double lo = -6.0, double hi = 6.0) {
  if (flow.arch().action_dim != 2) throw Error("density_mass needs a 2-D flow");
  NoGradGuard no_grad;
  const double cell = (hi - lo) / grid;
  double mass = 0.0;
  std::vector<double> pts, obs;
  for (std::size_t i = 0; i < grid; ++i) {
    pts.clear();
    obs.clear();
    for (std::size_t j = 0; j < grid; ++j) {
      pts.push_back(lo + (i + 0.5) * cell);
      pts.push_back(lo + (j + 0.5) * cell);
      obs.insert(obs.end(), obs_row.begin(), obs_row.end());
    }
    auto lp = flow.log_prob(store, Tensor<double>(Shape{grid, 2}, pts),
                            Tensor<double>(Shape{grid, obs_row.size()}, obs));
    for (auto v : lp.data()) mass += std::exp(v);
  }
  return mass * cell * cell;
}

// ---------------------------------------------------------------------------
// Advantages

/// A_t = sum over k from t to the end of the episode segment of
/// (gamma * lambda)^(k - t) * delta_k, evaluated term by term.
inline std::vector<double> gae_bruteforce(std::size_t num_envs, std::size_t steps,
                                          const std::vector<double>& rewards,
                                          const std::vector<double>& values,
                                          const std::vector<double>& last_values,
                                          const std::vector<double>& truncation_values,
                                          const std::vector<std::uint8_t>& dones,
                                          const std::vector<std::uint8_t>& truncations,
                                          double gamma, double lambda) {
  std::vector<double> adv(num_envs * steps, 0.0);
  for (std::size_t e = 0; e < num_envs; ++e) {
    auto at = [&](std::size_t t) { return e * steps + t; };
    std::vector<double> delta(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const auto i = at(t);
      double boot;
      if (dones[i]) {
        boot = 0.0;
      } else if (truncations[i]) {
        boot = truncation_values[i];
      } else if (t + 1 == steps) {
        boot = last_values[e];
      } else {
        boot = values[at(t + 1)];
      }
      delta[t] = rewards[i] + gamma * boot - values[i];
    }
    for (std::size_t t = 0; t < steps; ++t) {
      double sum = 0.0;
      for (std::size_t k = t; k < steps; ++k) {
        sum += std::pow(gamma * lambda, static_cast<double>(k - t)) * delta[k];
        if (dones[at(k)] || truncations[at(k)]) break;
      }
      adv[at(t)] = sum;
    }
  }
  return adv;
}

struct GaeCheck {
  double max_error = 0.0;
  std::size_t sequences = 0;
};

/// Random T-step sequences with mixed terminal and time-limit cuts.
inline GaeCheck check_gae(std::size_t sequences, std::size_t steps, std::uint64_t seed) {
  GaeCheck out;
  for (std::size_t s = 0; s < sequences; ++s) {
    Stream rng(seed, "gae_oracle", {s});
    std::vector<double> r(steps), v(steps), tv(steps), last{rng.normal()};
    std::vector<std::uint8_t> d(steps), tr(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      r[t] = rng.normal();
      v[t] = rng.normal();
      tv[t] = rng.normal();
      const double u = rng.uniform();
      d[t] = u < 0.1;
      tr[t] = u >= 0.1 && u < 0.2;
    }
    const double gamma = 0.9 + 0.1 * rng.uniform(), lambda = rng.uniform();
    auto fast = gae(1, steps, r, v, last, tv, d, tr, gamma, lambda).advantages;
    auto slow = gae_bruteforce(1, steps, r, v, last, tv, d, tr, gamma, lambda);
    for (std::size_t t = 0; t < steps; ++t) {
      out.max_error = std::max(out.max_error, std::abs(fast[t] - slow[t]));
    }
    ++out.sequences;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suite

struct OracleResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct SuiteOptions {
  std::uint64_t seed = 7;
  std::size_t jacobian_cases = 100;
  std::size_t roundtrip_pairs = 1000;
  LogdetFn logdet = closed_form_logdet;
};

inline FlowArch oracle_arch(std::size_t action_dim, NormKind kind, std::size_t obs_dim = 3) {
  FlowArch arch;
  arch.obs_dim = obs_dim;
  arch.action_dim = action_dim;
  arch.layers = 4;
  arch.hidden = {32};
  arch.norm = NormMode{kind, 0.5};
  return arch;
}

inline const std::vector<NormKind>& all_norm_kinds() {
  static const std::vector<NormKind> kinds{NormKind::kNone, NormKind::kClip, NormKind::kTanh,
                                           NormKind::kNoS};
  return kinds;
}

/// Runs the change-of-variables, bijectivity, gradient, quadrature and
/// advantage oracles.
inline std::vector<OracleResult> run_suite(const SuiteOptions& opt = {}) {
  std::vector<OracleResult> out;
  auto record = [&](std::string name, double measured, double tol) {
    out.push_back({std::move(name), measured, tol, std::isfinite(measured) && measured <= tol});
  };

  double jac = 0.0;
  for (std::size_t d : {2u, 4u, 8u}) {
    for (auto kind : all_norm_kinds()) {
      jac = std::max(jac, check_jacobian(oracle_arch(d, kind), opt.jacobian_cases / 4 + 1,
                                         opt.seed, opt.logdet).max_error);
    }
  }
  record("jacobian_logdet", jac, 1e-5);

  double rt64 = 0.0, rt32 = 0.0;
  for (auto kind : all_norm_kinds()) {
    rt64 = std::max(rt64, check_bijectivity<double>(oracle_arch(2, kind), opt.roundtrip_pairs, opt.seed));
    rt32 = std::max(rt32, check_bijectivity<float>(oracle_arch(2, kind), opt.roundtrip_pairs, opt.seed));
  }
  record("bijectivity_f64", rt64, 1e-6);
  record("bijectivity_f32", rt32, 1e-4);

  {
    FlowPolicy<double> flow(oracle_arch(4, NormKind::kTanh));
    ParamStore<double> store;
    flow.init(store, opt.seed);
    Stream rng(opt.seed, "gradient_oracle", {});
    randomize(store, 0.1, rng);
    auto a = normal_tensor<double>({8, 4}, 1.0, rng);
    auto obs = normal_tensor<double>({8, 3}, 1.0, rng);
    auto g = check_gradients(store, [&] { return mean(flow.log_prob(store, a, obs)); });
    record("gradient_flow_log_prob", g.max_rel_error, 1e-4);

    // Old log-probs put half the ratios outside the clip range.
    std::vector<double> old_lp, adv;
    {
      NoGradGuard no_grad;
      auto lp = flow.log_prob(store, a, obs);
      for (std::size_t i = 0; i < 8; ++i) {
        old_lp.push_back(lp.at(i) + (i % 2 ? 0.5 : 0.05) * (i % 4 < 2 ? 1.0 : -1.0));
        adv.push_back(rng.normal());
      }
    }
    Tensor<double> lp_old({8}, old_lp), advantages({8}, adv);
    auto gs = check_gradients(store, [&] {
      return ppo_clip_loss(flow.log_prob(store, a, obs), lp_old, advantages, 0.2);
    });
    record("gradient_surrogate_loss", gs.max_rel_error, 1e-4);
  }

  {
    ParamStore<double> store;
    const auto spec = critic_spec(3, {32}, Activation::kElu);
    init_mlp(store, "critic", spec, opt.seed);
    Stream rng(opt.seed, "value_oracle", {});
    randomize(store, 0.3, rng);
    auto obs = normal_tensor<double>({8, 3}, 1.0, rng);
    auto ret = normal_tensor<double>({8}, 1.0, rng);
    auto g = check_gradients(store, [&] {
      return value_loss(reshape(mlp_forward(store, "critic", spec, obs), Shape{8}), ret);
    });
    record("gradient_value_loss", g.max_rel_error, 1e-4);
  }

  {
    FlowPolicy<double> flow(oracle_arch(2, NormKind::kTanh));
    ParamStore<double> store;
    flow.init(store, opt.seed);
    record("density_mass_untrained", std::abs(density_mass(flow, store, {0.1, -0.2, 0.3}) - 1.0), 1e-2);
  }

  record("gae_bruteforce", check_gae(100, 50, opt.seed).max_error, 1e-10);
  return out;
}

}  // namespace nfpo::oracle
