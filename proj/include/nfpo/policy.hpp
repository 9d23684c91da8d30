#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "nfpo/flow.hpp"
#include "nfpo/mlp.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

struct GaussianArch {
  std::size_t obs_dim = 1;
  std::size_t action_dim = 1;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::kElu;
  /// When set, the mean network also emits per-state log-std.
  bool state_dependent_std = false;

  MlpSpec mean_spec() const {
    MlpSpec spec;
    spec.input = obs_dim;
    spec.hidden = hidden;
    spec.output = state_dependent_std ? 2 * action_dim : action_dim;
    spec.activation = activation;
    spec.output_gain = 0.01;
    return spec;
  }

  std::size_t param_count() const {
    return mean_spec().param_count() + (state_dependent_std ? 0 : action_dim);
  }

  bool operator==(const GaussianArch&) const = default;
};

inline void to_json(nlohmann::json& j, const GaussianArch& a) {
  j = {{"obs_dim", a.obs_dim},
       {"action_dim", a.action_dim},
       {"hidden", a.hidden},
       {"activation", to_string(a.activation)},
       {"state_dependent_std", a.state_dependent_std}};
}

inline void from_json(const nlohmann::json& j, GaussianArch& a) {
  a.obs_dim = j.at("obs_dim").get<std::size_t>();
  a.action_dim = j.at("action_dim").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.state_dependent_std = j.at("state_dependent_std").get<bool>();
}

/// Diagonal Gaussian with an MLP mean. Log-std is a learned vector
/// (initialized to 0) unless state_dependent_std is set.
template <typename T>
class GaussianPolicy {
 public:
  explicit GaussianPolicy(GaussianArch arch, std::string prefix = "actor")
      : arch_(std::move(arch)), mean_name_(prefix + ".mean"), log_std_name_(prefix + ".log_std") {}

  void init(ParamStore<T>& store, std::uint64_t seed) const {
    init_mlp(store, mean_name_, arch_.mean_spec(), seed);
    if (!arch_.state_dependent_std) {
      store.add(log_std_name_, Tensor<T>::zeros(Shape{arch_.action_dim}));
    }
  }

  const GaussianArch& arch() const { return arch_; }

  /// (mean [B, D], log_std [D] or [B, D]).
  std::pair<Tensor<T>, Tensor<T>> params(const ParamStore<T>& store,
                                         const Tensor<T>& obs) const {
    auto out = mlp_forward(store, mean_name_, arch_.mean_spec(), obs);
    if (!arch_.state_dependent_std) return {out, store.get(log_std_name_)};
    std::vector<std::size_t> mu_cols, ls_cols;
    for (std::size_t i = 0; i < arch_.action_dim; ++i) {
      mu_cols.push_back(i);
      ls_cols.push_back(arch_.action_dim + i);
    }
    return {select_cols(out, mu_cols), select_cols(out, ls_cols)};
  }

  Tensor<T> log_prob(const ParamStore<T>& store, const Tensor<T>& action,
                     const Tensor<T>& obs) const {
    auto [mu, log_std] = params(store, obs);
    auto z = mul(sub(action, mu), exp(neg(log_std)));
    const T c = static_cast<T>(-0.5 * std::log(2.0 * std::numbers::pi));
    // -0.5 z^2 - log_std - 0.5 log 2pi per dimension.
    auto per_dim = shift(sub(scale(square(z), T(-0.5)), log_std), c);
    return sum_last(per_dim);
  }

  /// a = mu + sqrt(temperature) * std * eps.
  std::pair<Tensor<T>, Tensor<T>> sample(const ParamStore<T>& store,
                                         const Tensor<T>& obs, double temperature,
                                         Stream& rng) const {
    if (temperature < 0.0) throw Error("temperature must be >= 0");
    NoGradGuard no_grad;
    auto [mu, log_std] = params(store, obs);
    const auto batch = obs.rows(), d = arch_.action_dim;
    std::vector<T> a(batch * d);
    const double sd = std::sqrt(temperature);
    const bool per_state = log_std.rank() == 2;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        const double ls = per_state ? log_std.at(b, i) : log_std.at(i);
        const double eps = rng.normal();
        a[b * d + i] = static_cast<T>(mu.at(b, i) + sd * std::exp(ls) * eps);
      }
    }
    Tensor<T> action(Shape{batch, d}, std::move(a));
    auto lp = log_prob(store, action, obs);
    return {action, lp};
  }

  Tensor<T> mode(const ParamStore<T>& store, const Tensor<T>& obs) const {
    NoGradGuard no_grad;
    return params(store, obs).first.detach();
  }

  /// Closed form sum(log std + 0.5 log(2 pi e)), averaged over the batch
  /// when std depends on the state.
  Tensor<T> entropy(const ParamStore<T>& store, const Tensor<T>& obs) const {
    auto [_, log_std] = params(store, obs);
    const T c = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e));
    auto per = sum_last(shift(log_std, c));
    return per.rank() == 0 ? per : mean(per);
  }

 private:
  GaussianArch arch_;
  std::string mean_name_;
  std::string log_std_name_;
};

/// Either policy family behind one sample/log_prob/mode/entropy contract.
template <typename T>
class Policy {
 public:
  explicit Policy(GaussianPolicy<T> p) : impl_(std::move(p)) {}
  explicit Policy(FlowPolicy<T> p) : impl_(std::move(p)) {}

  bool is_flow() const { return std::holds_alternative<FlowPolicy<T>>(impl_); }
  const FlowPolicy<T>* flow() const { return std::get_if<FlowPolicy<T>>(&impl_); }
  FlowPolicy<T>* flow() { return std::get_if<FlowPolicy<T>>(&impl_); }
  const GaussianPolicy<T>* gaussian() const { return std::get_if<GaussianPolicy<T>>(&impl_); }

  std::size_t action_dim() const {
    return std::visit([](const auto& p) { return p.arch().action_dim; }, impl_);
  }
  std::size_t obs_dim() const {
    return std::visit([](const auto& p) { return p.arch().obs_dim; }, impl_);
  }
  std::size_t param_count() const {
    return std::visit([](const auto& p) { return p.arch().param_count(); }, impl_);
  }

  void init(ParamStore<T>& store, std::uint64_t seed) const {
    std::visit([&](const auto& p) { p.init(store, seed); }, impl_);
  }

  Tensor<T> log_prob(const ParamStore<T>& store, const Tensor<T>& action,
                     const Tensor<T>& obs) const {
    return std::visit([&](const auto& p) { return p.log_prob(store, action, obs); }, impl_);
  }

  /// (action, temperature-1 log-prob of the action).
  std::pair<Tensor<T>, Tensor<T>> sample(const ParamStore<T>& store,
                                         const Tensor<T>& obs, double temperature,
                                         Stream& rng) const {
    if (const auto* f = flow()) {
      auto s = f->sample(store, obs, temperature, rng);
      return {s.action, s.log_prob};
    }
    return gaussian()->sample(store, obs, temperature, rng);
  }

  Tensor<T> mode(const ParamStore<T>& store, const Tensor<T>& obs) const {
    return std::visit([&](const auto& p) { return p.mode(store, obs); }, impl_);
  }

  /// Gaussian: closed form. Flow: Monte-Carlo over n latent draws.
  Tensor<T> entropy(const ParamStore<T>& store, const Tensor<T>& obs,
                    std::size_t n, Stream& rng) const {
    if (const auto* f = flow()) return f->entropy(store, obs, n, rng);
    return gaussian()->entropy(store, obs);
  }

 private:
  std::variant<GaussianPolicy<T>, FlowPolicy<T>> impl_;
};

}  // namespace nfpo
