#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nfpo/config.hpp"
#include "nfpo/error.hpp"
#include "nfpo/flow.hpp"
#include "nfpo/mlp.hpp"
#include "nfpo/optim.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/policy.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

/// Policy plus value network sharing one parameter store (`actor.*`,
/// `critic.*`).
template <typename T>
struct Agent {
  Policy<T> policy;
  MlpSpec critic;
  ParamStore<T> params;

  Tensor<T> value(const Tensor<T>& obs) const {
    return reshape(mlp_forward(params, "critic", critic, obs), Shape{obs.rows()});
  }
};

inline MlpSpec critic_spec(std::size_t obs_dim, const std::vector<std::size_t>& hidden,
                           Activation act) {
  MlpSpec spec;
  spec.input = obs_dim;
  spec.hidden = hidden;
  spec.output = 1;
  spec.activation = act;
  spec.output_gain = 1.0;
  return spec;
}

inline FlowArch flow_arch_from(const TrainConfig& cfg, std::size_t obs_dim, std::size_t action_dim) {
  FlowArch a;
  a.obs_dim = obs_dim;
  a.action_dim = action_dim;
  a.layers = cfg.layers;
  a.hidden = cfg.actor_hidden;
  a.activation = cfg.activation;
  a.norm = cfg.norm;
  return a;
}

inline GaussianArch gaussian_arch_from(const TrainConfig& cfg, std::size_t obs_dim,
                                       std::size_t action_dim) {
  GaussianArch a;
  a.obs_dim = obs_dim;
  a.action_dim = action_dim;
  a.hidden = cfg.actor_hidden;
  a.activation = cfg.activation;
  a.state_dependent_std = cfg.state_dependent_std;
  return a;
}

template <typename T>
Agent<T> make_agent(const TrainConfig& cfg, std::size_t obs_dim, std::size_t action_dim,
                    std::uint64_t seed) {
  auto policy = cfg.policy == PolicyFamily::kFlow
                    ? Policy<T>(FlowPolicy<T>(flow_arch_from(cfg, obs_dim, action_dim)))
                    : Policy<T>(GaussianPolicy<T>(gaussian_arch_from(cfg, obs_dim, action_dim)));
  Agent<T> agent{std::move(policy), critic_spec(obs_dim, cfg.critic_hidden, cfg.activation), {}};
  agent.policy.init(agent.params, seed);
  init_mlp(agent.params, "critic", agent.critic, seed);
  return agent;
}

/// On-policy batch of N envs x T steps, stored row-major with index n*T + t.
struct RolloutBuffer {
  std::size_t num_envs = 0;
  std::size_t steps = 0;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;

  std::vector<double> obs;         ///< [N*T, obs_dim]
  std::vector<double> actions;     ///< [N*T, action_dim]
  std::vector<double> rewards;     ///< [N*T]
  std::vector<std::uint8_t> dones;
  std::vector<std::uint8_t> truncations;
  std::vector<double> log_prob_old;
  std::vector<double> values;
  /// V(terminal obs) where a step was truncated, 0 elsewhere.
  std::vector<double> truncation_values;
  /// V(obs after the last step) per env.
  std::vector<double> last_values;

  std::vector<double> advantages;
  std::vector<double> returns;

  RolloutBuffer() = default;
  RolloutBuffer(std::size_t n, std::size_t t, std::size_t od, std::size_t ad)
      : num_envs(n), steps(t), obs_dim(od), action_dim(ad),
        obs(n * t * od), actions(n * t * ad), rewards(n * t), dones(n * t),
        truncations(n * t), log_prob_old(n * t), values(n * t),
        truncation_values(n * t), last_values(n) {}

  std::size_t size() const { return num_envs * steps; }
  std::size_t index(std::size_t env, std::size_t t) const { return env * steps + t; }
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Generalized advantage estimation over [N, T] arrays (index n*T + t).
///
///   delta_t = r_t + gamma * V_next * (1 - done_t) - V_t
///   A_t     = delta_t + gamma * lambda * (1 - done_t) * (1 - trunc_t) * A_{t+1}
///
/// V_next is V_{t+1}, last_values[n] at t = T-1, or truncation_values at a
/// truncated step. A truncated step bootstraps but still ends the
/// episode's advantage chain; a terminal step does neither.
inline GaeResult gae(std::size_t num_envs, std::size_t steps, std::span<const double> rewards,
                     std::span<const double> values, std::span<const double> last_values,
                     std::span<const double> truncation_values,
                     std::span<const std::uint8_t> dones,
                     std::span<const std::uint8_t> truncations, double gamma, double lambda) {
  const auto n = num_envs * steps;
  if (rewards.size() != n || values.size() != n || truncation_values.size() != n ||
      dones.size() != n || truncations.size() != n || last_values.size() != num_envs) {
    throw ShapeError("gae: inputs are not aligned to [" + std::to_string(num_envs) + ", " +
                     std::to_string(steps) + "]");
  }
  auto finite = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(rewards) || !finite(values) || !finite(last_values) || !finite(truncation_values)) {
    throw Error("gae: non-finite reward or value input");
  }
  GaeResult out{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t e = 0; e < num_envs; ++e) {
    double next_adv = 0.0;
    for (std::size_t t = steps; t-- > 0;) {
      const auto i = e * steps + t;
      const bool done = dones[i] != 0;
      const bool trunc = truncations[i] != 0 && !done;
      double next_value = t + 1 < steps ? values[i + 1] : last_values[e];
      if (trunc) next_value = truncation_values[i];
      const double delta = rewards[i] + gamma * next_value * (done ? 0.0 : 1.0) - values[i];
      const double carry = (done || trunc) ? 0.0 : 1.0;
      next_adv = delta + gamma * lambda * carry * next_adv;
      out.advantages[i] = next_adv;
      out.returns[i] = next_adv + values[i];
    }
  }
  return out;
}

inline void compute_gae(RolloutBuffer& buf, double gamma, double lambda) {
  auto r = gae(buf.num_envs, buf.steps, buf.rewards, buf.values, buf.last_values,
               buf.truncation_values, buf.dones, buf.truncations, gamma, lambda);
  buf.advantages = std::move(r.advantages);
  buf.returns = std::move(r.returns);
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
inline void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  const double m = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
  double var = 0.0;
  for (auto a : adv) var += (a - m) * (a - m);
  const double sd = std::sqrt(var / adv.size());
  for (auto& a : adv) a = (a - m) / (sd + 1e-8);
}

/// Negated clipped surrogate:
///   -mean(min(r A, clip(r, 1 - eps, 1 + eps) A)),  r = exp(logp_new - logp_old).
/// Gradients flow only through logp_new.
template <typename T>
Tensor<T> ppo_clip_loss(const Tensor<T>& logp_new, const Tensor<T>& logp_old,
                        const Tensor<T>& advantages, double eps) {
  auto ratio = exp(sub(logp_new, logp_old.detach()));
  auto adv = advantages.detach();
  auto unclipped = mul(ratio, adv);
  auto clipped = mul(clip(ratio, static_cast<T>(1.0 - eps), static_cast<T>(1.0 + eps)), adv);
  return neg(mean(minimum(unclipped, clipped)));
}

/// coef * mean((values - returns)^2).
template <typename T>
Tensor<T> value_loss(const Tensor<T>& values, const Tensor<T>& returns, double coef = 1.0) {
  return scale(mean(square(sub(values, returns.detach()))), static_cast<T>(coef));
}

/// KL-targeted step-size rule; the fixed schedule returns lr unchanged.
inline double adaptive_lr(double lr, double kl, double desired,
                          LrSchedule schedule = LrSchedule::kAdaptive) {
  if (schedule == LrSchedule::kFixed) return lr;
  if (kl > 2.0 * desired) return std::max(1e-5, lr / 1.5);
  if (kl < desired / 2.0 && kl > 0.0) return std::min(1e-2, lr * 1.5);
  return lr;
}

struct UpdateMetrics {
  double loss_pi = 0.0;
  double loss_v = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  /// max |logp_new - logp_old| on the first minibatch before any step.
  double ratio_check_error = 0.0;
  std::size_t gradient_steps = 0;
  std::size_t skipped_steps = 0;
  bool instability = false;
  std::string instability_reason;
};

struct UpdateOptions {
  /// Replaces the action-noise draw for (epoch, sample, dim) when set; the
  /// default draws N(0, action_noise^2).
  std::function<double(std::size_t, std::size_t, std::size_t)> noise;
};

/// One PPO update: epochs x minibatches gradient steps on
/// surrogate + value_coef * value_loss - entropy_coef * entropy.
///
/// Minibatches are a keyed shuffle of the N*T samples, redrawn every epoch.
/// The learning rate is carried in `lr` and adapted per minibatch under the
/// adaptive schedule.
template <typename T>
UpdateMetrics ppo_update(Agent<T>& agent, Adam<T>& optimizer, RolloutBuffer& buf,
                         const TrainConfig& cfg, double& lr, std::uint64_t update_index,
                         const UpdateOptions& options = {}) {
  UpdateMetrics m;
  const auto n = buf.size();
  const auto od = buf.obs_dim, ad = buf.action_dim;
  if (buf.advantages.size() != n) throw Error("ppo_update: buffer has no advantages");
  std::vector<double> adv = buf.advantages;
  normalize_advantages(adv);

  auto to_tensor = [](std::span<const double> src, Shape shape) {
    std::vector<T> v(src.begin(), src.end());
    return Tensor<T>(std::move(shape), std::move(v));
  };
  const auto obs_all = to_tensor(buf.obs, {n, od});
  const auto act_all = to_tensor(buf.actions, {n, ad});
  const auto logp_old_all = to_tensor(buf.log_prob_old, {n});
  const auto adv_all = to_tensor(adv, {n});
  const auto ret_all = to_tensor(buf.returns, {n});

  std::vector<std::size_t> order(n);
  double sum_pi = 0, sum_v = 0, sum_ent = 0, sum_kl = 0;
  std::size_t count = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !m.instability; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Stream shuffle_rng(cfg.seed, "minibatch", {update_index, epoch});
    shuffle_rng.shuffle(order.begin(), order.end());

    // Fresh action noise per epoch, indexed by sample so minibatch order
    // does not matter.
    std::vector<double> noise;
    if (cfg.action_noise > 0.0 || options.noise) {
      noise.resize(n * ad);
      Stream noise_rng(cfg.seed, "action_noise", {update_index, epoch});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < ad; ++d) {
          noise[i * ad + d] = options.noise ? options.noise(epoch, i, d)
                                            : cfg.action_noise * noise_rng.normal();
        }
      }
    }

    for (std::size_t mb = 0; mb < cfg.minibatches; ++mb) {
      const auto begin = mb * n / cfg.minibatches;
      const auto end = (mb + 1) * n / cfg.minibatches;
      std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const auto bsz = rows.size();
      auto obs = take_rows(obs_all, rows);
      auto act = take_rows(act_all, rows);
      if (!noise.empty()) {
        auto a = act.mutable_data();
        for (std::size_t r = 0; r < bsz; ++r) {
          for (std::size_t d = 0; d < ad; ++d) a[r * ad + d] += static_cast<T>(noise[rows[r] * ad + d]);
        }
      }
      auto logp_old = take_rows(logp_old_all, rows);
      auto advantages = take_rows(adv_all, rows);
      auto returns = take_rows(ret_all, rows);

      agent.params.zero_grad();
      Tensor<T> loss, pi_loss, v_loss, entropy, logp_new;
      try {
        logp_new = agent.policy.log_prob(agent.params, act, obs);
        pi_loss = ppo_clip_loss(logp_new, logp_old, advantages, cfg.clip);
        v_loss = value_loss(agent.value(obs), returns, cfg.value_coef);
        loss = add(pi_loss, v_loss);
        if (cfg.entropy_coef > 0.0) {
          Stream ent_rng(cfg.seed, "entropy", {update_index, epoch, mb});
          entropy = agent.policy.entropy(agent.params, obs, bsz, ent_rng);
          loss = sub(loss, scale(entropy, static_cast<T>(cfg.entropy_coef)));
        } else if (agent.policy.is_flow()) {
          entropy = Tensor<T>::scalar(-mean(logp_new.detach()).item());
        } else {
          Stream ent_rng(cfg.seed, "entropy", {update_index, epoch, mb});
          entropy = agent.policy.entropy(agent.params, obs, bsz, ent_rng).detach();
        }
      } catch (const NonFiniteError& e) {
        m.instability = true;
        m.instability_reason = e.what();
        break;
      }
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        m.instability = true;
        m.instability_reason = "non-finite loss";
        break;
      }

      double kl = 0.0;
      const auto lp_new = logp_new.data();
      const auto lp_old = logp_old.data();
      double max_err = 0.0;
      for (std::size_t r = 0; r < bsz; ++r) {
        kl += static_cast<double>(lp_old[r]) - lp_new[r];
        max_err = std::max(max_err, std::abs(static_cast<double>(lp_old[r]) - lp_new[r]));
      }
      kl /= static_cast<double>(bsz);
      if (epoch == 0 && mb == 0) m.ratio_check_error = max_err;
      lr = adaptive_lr(lr, kl, cfg.desired_kl, cfg.lr_schedule);

      backward(loss);
      if (!optimizer.step(agent.params, lr)) ++m.skipped_steps;
      m.grad_norm = optimizer.last_grad_norm();
      ++m.gradient_steps;

      sum_pi += pi_loss.item();
      sum_v += v_loss.item();
      sum_ent += entropy.item();
      sum_kl += kl;
      ++count;
    }
  }
  if (count) {
    m.loss_pi = sum_pi / count;
    m.loss_v = sum_v / count;
    m.entropy = sum_ent / count;
    m.approx_kl = sum_kl / count;
  }
  m.lr = lr;
  return m;
}

}  // namespace nfpo
