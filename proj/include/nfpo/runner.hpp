#pragma once

// Training loop, checkpoint round-trip and evaluation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfpo/checkpoint.hpp"
#include "nfpo/config.hpp"
#include "nfpo/envs.hpp"
#include "nfpo/error.hpp"
#include "nfpo/optim.hpp"
#include "nfpo/ppo.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/telemetry.hpp"

namespace nfpo {

namespace fs = std::filesystem;

inline std::unique_ptr<VecEnv> make_env(const EnvConfig& e, std::size_t num_envs) {
  if (e.name == "two_goal" || e.name == "gridworld") {
    GridWorldOptions opt;
    if (e.max_steps) opt.max_steps = e.max_steps;
    auto layout = e.name == "two_goal" ? two_goal_layout() : Layout::load(e.layout);
    return std::make_unique<GridWorld>(std::move(layout), num_envs, opt);
  }
  if (e.name == "point_reach") {
    PointReachOptions opt;
    opt.reward = e.reward_mode;
    if (e.max_steps) opt.max_steps = e.max_steps;
    return std::make_unique<PointReach>(num_envs, opt);
  }
  throw ConfigError("invalid config: env.name must be one of two_goal|gridworld|point_reach");
}

template <typename T>
Tensor<T> rows_tensor(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return Tensor<T>(Shape{rows, cols}, std::vector<T>(v.begin(), v.end()));
}

struct RolloutStats {
  std::vector<double> episode_returns;
  std::vector<double> episode_lengths;
  std::vector<int> outcomes;
  double mean_logdet = 0.0;
  double max_abs_logdet = 0.0;
  double saturation = 0.0;
  bool instability = false;
  std::string instability_reason;
};

struct TrainHooks {
  /// Called after every update; returning false stops training.
  std::function<bool(const MetricsRow&)> on_update;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::uint64_t updates = 0;
  bool unstable = false;
  std::string instability_reason;
  std::uint64_t instability_update = 0;
  double max_abs_logdet = 0.0;  ///< over every rollout of the run
  std::size_t bound_violations = 0;
  std::size_t skipped_steps = 0;
  std::string last_checkpoint;
};

template <typename T = float>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(prepare(std::move(cfg))), env_(make_env(cfg_.env, cfg_.env.num_envs)),
        agent_(make_agent<T>(cfg_, env_->obs_dim(), env_->action_dim(), cfg_.seed)),
        optimizer_(AdamOptions{.max_grad_norm = cfg_.grad_clip}),
        lr_(cfg_.lr) {
    obs_ = env_->reset(cfg_.seed);
    running_return_.assign(cfg_.env.num_envs, 0.0);
    running_length_.assign(cfg_.env.num_envs, 0.0);
  }

  const TrainConfig& config() const { return cfg_; }
  const Agent<T>& agent() const { return agent_; }
  Agent<T>& agent() { return agent_; }
  const VecEnv& env() const { return *env_; }
  const Adam<T>& optimizer() const { return optimizer_; }
  double lr() const { return lr_; }
  std::uint64_t update() const { return update_; }
  std::uint64_t env_steps() const { return env_steps_; }
  std::uint64_t total_updates() const {
    return std::max<std::uint64_t>(1, cfg_.total_steps / cfg_.batch_size());
  }
  const RolloutBuffer& last_rollout() const { return buffer_; }
  const RolloutStats& last_rollout_stats() const { return stats_; }
  const UpdateMetrics& last_update_metrics() const { return last_metrics_; }
  const std::vector<LayerProbe>& last_probe() const { return probe_; }

  /// Collects N x T transitions at temperature 1 into the rollout buffer.
  void collect() {
    const auto n = cfg_.env.num_envs, steps = cfg_.steps_per_env;
    const auto od = env_->obs_dim(), ad = env_->action_dim();
    buffer_ = RolloutBuffer(n, steps, od, ad);
    stats_ = RolloutStats{};
    NoGradGuard no_grad;
    try {
      for (std::size_t t = 0; t < steps; ++t) {
        auto obs = rows_tensor<T>(obs_, n, od);
        Stream rng(cfg_.seed, "policy", {update_, t});
        auto [act, logp] = agent_.policy.sample(agent_.params, obs, cfg_.temperature, rng);
        auto values = agent_.value(obs);
        std::vector<double> a(act.data().begin(), act.data().end());
        for (double v : a) {
          if (!std::isfinite(v)) throw NonFiniteError("non-finite sampled action");
        }
        auto res = env_->step(a);

        std::vector<std::size_t> cut;
        for (std::size_t i = 0; i < n; ++i) {
          const auto k = buffer_.index(i, t);
          std::copy_n(&obs_[i * od], od, &buffer_.obs[k * od]);
          std::copy_n(&a[i * ad], ad, &buffer_.actions[k * ad]);
          buffer_.rewards[k] = res.reward[i];
          buffer_.dones[k] = res.done[i];
          buffer_.truncations[k] = res.truncated[i];
          buffer_.log_prob_old[k] = logp.at(i);
          buffer_.values[k] = values.at(i);
          if (!std::isfinite(buffer_.log_prob_old[k]) || !std::isfinite(buffer_.values[k])) {
            throw NonFiniteError("non-finite log-prob or value during rollout");
          }
          running_return_[i] += res.reward[i];
          running_length_[i] += 1.0;
          if (res.done[i] || res.truncated[i]) {
            stats_.episode_returns.push_back(running_return_[i]);
            stats_.episode_lengths.push_back(running_length_[i]);
            stats_.outcomes.push_back(res.outcome[i]);
            running_return_[i] = 0.0;
            running_length_[i] = 0.0;
          }
          if (res.truncated[i]) cut.push_back(i);
        }
        // Time-limit cuts bootstrap from the value of the pre-reset state.
        if (!cut.empty()) {
          std::vector<double> term(cut.size() * od);
          for (std::size_t c = 0; c < cut.size(); ++c) {
            std::copy_n(&res.terminal_obs[cut[c] * od], od, &term[c * od]);
          }
          auto tv = agent_.value(rows_tensor<T>(term, cut.size(), od));
          for (std::size_t c = 0; c < cut.size(); ++c) {
            buffer_.truncation_values[buffer_.index(cut[c], t)] = tv.at(c);
          }
        }
        obs_ = res.obs;
      }
      auto last = agent_.value(rows_tensor<T>(obs_, n, od));
      for (std::size_t i = 0; i < n; ++i) buffer_.last_values[i] = last.at(i);

      if (const auto* flow = agent_.policy.flow()) {
        const auto m = buffer_.size();
        auto ev = flow->evaluate(agent_.params, rows_tensor<T>(buffer_.actions, m, ad),
                                 rows_tensor<T>(buffer_.obs, m, od));
        auto sat = flow->saturation_of(ev);
        double total = 0.0;
        for (auto v : ev.logdet.data()) total += v;
        stats_.mean_logdet = total / m;
        stats_.max_abs_logdet = sat.max_abs_logdet;
        stats_.saturation = sat.fraction;
      }
    } catch (const NonFiniteError& e) {
      stats_.instability = true;
      stats_.instability_reason = e.what();
    }
  }

  /// One collect + update cycle. Returns the metrics row for this update.
  MetricsRow step() {
    collect();
    const auto* flow = agent_.policy.flow();
    if (cfg_.probe && flow && !stats_.instability) {
      const auto m = buffer_.size();
      probe_ = gradient_factor_probe(*flow, agent_.params,
                                     rows_tensor<T>(buffer_.actions, m, buffer_.action_dim),
                                     rows_tensor<T>(buffer_.obs, m, buffer_.obs_dim));
    }
    last_metrics_ = UpdateMetrics{};
    bool unstable = stats_.instability;
    std::string reason = stats_.instability_reason;
    if (!unstable) {
      try {
        compute_gae(buffer_, cfg_.gamma, cfg_.lambda);
      } catch (const Error& e) {
        unstable = true;
        reason = e.what();
      }
    }
    if (!unstable) {
      last_metrics_ = ppo_update(agent_, optimizer_, buffer_, cfg_, lr_, update_);
      unstable = last_metrics_.instability;
      reason = last_metrics_.instability_reason;
    }
    env_steps_ += cfg_.batch_size();
    ++update_;

    if (!stats_.episode_returns.empty()) {
      ep_return_mean_ = mean_of(stats_.episode_returns);
      ep_len_mean_ = mean_of(stats_.episode_lengths);
    }
    MetricsRow row;
    row.update = update_;
    row.env_steps = env_steps_;
    row.lr = lr_;
    row.loss_pi = last_metrics_.loss_pi;
    row.loss_v = last_metrics_.loss_v;
    row.entropy = last_metrics_.entropy;
    row.approx_kl = last_metrics_.approx_kl;
    row.mean_logdet = stats_.mean_logdet;
    row.max_logdet = stats_.max_abs_logdet;
    row.saturation = stats_.saturation;
    row.ep_return_mean = ep_return_mean_;
    row.ep_len_mean = ep_len_mean_;
    row.instability_flag = unstable;
    if (unstable && !unstable_) {
      unstable_ = true;
      instability_reason_ = reason;
      instability_update_ = update_;
    }
    return row;
  }

  bool unstable() const { return unstable_; }
  const std::string& instability_reason() const { return instability_reason_; }

  /// Runs the remaining updates. With `out_dir`, writes config.snapshot,
  /// metrics.jsonl, probe.jsonl (when probing) and checkpoints/ckpt_<update>.bin.
  TrainResult run(const std::optional<fs::path>& out_dir = std::nullopt, const TrainHooks& hooks = {}) {
    std::optional<MetricsLog> log;
    std::ofstream probe_out;
    if (out_dir) {
      prepare_out_dir(*out_dir);
      std::ofstream(*out_dir / "config.snapshot") << snapshot(cfg_);
      log.emplace((*out_dir / "metrics.jsonl").string());
      if (cfg_.probe) probe_out.open(*out_dir / "probe.jsonl");
    } else {
      log.emplace();
    }
    TrainResult result;
    const auto target = total_updates();
    while (update_ < target && !unstable_) {
      auto row = step();
      log->append(row);
      result.max_abs_logdet = std::max(result.max_abs_logdet, stats_.max_abs_logdet);
      if (probe_out.is_open() && !probe_.empty()) {
        probe_out << nlohmann::json{{"update", update_}, {"layers", probe_}}.dump() << '\n';
      }
      const bool keep_going = !hooks.on_update || hooks.on_update(row);
      if (out_dir && (update_ % std::max<std::size_t>(1, cfg_.checkpoint_every) == 0 ||
                      update_ == target || unstable_ || !keep_going)) {
        result.last_checkpoint = write_checkpoint(*out_dir);
      }
      if (!keep_going) break;
    }
    result.rows = log->rows();
    result.updates = update_;
    result.unstable = unstable_;
    result.instability_reason = instability_reason_;
    result.instability_update = instability_update_;
    if (const auto* flow = agent_.policy.flow()) result.bound_violations = flow->bound_violations();
    result.skipped_steps = optimizer_.skipped_steps();
    return result;
  }

  std::string write_checkpoint(const fs::path& out_dir) const {
    fs::create_directories(out_dir / "checkpoints");
    auto path = (out_dir / "checkpoints" / ("ckpt_" + std::to_string(update_) + ".bin")).string();
    save_checkpoint(checkpoint(), path);
    return path;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.meta["config"] = snapshot(cfg_);
    c.meta["obs_dim"] = env_->obs_dim();
    c.meta["action_dim"] = env_->action_dim();
    if (const auto* f = agent_.policy.flow()) {
      c.meta["policy"] = "flow";
      c.meta["arch"] = f->arch();
    } else {
      c.meta["policy"] = "gaussian";
      c.meta["arch"] = agent_.policy.gaussian()->arch();
    }
    c.meta["update"] = update_;
    c.meta["env_steps"] = env_steps_;
    c.meta["lr"] = lr_;
    c.meta["adam_steps"] = optimizer_.steps();
    c.meta["adam_skipped"] = optimizer_.skipped_steps();
    c.meta["env_state"] = env_->save_state();
    c.meta["obs"] = obs_;
    c.meta["running_return"] = running_return_;
    c.meta["running_length"] = running_length_;
    c.meta["ep_return_mean"] = ep_return_mean_;
    c.meta["ep_len_mean"] = ep_len_mean_;
    c.meta["unstable"] = unstable_;
    c.put_store(agent_.params);
    for (const auto& [name, m] : optimizer_.first_moments()) {
      c.put<T>("optim.m." + name, agent_.params.get(name).shape(), m);
    }
    for (const auto& [name, v] : optimizer_.second_moments()) {
      c.put<T>("optim.v." + name, agent_.params.get(name).shape(), v);
    }
    return c;
  }

  /// Rebuilds a trainer from a checkpoint written by `checkpoint()`.
  static Trainer from_checkpoint(const Checkpoint& c) {
    Trainer tr(parse_snapshot(c.meta.at("config").get<std::string>()));
    tr.restore(c);
    return tr;
  }

  static Trainer from_checkpoint(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

  void restore(const Checkpoint& c) {
    c.load_store(agent_.params);
    std::map<std::string, std::vector<T>> m, v;
    for (const auto& [name, p] : agent_.params) {
      if (!c.entries.contains("optim.m." + name)) continue;
      const auto& em = c.at("optim.m." + name);
      const auto& ev = c.at("optim.v." + name);
      m[name].assign(em.data.begin(), em.data.end());
      v[name].assign(ev.data.begin(), ev.data.end());
    }
    optimizer_.restore(std::move(m), std::move(v), c.meta.at("adam_steps").get<std::size_t>(),
                       c.meta.at("adam_skipped").get<std::size_t>());
    update_ = c.meta.at("update").get<std::uint64_t>();
    env_steps_ = c.meta.at("env_steps").get<std::uint64_t>();
    lr_ = c.meta.at("lr").get<double>();
    env_->load_state(c.meta.at("env_state"));
    obs_ = c.meta.at("obs").get<std::vector<double>>();
    running_return_ = c.meta.at("running_return").get<std::vector<double>>();
    running_length_ = c.meta.at("running_length").get<std::vector<double>>();
    ep_return_mean_ = c.meta.at("ep_return_mean").get<double>();
    ep_len_mean_ = c.meta.at("ep_len_mean").get<double>();
    unstable_ = c.meta.at("unstable").get<bool>();
  }

 private:
  static TrainConfig prepare(TrainConfig cfg) {
    cfg.resolve();
    cfg.validate();
    return cfg;
  }

  static double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (auto x : v) s += x;
    return s / v.size();
  }

  static void prepare_out_dir(const fs::path& dir) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      throw ConfigError("output directory '" + dir.string() + "' already exists and is not empty");
    }
    fs::create_directories(dir);
  }

  TrainConfig cfg_;
  std::unique_ptr<VecEnv> env_;
  Agent<T> agent_;
  Adam<T> optimizer_;
  double lr_;
  std::uint64_t update_ = 0;
  std::uint64_t env_steps_ = 0;
  std::vector<double> obs_;
  std::vector<double> running_return_;
  std::vector<double> running_length_;
  double ep_return_mean_ = 0.0;
  double ep_len_mean_ = 0.0;
  bool unstable_ = false;
  std::string instability_reason_;
  std::uint64_t instability_update_ = 0;
  RolloutBuffer buffer_;
  RolloutStats stats_;
  UpdateMetrics last_metrics_;
  std::vector<LayerProbe> probe_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::size_t episodes = 100;
  double temperature = 1.0;  ///< 0 selects the mode action
  std::optional<std::vector<double>> fixed_start;
  std::uint64_t seed = 0;
  std::size_t coverage_threshold = 10;
};

struct TrajectoryStep {
  double x, y, ax, ay, reward;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  double ret = 0.0;
  int outcome = -1;
};

struct EvalReport {
  double success_rate = 0.0;
  double mean_return = 0.0;
  double mean_length = 0.0;
  std::vector<int> outcomes;
  ModeCoverage coverage;
  std::vector<Trajectory> trajectories;
};

/// Runs one episode in each of `episodes` parallel environments.
template <typename T>
EvalReport evaluate(const Agent<T>& agent, const EnvConfig& env_cfg, const EvalOptions& opt) {
  if (opt.episodes < 1) throw ConfigError("evaluation needs at least one episode");
  if (opt.temperature < 0.0) throw ConfigError("temperature must be >= 0");
  const auto n = opt.episodes;
  auto env = make_env(env_cfg, n);
  if (opt.fixed_start) env->set_fixed_start(opt.fixed_start);
  const auto od = env->obs_dim(), ad = env->action_dim();
  auto obs = env->reset(opt.seed);
  EvalReport rep;
  rep.trajectories.resize(n);
  std::vector<bool> finished(n, false);
  std::size_t remaining = n;
  NoGradGuard no_grad;
  for (std::uint64_t t = 0; remaining > 0; ++t) {
    auto o = rows_tensor<T>(obs, n, od);
    Tensor<T> act;
    if (opt.temperature == 0.0) {
      act = agent.policy.mode(agent.params, o);
    } else {
      Stream rng(opt.seed, "eval_policy", {t});
      act = agent.policy.sample(agent.params, o, opt.temperature, rng).first;
    }
    std::vector<double> a(act.data().begin(), act.data().end());
    const auto pos = env->positions();
    auto res = env->step(a);
    for (std::size_t i = 0; i < n; ++i) {
      if (finished[i]) continue;
      auto& tr = rep.trajectories[i];
      tr.steps.push_back({pos[2 * i], pos[2 * i + 1], a[i * ad], a[i * ad + 1], res.reward[i]});
      tr.ret += res.reward[i];
      if (res.done[i] || res.truncated[i]) {
        tr.outcome = res.outcome[i];
        finished[i] = true;
        --remaining;
      }
    }
    obs = res.obs;
  }
  double ret = 0.0, len = 0.0;
  std::size_t wins = 0;
  for (const auto& tr : rep.trajectories) {
    rep.outcomes.push_back(tr.outcome);
    ret += tr.ret;
    len += tr.steps.size();
    wins += tr.outcome >= 0 ? 1 : 0;
  }
  rep.success_rate = static_cast<double>(wins) / n;
  rep.mean_return = ret / n;
  rep.mean_length = len / n;
  rep.coverage = mode_coverage(rep.outcomes, env->goal_count(), opt.coverage_threshold);
  return rep;
}

inline void write_trajectories_csv(const EvalReport& rep, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "episode,t,x,y,ax,ay,reward,goal_id\n";
  out.precision(9);
  for (std::size_t e = 0; e < rep.trajectories.size(); ++e) {
    const auto& tr = rep.trajectories[e];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      out << e << ',' << t << ',' << s.x << ',' << s.y << ',' << s.ax << ',' << s.ay << ','
          << s.reward << ',' << tr.outcome << '\n';
    }
  }
}

inline nlohmann::json eval_summary_json(const EvalReport& rep, const EvalOptions& opt) {
  return {{"episodes", opt.episodes},
          {"temperature", opt.temperature},
          {"success_rate", rep.success_rate},
          {"mean_return", rep.mean_return},
          {"mean_length", rep.mean_length},
          {"goal_counts", rep.coverage.counts},
          {"failures", rep.coverage.failures},
          {"coverage", rep.coverage.coverage},
          {"count_entropy", rep.coverage.count_entropy}};
}

}  // namespace nfpo
