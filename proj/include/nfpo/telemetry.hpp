#pragma once

// Per-update metrics rows and the diagnostics behind the instability and
// saturation analysis: the three factors of the per-sample scale gradient
// exp(g(s)) * g'(s) * |grad_theta s|, and goal-mode coverage of rollouts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfpo/error.hpp"
#include "nfpo/flow.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

struct MetricsRow {
  std::uint64_t update = 0;
  std::uint64_t env_steps = 0;
  double lr = 0.0;
  double loss_pi = 0.0;
  double loss_v = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double mean_logdet = 0.0;
  double max_logdet = 0.0;
  double saturation = 0.0;
  double ep_return_mean = 0.0;
  double ep_len_mean = 0.0;
  bool instability_flag = false;
};

inline const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> fields{
      "update",      "env_steps",  "lr",         "loss_pi",        "loss_v",
      "entropy",     "approx_kl",  "mean_logdet", "max_logdet",    "saturation",
      "ep_return_mean", "ep_len_mean", "instability_flag"};
  return fields;
}

/// JSON cannot carry NaN/Inf; those are written as null.
inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const MetricsRow& r) {
  j = nlohmann::json{{"update", r.update},
                     {"env_steps", r.env_steps},
                     {"lr", json_number(r.lr)},
                     {"loss_pi", json_number(r.loss_pi)},
                     {"loss_v", json_number(r.loss_v)},
                     {"entropy", json_number(r.entropy)},
                     {"approx_kl", json_number(r.approx_kl)},
                     {"mean_logdet", json_number(r.mean_logdet)},
                     {"max_logdet", json_number(r.max_logdet)},
                     {"saturation", json_number(r.saturation)},
                     {"ep_return_mean", json_number(r.ep_return_mean)},
                     {"ep_len_mean", json_number(r.ep_len_mean)},
                     {"instability_flag", r.instability_flag}};
}

inline void from_json(const nlohmann::json& j, MetricsRow& r) {
  auto num = [&](const char* k) {
    const auto& v = j.at(k);
    return v.is_null() ? NAN : v.get<double>();
  };
  r.update = j.at("update").get<std::uint64_t>();
  r.env_steps = j.at("env_steps").get<std::uint64_t>();
  r.lr = num("lr");
  r.loss_pi = num("loss_pi");
  r.loss_v = num("loss_v");
  r.entropy = num("entropy");
  r.approx_kl = num("approx_kl");
  r.mean_logdet = num("mean_logdet");
  r.max_logdet = num("max_logdet");
  r.saturation = num("saturation");
  r.ep_return_mean = num("ep_return_mean");
  r.ep_len_mean = num("ep_len_mean");
  r.instability_flag = j.at("instability_flag").get<bool>();
}

/// Append-only JSON-lines writer. Update indices must increase and the
/// instability flag, once written, stays set on every later row.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw Error("cannot open metrics file '" + path + "'");
  }

  void append(MetricsRow row) {
    if (!rows_.empty() && row.update <= rows_.back().update) {
      throw Error("metrics update index must increase (" + std::to_string(row.update) +
                  " after " + std::to_string(rows_.back().update) + ")");
    }
    unstable_ = unstable_ || row.instability_flag;
    row.instability_flag = unstable_;
    if (out_.is_open()) {
      out_ << nlohmann::json(row).dump() << '\n';
      out_.flush();
    }
    rows_.push_back(row);
  }

  const std::vector<MetricsRow>& rows() const { return rows_; }
  bool unstable() const { return unstable_; }

 private:
  std::ofstream out_;
  std::vector<MetricsRow> rows_;
  bool unstable_ = false;
};

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file '" + path + "'");
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line).get<MetricsRow>());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient factor probe

struct Summary {
  double mean = 0.0;
  double p95 = 0.0;
  double max = 0.0;
};

inline Summary summarize(std::vector<double> v) {
  Summary s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double total = 0.0;
  for (auto x : v) total += x;
  s.mean = total / v.size();
  const auto idx = static_cast<std::size_t>(std::ceil(0.95 * v.size())) - 1;
  s.p95 = v[std::min(idx, v.size() - 1)];
  s.max = v.back();
  return s;
}

struct LayerProbe {
  Summary exp_scale;      ///< exp(g(s))
  Summary scale_slope;    ///< g'(s)
  Summary param_grad_norm;  ///< |grad_theta sum_k s_k|
  double dead_fraction = 0.0;  ///< share of g'(s) == 0
};

inline void to_json(nlohmann::json& j, const Summary& s) {
  j = {{"mean", json_number(s.mean)}, {"p95", json_number(s.p95)}, {"max", json_number(s.max)}};
}
inline void to_json(nlohmann::json& j, const LayerProbe& p) {
  j = {{"exp_g", p.exp_scale},
       {"g_prime", p.scale_slope},
       {"grad_s_norm", p.param_grad_norm},
       {"dead_fraction", p.dead_fraction}};
}

/// Per-layer factor statistics on at most `max_points` samples of (a, obs).
/// Under tanh normalization exp(g) must lie in [e^-l, e^l]; a violation
/// throws std::logic_error.
template <typename T>
std::vector<LayerProbe> gradient_factor_probe(const FlowPolicy<T>& flow, const ParamStore<T>& params,
                                              const Tensor<T>& action, const Tensor<T>& obs,
                                              std::size_t max_points = 64) {
  const auto& arch = flow.arch();
  const auto rows = std::min(max_points, action.rows());
  std::vector<std::size_t> pick(rows);
  for (std::size_t i = 0; i < rows; ++i) pick[i] = i * action.rows() / rows;
  auto a = take_rows(action, pick);
  auto o = take_rows(obs, pick);

  // Layer inputs along the forward chain.
  std::vector<Tensor<T>> inputs;
  {
    NoGradGuard no_grad;
    Tensor<T> x = a;
    for (const auto& layer : flow.layers()) {
      inputs.push_back(x);
      x = layer.forward(params, x, o).out;
    }
  }

  auto scratch = params.clone();
  std::vector<LayerProbe> out;
  for (std::size_t j = 0; j < flow.layers().size(); ++j) {
    const auto& layer = flow.layers()[j];
    LayerProbe probe;
    if (!arch.has_scale_net()) {
      out.push_back(probe);
      continue;
    }
    auto kept = select_cols(inputs[j], layer.kept());
    std::vector<double> e, gp, gn;
    std::size_t dead = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t one[1] = {i};
      auto k1 = take_rows(kept, one);
      auto o1 = take_rows(o, one);
      scratch.zero_grad();
      auto s = layer.raw_scale(scratch, k1, o1);
      backward(sum(s));
      double sq = 0.0;
      for (const auto& [name, p] : scratch) {
        if (name.rfind(layer.scale_prefix() + ".", 0) != 0) continue;
        for (auto g : p.grad()) sq += static_cast<double>(g) * g;
      }
      gn.push_back(std::sqrt(sq));
      for (auto sv : s.data()) {
        const double g = scale_value(sv, arch.norm);
        const double eg = std::exp(g);
        if (arch.norm.kind == NormKind::kTanh) {
          const double lo = std::exp(-arch.norm.l), hi = std::exp(arch.norm.l);
          if (eg < lo * (1 - 1e-12) || eg > hi * (1 + 1e-12)) {
            throw std::logic_error("tanh-normalized scale factor outside [e^-l, e^l]");
          }
        }
        const double d = scale_derivative(sv, arch.norm);
        e.push_back(eg);
        gp.push_back(d);
        dead += d == 0.0 ? 1 : 0;
      }
    }
    probe.exp_scale = summarize(e);
    probe.scale_slope = summarize(gp);
    probe.param_grad_norm = summarize(gn);
    probe.dead_fraction = gp.empty() ? 0.0 : static_cast<double>(dead) / gp.size();
    out.push_back(probe);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mode coverage

struct ModeCoverage {
  std::vector<std::size_t> counts;  ///< successful episodes per goal
  std::size_t episodes = 0;
  std::size_t failures = 0;  ///< episodes that reached no goal
  std::size_t coverage = 0;  ///< goals with count >= threshold
  double count_entropy = 0.0;  ///< natural-log entropy of the goal counts
};

/// `outcomes[i]` is the goal id episode i ended in, or -1.
inline ModeCoverage mode_coverage(const std::vector<int>& outcomes, std::size_t goal_count,
                                  std::size_t threshold = 10) {
  if (outcomes.empty()) throw Error("mode_coverage needs at least one episode");
  ModeCoverage mc;
  mc.counts.assign(goal_count, 0);
  mc.episodes = outcomes.size();
  for (int g : outcomes) {
    if (g < 0) {
      ++mc.failures;
    } else {
      if (static_cast<std::size_t>(g) >= goal_count) throw Error("outcome goal id out of range");
      ++mc.counts[g];
    }
  }
  std::size_t hits = 0;
  for (auto c : mc.counts) {
    hits += c;
    if (c >= threshold) ++mc.coverage;
  }
  for (auto c : mc.counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / hits;
    mc.count_entropy -= p * std::log(p);
  }
  return mc;
}

}  // namespace nfpo
