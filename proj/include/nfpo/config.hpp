#pragma once

// Training configuration and its key-value file format.
//
// Configs are YAML documents of `section: {key: value}` maps; every leaf is
// addressed by a dotted key such as `ppo.norm_mode`. Unknown keys are
// rejected. `snapshot()` writes the resolved configuration back in a
// canonical form (fixed section order, keys sorted, round-trip number
// formatting) that reproduces the run exactly.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nfpo/envs.hpp"
#include "nfpo/error.hpp"
#include "nfpo/flow.hpp"
#include "nfpo/mlp.hpp"

namespace nfpo {

enum class PolicyFamily { kGaussian, kFlow };
enum class LrSchedule { kFixed, kAdaptive };

struct EnvConfig {
  std::string name = "two_goal";  ///< two_goal | gridworld | point_reach
  std::string layout;             ///< layout file for `gridworld`
  RewardMode reward_mode = RewardMode::kSparse;
  std::size_t num_envs = 32;
  std::size_t max_steps = 0;  ///< 0 keeps the environment default
};

struct TrainConfig {
  EnvConfig env;

  // Policy and networks.
  PolicyFamily policy = PolicyFamily::kFlow;
  NormMode norm;
  std::size_t layers = 4;
  std::vector<std::size_t> actor_hidden{64, 64};
  std::vector<std::size_t> critic_hidden{64, 64};
  Activation activation = Activation::kElu;
  bool state_dependent_std = false;

  // PPO.
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  std::size_t epochs = 5;
  std::size_t minibatches = 4;
  double value_coef = 1.0;
  double grad_clip = 1.0;
  /// Negative until resolved: 1e-3 for Gaussian, 0 for flow.
  double entropy_coef = -1.0;
  std::size_t steps_per_env = 24;
  double lr = 1e-3;
  double desired_kl = 1e-2;
  LrSchedule lr_schedule = LrSchedule::kAdaptive;
  double action_noise = 0.0;
  double temperature = 1.0;

  // Run.
  std::uint64_t total_steps = 200'000;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 50;
  bool probe = false;

  std::size_t batch_size() const { return env.num_envs * steps_per_env; }

  void resolve() {
    if (entropy_coef < 0.0) entropy_coef = policy == PolicyFamily::kGaussian ? 1e-3 : 0.0;
  }

  /// Throws ConfigError naming the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw ConfigError("invalid config: " + key + " " + why);
    };
    if (env.name != "two_goal" && env.name != "gridworld" && env.name != "point_reach") {
      fail("env.name", "must be one of two_goal|gridworld|point_reach");
    }
    if (env.name == "gridworld" && env.layout.empty()) fail("env.layout", "is required for env.name=gridworld");
    if (env.num_envs < 1) fail("env.num_envs", "must be >= 1");
    if (norm.kind == NormKind::kClip || norm.kind == NormKind::kTanh) {
      if (!(norm.l > 0.0)) fail("ppo.l", "must be > 0 for clip/tanh normalization");
    }
    if (policy == PolicyFamily::kFlow && layers < 3) {
      fail("ppo.layers", "must be >= 3 for alternating coupling masks to mix all dimensions");
    }
    for (auto h : actor_hidden) if (h < 1) fail("ppo.actor_hidden", "widths must be >= 1");
    for (auto h : critic_hidden) if (h < 1) fail("ppo.critic_hidden", "widths must be >= 1");
    if (!(clip > 0.0 && clip < 1.0)) fail("ppo.clip", "must lie in (0, 1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) fail("ppo.gamma", "must lie in [0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("ppo.lambda", "must lie in [0, 1]");
    if (epochs < 1) fail("ppo.epochs", "must be >= 1");
    if (minibatches < 1) fail("ppo.minibatches", "must be >= 1");
    if (steps_per_env < 1) fail("ppo.steps_per_env", "must be >= 1");
    if (minibatches > batch_size()) fail("ppo.minibatches", "exceeds num_envs * steps_per_env");
    if (!(lr >= 0.0)) fail("ppo.lr", "must be >= 0");
    if (!(desired_kl > 0.0)) fail("ppo.desired_kl", "must be > 0");
    if (!(action_noise >= 0.0)) fail("ppo.action_noise", "must be >= 0");
    if (!(temperature >= 0.0)) fail("ppo.temperature", "must be >= 0");
    if (!(value_coef >= 0.0)) fail("ppo.value_coef", "must be >= 0");
    if (!(grad_clip >= 0.0)) fail("ppo.grad_clip", "must be >= 0");
    if (total_steps < batch_size()) fail("run.total_steps", "must cover at least one rollout");
    if (checkpoint_every < 1) fail("run.checkpoint_every", "must be >= 1");
  }
};

namespace config_detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c); };
  while (!s.empty() && ws(s.back())) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(s[i])) ++i;
  return s.substr(i);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto t = trim(v);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("invalid config: " + key + " expects a number, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec == std::errc() && ptr == t.data() + t.size()) return out;
  // Accept integral values written in floating notation (e.g. 2e5).
  const double d = parse_double(key, v);
  if (d < 0 || d != std::floor(d)) {
    throw ConfigError("invalid config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::uint64_t>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("invalid config: " + key + " expects true|false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_dims(const std::string& key, std::string v) {
  v = trim(v);
  if (!v.empty() && v.front() == '[') v.erase(v.begin());
  if (!v.empty() && v.back() == ']') v.pop_back();
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(static_cast<std::size_t>(parse_uint(key, item)));
  }
  if (out.empty()) throw ConfigError("invalid config: " + key + " expects a non-empty list");
  return out;
}

/// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string fmt_dims(const std::vector<std::size_t>& d) {
  std::string s = "[";
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(d[i]);
  }
  return s + "]";
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::map<std::string, Field>& schema() {
  using C = TrainConfig;
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto num = [&f](const std::string& key, double C::*m) {
      f[key] = {[key, m](C& c, const std::string& v) { c.*m = parse_double(key, v); },
                [m](const C& c) { return fmt_double(c.*m); }};
    };
    auto count = [&f](const std::string& key, std::size_t C::*m) {
      f[key] = {[key, m](C& c, const std::string& v) { c.*m = parse_uint(key, v); },
                [m](const C& c) { return std::to_string(c.*m); }};
    };
    auto dims = [&f](const std::string& key, std::vector<std::size_t> C::*m) {
      f[key] = {[key, m](C& c, const std::string& v) { c.*m = parse_dims(key, v); },
                [m](const C& c) { return fmt_dims(c.*m); }};
    };
    f["env.name"] = {[](C& c, const std::string& v) { c.env.name = trim(v); },
                     [](const C& c) { return c.env.name; }};
    f["env.layout"] = {[](C& c, const std::string& v) { c.env.layout = trim(v); },
                       [](const C& c) { return c.env.layout; }};
    f["env.reward_mode"] = {[](C& c, const std::string& v) { c.env.reward_mode = parse_reward_mode(trim(v)); },
                            [](const C& c) { return to_string(c.env.reward_mode); }};
    f["env.num_envs"] = {[](C& c, const std::string& v) { c.env.num_envs = parse_uint("env.num_envs", v); },
                         [](const C& c) { return std::to_string(c.env.num_envs); }};
    f["env.max_steps"] = {[](C& c, const std::string& v) { c.env.max_steps = parse_uint("env.max_steps", v); },
                          [](const C& c) { return std::to_string(c.env.max_steps); }};
    f["ppo.policy"] = {[](C& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "flow") c.policy = PolicyFamily::kFlow;
                         else if (t == "gaussian") c.policy = PolicyFamily::kGaussian;
                         else throw ConfigError("invalid config: ppo.policy must be flow|gaussian, got '" + t + "'");
                       },
                       [](const C& c) { return std::string(c.policy == PolicyFamily::kFlow ? "flow" : "gaussian"); }};
    f["ppo.norm_mode"] = {[](C& c, const std::string& v) { c.norm.kind = parse_norm_kind(trim(v)); },
                          [](const C& c) { return to_string(c.norm.kind); }};
    f["ppo.l"] = {[](C& c, const std::string& v) { c.norm.l = parse_double("ppo.l", v); },
                  [](const C& c) { return fmt_double(c.norm.l); }};
    count("ppo.layers", &C::layers);
    dims("ppo.actor_hidden", &C::actor_hidden);
    dims("ppo.critic_hidden", &C::critic_hidden);
    f["ppo.activation"] = {[](C& c, const std::string& v) { c.activation = parse_activation(trim(v)); },
                           [](const C& c) { return to_string(c.activation); }};
    f["ppo.state_dependent_std"] = {
        [](C& c, const std::string& v) { c.state_dependent_std = parse_bool("ppo.state_dependent_std", v); },
        [](const C& c) { return std::string(c.state_dependent_std ? "true" : "false"); }};
    num("ppo.gamma", &C::gamma);
    num("ppo.lambda", &C::lambda);
    num("ppo.clip", &C::clip);
    count("ppo.epochs", &C::epochs);
    count("ppo.minibatches", &C::minibatches);
    num("ppo.value_coef", &C::value_coef);
    num("ppo.grad_clip", &C::grad_clip);
    num("ppo.entropy_coef", &C::entropy_coef);
    count("ppo.steps_per_env", &C::steps_per_env);
    num("ppo.lr", &C::lr);
    num("ppo.desired_kl", &C::desired_kl);
    f["ppo.lr_schedule"] = {[](C& c, const std::string& v) {
                              const auto t = trim(v);
                              if (t == "fixed") c.lr_schedule = LrSchedule::kFixed;
                              else if (t == "adaptive") c.lr_schedule = LrSchedule::kAdaptive;
                              else throw ConfigError("invalid config: ppo.lr_schedule must be fixed|adaptive, got '" + t + "'");
                            },
                            [](const C& c) { return std::string(c.lr_schedule == LrSchedule::kFixed ? "fixed" : "adaptive"); }};
    num("ppo.action_noise", &C::action_noise);
    num("ppo.temperature", &C::temperature);
    f["run.total_steps"] = {[](C& c, const std::string& v) { c.total_steps = parse_uint("run.total_steps", v); },
                            [](const C& c) { return std::to_string(c.total_steps); }};
    f["run.seed"] = {[](C& c, const std::string& v) { c.seed = parse_uint("run.seed", v); },
                     [](const C& c) { return std::to_string(c.seed); }};
    count("run.checkpoint_every", &C::checkpoint_every);
    f["run.probe"] = {[](C& c, const std::string& v) { c.probe = parse_bool("run.probe", v); },
                      [](const C& c) { return std::string(c.probe ? "true" : "false"); }};
    return f;
  }();
  return fields;
}

inline std::string yaml_scalar_text(const YAML::Node& node, const std::string& key) {
  if (node.IsScalar()) return node.as<std::string>();
  if (node.IsSequence()) {
    std::string s = "[";
    for (std::size_t i = 0; i < node.size(); ++i) {
      if (i) s += ",";
      s += node[i].as<std::string>();
    }
    return s + "]";
  }
  throw ConfigError("invalid config: " + key + " must be a scalar or a list");
}

}  // namespace config_detail

/// All dotted keys accepted by set_config_value, sorted.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : config_detail::schema()) out.push_back(k);
  return out;
}

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& s = config_detail::schema();
  auto it = s.find(key);
  if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, value);
}

inline std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  const auto& s = config_detail::schema();
  auto it = s.find(key);
  if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(cfg);
}

/// Applies `key=value`.
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Overlays a YAML document onto `cfg`.
inline void apply_yaml(TrainConfig& cfg, const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError("config root must be a mapping of sections");
  for (const auto& section : root) {
    const auto name = section.first.as<std::string>();
    if (!section.second.IsMap()) throw ConfigError("config section '" + name + "' must be a mapping");
    for (const auto& kv : section.second) {
      const auto key = name + "." + kv.first.as<std::string>();
      set_config_value(cfg, key, config_detail::yaml_scalar_text(kv.second, key));
    }
  }
}

inline TrainConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  TrainConfig cfg;
  apply_yaml(cfg, ss.str());
  return cfg;
}

/// Canonical YAML: sections env, ppo, run; keys sorted within each.
inline std::string snapshot(const TrainConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [key, field] : config_detail::schema()) {
    const auto dot = key.find('.');
    sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), field.get(cfg));
  }
  std::string out;
  for (const char* sec : {"env", "ppo", "run"}) {
    out += std::string(sec) + ":\n";
    for (const auto& [k, v] : sections[sec]) {
      const bool quote = v.empty();
      out += "  " + k + ": " + (quote ? "\"\"" : v) + "\n";
    }
  }
  return out;
}

inline TrainConfig parse_snapshot(const std::string& text) {
  TrainConfig cfg;
  apply_yaml(cfg, text);
  return cfg;
}

}  // namespace nfpo
