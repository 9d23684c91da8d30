// nfpo: train, evaluate, sweep, export and verify flow policies.

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "nfpo/oracles.hpp"
#include "nfpo/runner.hpp"

extern char** environ;

namespace {

using namespace nfpo;

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

TrainConfig build_config(const std::string& path, const std::vector<std::string>& sets,
                         std::optional<std::uint64_t> seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config_file(path);
  for (const auto& s : sets) apply_override(cfg, s);
  if (seed) cfg.seed = *seed;
  cfg.resolve();
  cfg.validate();
  return cfg;
}

std::string self_path(const char* argv0) {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? std::string(argv0) : p.string();
}

std::vector<double> parse_numbers(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int train_cmd(const TrainArgs& a) {
  auto cfg = build_config(a.config, a.sets, a.seed);
  const fs::path out = a.out.empty() ? fs::path("runs") / (cfg.env.name + "_seed" + std::to_string(cfg.seed))
                                     : fs::path(a.out);
  Trainer<float> trainer(cfg);
  const auto target = trainer.total_updates();
  TrainHooks hooks;
  hooks.on_update = [&](const MetricsRow& row) {
    if (row.update % 10 == 0 || row.update == target || row.instability_flag) {
      std::printf("update %llu/%llu steps %llu return %.4f kl %.5f lr %.2e max|logdet| %.3f%s\n",
                  static_cast<unsigned long long>(row.update), static_cast<unsigned long long>(target),
                  static_cast<unsigned long long>(row.env_steps), row.ep_return_mean, row.approx_kl,
                  row.lr, row.max_logdet, row.instability_flag ? " UNSTABLE" : "");
      std::fflush(stdout);
    }
    return true;
  };
  auto r = trainer.run(out, hooks);
  nlohmann::json summary{{"updates", r.updates},
                         {"unstable", r.unstable},
                         {"instability_reason", r.instability_reason},
                         {"instability_update", r.instability_update},
                         {"max_abs_logdet", json_number(r.max_abs_logdet)},
                         {"bound_violations", r.bound_violations},
                         {"skipped_steps", r.skipped_steps},
                         {"final_return", r.rows.empty() ? nlohmann::json(nullptr)
                                                         : json_number(r.rows.back().ep_return_mean)},
                         {"last_checkpoint", r.last_checkpoint}};
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  std::printf("run written to %s%s\n", out.string().c_str(),
              r.unstable ? (" (stopped early: " + r.instability_reason + ")").c_str() : "");
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::size_t episodes = 100;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::string fixed_start;
  std::string out;
};

int eval_cmd(const EvalArgs& a) {
  auto trainer = Trainer<float>::from_checkpoint(a.checkpoint);
  EvalOptions opt;
  opt.episodes = a.episodes;
  opt.temperature = a.temperature;
  opt.seed = a.seed;
  if (!a.fixed_start.empty()) opt.fixed_start = parse_numbers(a.fixed_start);
  auto rep = evaluate(trainer.agent(), trainer.config().env, opt);
  auto summary = eval_summary_json(rep, opt);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_trajectories_csv(rep, fs::path(a.out) / "trajectories.csv");
    std::ofstream(fs::path(a.out) / "eval_summary.json") << summary.dump(2) << '\n';
  }
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string axis;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t parallel = 1;
};

struct Child {
  std::string value;
  std::uint64_t seed;
  fs::path dir;
  std::vector<std::string> argv;
  pid_t pid = -1;
  int status = -1;
};

pid_t spawn(const Child& c, const fs::path& log) {
  std::vector<char*> argv;
  for (const auto& s : c.argv) argv.push_back(const_cast<char*>(s.c_str()));
  argv.push_back(nullptr);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&fa, STDOUT_FILENO, STDERR_FILENO);
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, argv[0], &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  return rc == 0 ? pid : -1;
}

std::string dir_token(const std::string& v) {
  std::string s;
  for (char ch : v) s += std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' ? ch : '_';
  return s;
}

int sweep_cmd(SweepArgs a, const std::string& self) {
  std::erase_if(a.values, [](const std::string& v) { return v.empty(); });
  if (a.values.empty()) throw ConfigError("sweep needs a non-empty --values list");
  if (a.parallel < 1) throw ConfigError("--parallel must be >= 1");
  // Validate every point of the grid before launching anything.
  for (const auto& v : a.values) {
    auto sets = a.sets;
    sets.push_back(a.axis + "=" + v);
    build_config(a.config, sets, std::nullopt);
  }
  const fs::path root = a.out.empty() ? fs::path("runs") / ("sweep_" + dir_token(a.axis)) : fs::path(a.out);
  if (fs::exists(root) && !fs::is_empty(root)) {
    throw ConfigError("output directory '" + root.string() + "' already exists and is not empty");
  }
  fs::create_directories(root);
  const auto seeds = a.seeds.empty() ? std::vector<std::uint64_t>{1, 2, 3} : a.seeds;

  std::vector<Child> children;
  for (const auto& v : a.values) {
    for (auto seed : seeds) {
      Child c{v, seed, root / (dir_token(a.axis) + "=" + dir_token(v)) / ("seed_" + std::to_string(seed)), {}};
      c.argv = {self, "train", "--seed", std::to_string(seed), "--out", c.dir.string()};
      if (!a.config.empty()) {
        c.argv.push_back("--config");
        c.argv.push_back(a.config);
      }
      for (const auto& s : a.sets) {
        c.argv.push_back("--set");
        c.argv.push_back(s);
      }
      c.argv.push_back("--set");
      c.argv.push_back(a.axis + "=" + v);
      children.push_back(std::move(c));
    }
  }

  std::size_t next = 0, running = 0;
  auto reap = [&] {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    for (auto& c : children) {
      if (c.pid == pid) {
        c.status = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
        std::printf("[%s=%s seed %llu] %s\n", a.axis.c_str(), c.value.c_str(),
                    static_cast<unsigned long long>(c.seed), c.status == 0 ? "done" : "FAILED");
        std::fflush(stdout);
      }
    }
    --running;
  };
  while (next < children.size() || running > 0) {
    if (next < children.size() && running < a.parallel) {
      auto& c = children[next++];
      fs::create_directories(c.dir.parent_path());
      fs::create_directories(root / "logs");
      c.pid = spawn(c, root / "logs" / (dir_token(a.axis) + "=" + dir_token(c.value) + "_seed_" + std::to_string(c.seed) + ".log"));
      if (c.pid < 0) {
        c.status = 127;
        continue;
      }
      ++running;
    } else {
      reap();
    }
  }

  nlohmann::json rows = nlohmann::json::array();
  std::ofstream csv(root / "summary.csv");
  csv << "value,runs,failed,unstable,final_return_mean,final_return_ci95\n";
  std::size_t failures = 0;
  for (const auto& v : a.values) {
    std::vector<double> finals;
    std::size_t failed = 0, unstable = 0;
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& c : children) {
      if (c.value != v) continue;
      nlohmann::json run{{"seed", c.seed}, {"dir", c.dir.string()}, {"exit_status", c.status}};
      if (c.status != 0) {
        ++failed;
      } else {
        std::ifstream in(c.dir / "summary.json");
        auto s = nlohmann::json::parse(in);
        run["summary"] = s;
        unstable += s.at("unstable").get<bool>() ? 1 : 0;
        if (!s.at("final_return").is_null()) finals.push_back(s.at("final_return").get<double>());
      }
      runs.push_back(run);
    }
    failures += failed;
    double mean = NAN, ci = NAN;
    if (!finals.empty()) {
      mean = 0.0;
      for (auto x : finals) mean += x;
      mean /= finals.size();
      if (finals.size() > 1) {
        double var = 0.0;
        for (auto x : finals) var += (x - mean) * (x - mean);
        var /= finals.size() - 1;
        boost::math::students_t t(static_cast<double>(finals.size() - 1));
        ci = boost::math::quantile(boost::math::complement(t, 0.025)) * std::sqrt(var / finals.size());
      }
    }
    rows.push_back({{"value", v},
                    {"runs", runs},
                    {"failed", failed},
                    {"unstable", unstable},
                    {"final_return_mean", json_number(mean)},
                    {"final_return_ci95", json_number(ci)}});
    csv << v << ',' << runs.size() << ',' << failed << ',' << unstable << ',' << mean << ',' << ci << '\n';
    std::printf("%s=%s: final return %.4f +- %.4f (%zu runs, %zu failed, %zu unstable)\n", a.axis.c_str(),
                v.c_str(), mean, ci, runs.size(), failed, unstable);
  }
  std::ofstream(root / "summary.json") << nlohmann::json{{"axis", a.axis}, {"seeds", seeds}, {"values", rows}}.dump(2)
                                       << '\n';
  return failures ? kFailed : kOk;
}

// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string out;
  std::size_t grid = 41;
};

int export_cmd(const ExportArgs& a) {
  auto c = load_checkpoint(a.checkpoint);
  auto trainer = Trainer<float>::from_checkpoint(c);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).replace_extension("") : fs::path(a.out);
  fs::create_directories(out);

  nlohmann::json params;
  for (const auto& [name, e] : c.entries) {
    if (name.rfind("optim.", 0) == 0) continue;
    params[name] = {{"shape", e.shape}, {"data", e.data}};
  }
  nlohmann::json doc{{"policy", c.meta.at("policy")},
                     {"arch", c.meta.at("arch")},
                     {"update", c.meta.at("update")},
                     {"params", params}};
  std::ofstream(out / "params.json") << doc.dump() << '\n';

  // Mode action over a grid of start positions; point-reach uses a target at the origin.
  const auto& env_cfg = trainer.config().env;
  auto probe_env = make_env(env_cfg, 1);
  const auto od = probe_env->obs_dim();
  double lo_x = -1, hi_x = 1, lo_y = -1, hi_y = 1;
  if (const auto* g = dynamic_cast<const GridWorld*>(probe_env.get())) {
    lo_x = lo_y = 0.0;
    hi_x = static_cast<double>(g->layout().width());
    hi_y = static_cast<double>(g->layout().height());
  }
  std::ofstream csv(out / "action_field.csv");
  csv << "x,y,ax,ay\n";
  csv.precision(9);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < a.grid; ++i) {
    for (std::size_t j = 0; j < a.grid; ++j) {
      const double x = lo_x + (hi_x - lo_x) * (i + 0.5) / a.grid;
      const double y = lo_y + (hi_y - lo_y) * (j + 0.5) / a.grid;
      std::vector<double> start{x, y};
      if (od == 4) start.insert(start.end(), {0.0, 0.0});
      try {
        probe_env->set_fixed_start(start);
      } catch (const ConfigError&) {
        continue;  // inside a wall
      }
      auto obs = probe_env->reset(0);
      auto act = trainer.agent().policy.mode(trainer.agent().params, rows_tensor<float>(obs, 1, od));
      csv << x << ',' << y << ',' << act.at(0, 0) << ',' << act.at(0, 1) << '\n';
    }
  }
  std::printf("exported %s and %s\n", (out / "params.json").string().c_str(),
              (out / "action_field.csv").string().c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

int verify_cmd(std::uint64_t seed) {
  oracle::SuiteOptions opt;
  opt.seed = seed;
  bool ok = true;
  for (const auto& r : oracle::run_suite(opt)) {
    std::printf("%-26s %-4s measured %.3e  tolerance %.1e\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.measured, r.tolerance);
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow policies trained with PPO"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a policy; writes metrics, probes and checkpoints");
  train->add_option("--config", ta.config, "YAML config file")->check(CLI::ExistingFile);
  train->add_option("--set", ta.sets, "Override key=value (repeatable)")->allow_extra_args(false);
  train->add_option("--seed", ta.seed, "Run seed (overrides run.seed)");
  train->add_option("--out", ta.out, "Output directory (must be empty or absent)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", ea.episodes, "Episodes (one per parallel env)")->capture_default_str();
  eval->add_option("--temperature", ea.temperature, "Sampling temperature; 0 uses the mode")->capture_default_str();
  eval->add_option("--seed", ea.seed, "Evaluation seed")->capture_default_str();
  eval->add_option("--fixed-start", ea.fixed_start, "Comma-separated start state for every episode");
  eval->add_option("--out", ea.out, "Directory for trajectories.csv and eval_summary.json");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Train one run per (value, seed)");
  sweep->add_option("--config", sa.config, "YAML config file")->check(CLI::ExistingFile);
  sweep->add_option("--set", sa.sets, "Override key=value applied to every run (repeatable)")->allow_extra_args(false);
  sweep->add_option("--axis", sa.axis, "Config key to sweep")->required();
  sweep->add_option("--values", sa.values, "Comma-separated values")->required()->delimiter(',')->allow_extra_args(false);
  sweep->add_option("--seeds", sa.seeds, "Comma-separated seeds (default 1,2,3)")->delimiter(',');
  sweep->add_option("--parallel", sa.parallel, "Concurrent child processes")->capture_default_str();
  sweep->add_option("--out", sa.out, "Sweep root directory");

  ExportArgs xa;
  auto* exp = app.add_subcommand("export", "Export parameters and an action field from a checkpoint");
  exp->add_option("--checkpoint", xa.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", xa.out, "Output directory");
  exp->add_option("--grid", xa.grid, "Grid points per axis")->capture_default_str();

  std::uint64_t verify_seed = 7;
  auto* verify = app.add_subcommand("verify", "Run the numerical oracle suite");
  verify->add_option("--seed", verify_seed, "Oracle seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return train_cmd(ta);
    if (*eval) return eval_cmd(ea);
    if (*sweep) {
      if (config_keys().end() == std::find(config_keys().begin(), config_keys().end(), sa.axis)) {
        throw ConfigError("unknown config key '" + sa.axis + "'");
      }
      return sweep_cmd(sa, self_path(argv[0]));
    }
    if (*exp) return export_cmd(xa);
    if (*verify) return verify_cmd(verify_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailed;
  }
  return kOk;
}
