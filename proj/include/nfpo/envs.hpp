#pragma once

// Vectorized desk-scale environments.
//
// Both environments step a batch of N independent 2-D point agents. Every
// env auto-resets inside step(): the observation returned alongside
// done/truncated is already the first observation of the next episode, and
// the pre-reset observation is reported separately for value bootstrapping.
// Spawns come from a keyed stream per (seed, env index, episode index).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfpo/error.hpp"
#include "nfpo/rng.hpp"

namespace nfpo {

// ---------------------------------------------------------------------------
// Grid layouts

/// Unit-cell grid map. Cell (col, row) covers [col, col+1] x [row, row+1];
/// rows are listed top to bottom, so y grows downward.
class Layout {
 public:
  enum class Cell : char { kFree = '.', kWall = '#', kSpawn = 'S', kGoal = 'G' };

  /// Strict parse of `#`, `.`, `S`, `G` rows. Blank lines and trailing
  /// whitespace are ignored; anything else is rejected with its row/column.
  static Layout parse(const std::string& text) {
    Layout out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> rows;
    while (std::getline(in, line)) {
      ++line_no;
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
        line.pop_back();
      }
      if (line.empty()) continue;
      for (std::size_t c = 0; c < line.size(); ++c) {
        const char ch = line[c];
        if (ch != '#' && ch != '.' && ch != 'S' && ch != 'G') {
          throw FormatError("layout: unexpected character '" + std::string(1, ch) +
                            "' at row " + std::to_string(rows.size() + 1) +
                            ", column " + std::to_string(c + 1));
        }
      }
      if (!rows.empty() && line.size() != rows.front().size()) {
        throw FormatError("layout: row " + std::to_string(rows.size() + 1) +
                          " has " + std::to_string(line.size()) +
                          " columns, expected " + std::to_string(rows.front().size()));
      }
      rows.push_back(line);
    }
    if (rows.empty()) throw FormatError("layout: empty map");
    out.width_ = rows.front().size();
    out.height_ = rows.size();
    for (const auto& r : rows) {
      for (char ch : r) out.cells_.push_back(static_cast<Cell>(ch));
    }
    out.index();
    if (out.spawn_cells_.empty()) throw FormatError("layout: no spawn cell 'S'");
    if (out.goal_count_ == 0) throw FormatError("layout: no goal cell 'G'");
    return out;
  }

  static Layout load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("layout: cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  std::string to_text() const {
    std::string s;
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) s += static_cast<char>(cell(c, r));
      s += '\n';
    }
    return s;
  }

  /// Left-right mirror image.
  Layout mirrored() const {
    std::string s;
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = width_; c-- > 0;) s += static_cast<char>(cell(c, r));
      s += '\n';
    }
    return parse(s);
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  Cell cell(std::size_t col, std::size_t row) const { return cells_[row * width_ + col]; }

  /// Outside the map counts as wall.
  bool is_wall(long col, long row) const {
    if (col < 0 || row < 0 || col >= static_cast<long>(width_) || row >= static_cast<long>(height_)) {
      return true;
    }
    return cell(col, row) == Cell::kWall;
  }

  bool is_wall_at(double x, double y) const {
    return is_wall(static_cast<long>(std::floor(x)), static_cast<long>(std::floor(y)));
  }

  /// Goal region id at a point, or -1.
  int goal_at(double x, double y) const {
    const long c = static_cast<long>(std::floor(x)), r = static_cast<long>(std::floor(y));
    if (is_wall(c, r)) return -1;
    return goal_id_[r * width_ + c];
  }

  /// Number of 4-connected goal regions; ids follow row-major first cells.
  std::size_t goal_count() const { return goal_count_; }
  const std::vector<std::array<std::size_t, 2>>& spawn_cells() const { return spawn_cells_; }

  /// Centre of a goal region's cells.
  std::array<double, 2> goal_center(int id) const {
    double sx = 0, sy = 0;
    int n = 0;
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) {
        if (goal_id_[r * width_ + c] == id) {
          sx += c + 0.5;
          sy += r + 0.5;
          ++n;
        }
      }
    }
    return {sx / n, sy / n};
  }

  std::array<double, 2> spawn_center() const {
    double sx = 0, sy = 0;
    for (auto [c, r] : spawn_cells_) {
      sx += c + 0.5;
      sy += r + 0.5;
    }
    return {sx / spawn_cells_.size(), sy / spawn_cells_.size()};
  }

  bool operator==(const Layout& o) const {
    return width_ == o.width_ && height_ == o.height_ && cells_ == o.cells_;
  }

 private:
  void index() {
    goal_id_.assign(cells_.size(), -1);
    spawn_cells_.clear();
    goal_count_ = 0;
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) {
        if (cell(c, r) == Cell::kSpawn) spawn_cells_.push_back({c, r});
        if (cell(c, r) != Cell::kGoal || goal_id_[r * width_ + c] >= 0) continue;
        const int id = static_cast<int>(goal_count_++);
        std::vector<std::array<std::size_t, 2>> stack{{c, r}};
        goal_id_[r * width_ + c] = id;
        while (!stack.empty()) {
          auto [cc, rr] = stack.back();
          stack.pop_back();
          const long nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
          for (auto& d : nb) {
            const long nc = static_cast<long>(cc) + d[0], nr = static_cast<long>(rr) + d[1];
            if (nc < 0 || nr < 0 || nc >= static_cast<long>(width_) || nr >= static_cast<long>(height_)) continue;
            const auto k = static_cast<std::size_t>(nr) * width_ + static_cast<std::size_t>(nc);
            if (cells_[k] == Cell::kGoal && goal_id_[k] < 0) {
              goal_id_[k] = id;
              stack.push_back({static_cast<std::size_t>(nc), static_cast<std::size_t>(nr)});
            }
          }
        }
      }
    }
  }

  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<Cell> cells_;
  std::vector<int> goal_id_;
  std::vector<std::array<std::size_t, 2>> spawn_cells_;
  std::size_t goal_count_ = 0;
};

/// 7x7 map with a central spawn cell between two mirror-image goals. Wall
/// stubs above and below the spawn make the corridor through the centre the
/// only short route, so a policy must commit to left or right.
inline Layout two_goal_layout() {
  return Layout::parse(
      "#######\n"
      "#.....#\n"
      "#..#..#\n"
      "#G.S.G#\n"
      "#..#..#\n"
      "#.....#\n"
      "#######\n");
}

/// Single-goal 7x7 map.
inline Layout single_goal_layout() {
  return Layout::parse(
      "#######\n"
      "#....G#\n"
      "#.....#\n"
      "#..S..#\n"
      "#.....#\n"
      "#.....#\n"
      "#######\n");
}

// ---------------------------------------------------------------------------
// Batch interface

struct StepResult {
  std::vector<double> obs;           ///< [N, obs_dim], after auto-reset
  std::vector<double> terminal_obs;  ///< [N, obs_dim], before reset
  std::vector<double> reward;        ///< [N]
  std::vector<std::uint8_t> done;       ///< terminal
  std::vector<std::uint8_t> truncated;  ///< time limit, never set with done
  /// At episode end: goal id reached (>= 0) or -1. Otherwise -1.
  std::vector<int> outcome;
};

class VecEnv {
 public:
  virtual ~VecEnv() = default;

  virtual std::size_t num_envs() const = 0;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t action_dim() const { return 2; }
  virtual std::size_t max_steps() const = 0;
  /// Distinct success outcomes (goal regions).
  virtual std::size_t goal_count() const = 0;

  /// Resets every env to episode 0 of the given seed.
  virtual std::vector<double> reset(std::uint64_t seed) = 0;
  virtual StepResult step(std::span<const double> actions) = 0;
  virtual std::vector<double> observe() const = 0;

  /// Agent positions [N, 2] in world coordinates.
  virtual std::vector<double> positions() const = 0;

  /// Every subsequent reset starts from this state instead of a random
  /// spawn. Layout: gridworld (x, y); point-reach (x, y, target_x, target_y).
  virtual void set_fixed_start(std::optional<std::vector<double>> state) = 0;

  virtual nlohmann::json save_state() const = 0;
  virtual void load_state(const nlohmann::json& j) = 0;
};

namespace detail {

struct AgentSlot {
  double x = 0, y = 0;
  double tx = 0, ty = 0;
  std::size_t steps = 0;
  std::uint64_t episode = 0;
  bool reached = false;
};

inline void to_json(nlohmann::json& j, const AgentSlot& s) {
  j = {{"x", s.x}, {"y", s.y}, {"tx", s.tx}, {"ty", s.ty},
       {"steps", s.steps}, {"episode", s.episode}, {"reached", s.reached}};
}
inline void from_json(const nlohmann::json& j, AgentSlot& s) {
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.tx = j.at("tx").get<double>();
  s.ty = j.at("ty").get<double>();
  s.steps = j.at("steps").get<std::size_t>();
  s.episode = j.at("episode").get<std::uint64_t>();
  s.reached = j.at("reached").get<bool>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gridworld

struct GridMove {
  double x, y;
  bool blocked;
};

/// Moves from (x, y) by (dx, dy), stopping at the first wall cell the
/// segment would enter. Cells are traversed in order along the segment; a
/// move through a cell corner is blocked if either side cell is a wall.
inline GridMove grid_move(const Layout& layout, double x, double y, double dx, double dy) {
  long cx = static_cast<long>(std::floor(x)), cy = static_cast<long>(std::floor(y));
  const double inf = std::numeric_limits<double>::infinity();
  const long step_x = dx > 0 ? 1 : (dx < 0 ? -1 : 0);
  const long step_y = dy > 0 ? 1 : (dy < 0 ? -1 : 0);
  double t_max_x = dx > 0 ? (cx + 1 - x) / dx : (dx < 0 ? (x - cx) / -dx : inf);
  double t_max_y = dy > 0 ? (cy + 1 - y) / dy : (dy < 0 ? (y - cy) / -dy : inf);
  // Moving in the negative direction, the point stays in the current cell
  // until it passes strictly beyond the boundary; floor() makes the
  // boundary itself part of the current cell.
  const double t_delta_x = dx != 0 ? 1.0 / std::abs(dx) : inf;
  const double t_delta_y = dy != 0 ? 1.0 / std::abs(dy) : inf;
  double t_hit = inf;
  while (true) {
    const double t = std::min(t_max_x, t_max_y);
    if (t > 1.0) break;
    if (t_max_x < t_max_y) {
      cx += step_x;
      t_max_x += t_delta_x;
    } else if (t_max_y < t_max_x) {
      cy += step_y;
      t_max_y += t_delta_y;
    } else {
      if (layout.is_wall(cx + step_x, cy) || layout.is_wall(cx, cy + step_y)) {
        t_hit = t;
        break;
      }
      cx += step_x;
      cy += step_y;
      t_max_x += t_delta_x;
      t_max_y += t_delta_y;
    }
    if (layout.is_wall(cx, cy)) {
      t_hit = t;
      break;
    }
  }
  if (t_hit == inf) {
    // Exact landing on a positive-side boundary of a wall: floor() would
    // place the endpoint inside it.
    const double ex = x + dx, ey = y + dy;
    if (!layout.is_wall_at(ex, ey)) return {ex, ey, false};
    t_hit = 1.0;
  }
  double t = t_hit;
  double px = x + t * dx, py = y + t * dy;
  for (int i = 0; i < 64 && layout.is_wall_at(px, py); ++i) {
    t = std::max(0.0, t - 1e-9 * (1 << std::min(i, 30)));
    px = x + t * dx;
    py = y + t * dy;
  }
  if (layout.is_wall_at(px, py)) return {x, y, true};
  return {px, py, true};
}

struct GridWorldOptions {
  double action_scale = 0.3;
  std::size_t max_steps = 60;
};

class GridWorld final : public VecEnv {
 public:
  GridWorld(Layout layout, std::size_t num_envs, GridWorldOptions options = {})
      : layout_(std::move(layout)), options_(options), slots_(num_envs) {
    if (num_envs == 0) throw ConfigError("env count must be >= 1");
  }

  std::size_t num_envs() const override { return slots_.size(); }
  std::size_t obs_dim() const override { return 2; }
  std::size_t max_steps() const override { return options_.max_steps; }
  std::size_t goal_count() const override { return layout_.goal_count(); }
  const Layout& layout() const { return layout_; }
  const GridWorldOptions& options() const { return options_; }

  std::vector<double> reset(std::uint64_t seed) override {
    seed_ = seed;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i] = {};
      spawn(i);
    }
    return observe();
  }

  StepResult step(std::span<const double> actions) override {
    const auto n = slots_.size();
    if (actions.size() != n * 2) {
      throw ShapeError("gridworld step expects " + std::to_string(n * 2) +
                       " action values, got " + std::to_string(actions.size()));
    }
    StepResult res;
    res.reward.assign(n, 0.0);
    res.done.assign(n, 0);
    res.truncated.assign(n, 0);
    res.outcome.assign(n, -1);
    res.terminal_obs.resize(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = slots_[i];
      const double dx = options_.action_scale * std::clamp(actions[2 * i], -1.0, 1.0);
      const double dy = options_.action_scale * std::clamp(actions[2 * i + 1], -1.0, 1.0);
      const auto mv = grid_move(layout_, s.x, s.y, dx, dy);
      s.x = mv.x;
      s.y = mv.y;
      ++s.steps;
      const int goal = layout_.goal_at(s.x, s.y);
      if (goal >= 0) {
        res.reward[i] = 1.0;
        res.done[i] = 1;
        res.outcome[i] = goal;
      } else if (s.steps >= options_.max_steps) {
        res.truncated[i] = 1;
      }
      obs_of(i, &res.terminal_obs[2 * i]);
      if (res.done[i] || res.truncated[i]) {
        ++s.episode;
        s.steps = 0;
        spawn(i);
      }
    }
    res.obs = observe();
    return res;
  }

  std::vector<double> observe() const override {
    std::vector<double> out(slots_.size() * 2);
    for (std::size_t i = 0; i < slots_.size(); ++i) obs_of(i, &out[2 * i]);
    return out;
  }

  std::vector<double> positions() const override {
    std::vector<double> out;
    for (const auto& s : slots_) {
      out.push_back(s.x);
      out.push_back(s.y);
    }
    return out;
  }

  void set_fixed_start(std::optional<std::vector<double>> state) override {
    if (state && state->size() != 2) throw ConfigError("gridworld fixed start needs (x, y)");
    if (state && layout_.is_wall_at((*state)[0], (*state)[1])) {
      throw ConfigError("gridworld fixed start lies inside a wall");
    }
    fixed_ = std::move(state);
  }

  nlohmann::json save_state() const override {
    return {{"seed", seed_}, {"slots", slots_}};
  }
  void load_state(const nlohmann::json& j) override {
    seed_ = j.at("seed").get<std::uint64_t>();
    auto slots = j.at("slots").get<std::vector<detail::AgentSlot>>();
    if (slots.size() != slots_.size()) throw FormatError("env state has wrong env count");
    slots_ = std::move(slots);
  }

 private:
  void spawn(std::size_t i) {
    auto& s = slots_[i];
    if (fixed_) {
      s.x = (*fixed_)[0];
      s.y = (*fixed_)[1];
      return;
    }
    Stream rng(seed_, "env", {i, s.episode});
    const auto& cells = layout_.spawn_cells();
    const auto [c, r] = cells[rng.below(cells.size())];
    s.x = c + rng.uniform();
    s.y = r + rng.uniform();
  }

  void obs_of(std::size_t i, double* out) const {
    out[0] = 2.0 * slots_[i].x / layout_.width() - 1.0;
    out[1] = 2.0 * slots_[i].y / layout_.height() - 1.0;
  }

  Layout layout_;
  GridWorldOptions options_;
  std::vector<detail::AgentSlot> slots_;
  std::uint64_t seed_ = 0;
  std::optional<std::vector<double>> fixed_;
};

// ---------------------------------------------------------------------------
// Point reach

enum class RewardMode { kSparse, kDense };

inline std::string to_string(RewardMode m) { return m == RewardMode::kSparse ? "sparse" : "dense"; }
inline RewardMode parse_reward_mode(const std::string& s) {
  if (s == "sparse") return RewardMode::kSparse;
  if (s == "dense") return RewardMode::kDense;
  throw ConfigError("unknown reward mode '" + s + "' (expected sparse|dense)");
}

struct PointReachOptions {
  RewardMode reward = RewardMode::kDense;
  double action_scale = 0.1;
  double reach_radius = 0.1;
  std::size_t max_steps = 100;
};

/// Point mass in [-1, 1]^2 reaching a target resampled every episode.
/// Observation (x, y, target_x, target_y). An episode counts as a success
/// once the point comes within reach_radius of the target; in sparse mode
/// that also ends the episode with reward 1.
class PointReach final : public VecEnv {
 public:
  PointReach(std::size_t num_envs, PointReachOptions options = {})
      : options_(options), slots_(num_envs) {
    if (num_envs == 0) throw ConfigError("env count must be >= 1");
  }

  std::size_t num_envs() const override { return slots_.size(); }
  std::size_t obs_dim() const override { return 4; }
  std::size_t max_steps() const override { return options_.max_steps; }
  std::size_t goal_count() const override { return 1; }
  const PointReachOptions& options() const { return options_; }

  std::vector<double> reset(std::uint64_t seed) override {
    seed_ = seed;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i] = {};
      spawn(i);
    }
    return observe();
  }

  StepResult step(std::span<const double> actions) override {
    const auto n = slots_.size();
    if (actions.size() != n * 2) {
      throw ShapeError("point-reach step expects " + std::to_string(n * 2) +
                       " action values, got " + std::to_string(actions.size()));
    }
    StepResult res;
    res.reward.assign(n, 0.0);
    res.done.assign(n, 0);
    res.truncated.assign(n, 0);
    res.outcome.assign(n, -1);
    res.terminal_obs.resize(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = slots_[i];
      s.x = std::clamp(s.x + options_.action_scale * std::clamp(actions[2 * i], -1.0, 1.0), -1.0, 1.0);
      s.y = std::clamp(s.y + options_.action_scale * std::clamp(actions[2 * i + 1], -1.0, 1.0), -1.0, 1.0);
      ++s.steps;
      const double dist = std::hypot(s.x - s.tx, s.y - s.ty);
      const bool hit = dist <= options_.reach_radius;
      s.reached = s.reached || hit;
      if (options_.reward == RewardMode::kSparse) {
        if (hit) {
          res.reward[i] = 1.0;
          res.done[i] = 1;
        }
      } else {
        res.reward[i] = -dist;
      }
      if (!res.done[i] && s.steps >= options_.max_steps) res.truncated[i] = 1;
      obs_of(i, &res.terminal_obs[4 * i]);
      if (res.done[i] || res.truncated[i]) {
        res.outcome[i] = s.reached ? 0 : -1;
        ++s.episode;
        s.steps = 0;
        s.reached = false;
        spawn(i);
      }
    }
    res.obs = observe();
    return res;
  }

  std::vector<double> observe() const override {
    std::vector<double> out(slots_.size() * 4);
    for (std::size_t i = 0; i < slots_.size(); ++i) obs_of(i, &out[4 * i]);
    return out;
  }

  std::vector<double> positions() const override {
    std::vector<double> out;
    for (const auto& s : slots_) {
      out.push_back(s.x);
      out.push_back(s.y);
    }
    return out;
  }

  void set_fixed_start(std::optional<std::vector<double>> state) override {
    if (state && state->size() != 4) {
      throw ConfigError("point-reach fixed start needs (x, y, target_x, target_y)");
    }
    fixed_ = std::move(state);
  }

  nlohmann::json save_state() const override {
    return {{"seed", seed_}, {"slots", slots_}};
  }
  void load_state(const nlohmann::json& j) override {
    seed_ = j.at("seed").get<std::uint64_t>();
    auto slots = j.at("slots").get<std::vector<detail::AgentSlot>>();
    if (slots.size() != slots_.size()) throw FormatError("env state has wrong env count");
    slots_ = std::move(slots);
  }

 private:
  void spawn(std::size_t i) {
    auto& s = slots_[i];
    if (fixed_) {
      s.x = (*fixed_)[0];
      s.y = (*fixed_)[1];
      s.tx = (*fixed_)[2];
      s.ty = (*fixed_)[3];
    } else {
      Stream rng(seed_, "env", {i, s.episode});
      s.x = rng.uniform(-1.0, 1.0);
      s.y = rng.uniform(-1.0, 1.0);
      s.tx = rng.uniform(-1.0, 1.0);
      s.ty = rng.uniform(-1.0, 1.0);
    }
    s.reached = std::hypot(s.x - s.tx, s.y - s.ty) <= options_.reach_radius &&
                options_.reward == RewardMode::kDense;
  }

  void obs_of(std::size_t i, double* out) const {
    const auto& s = slots_[i];
    out[0] = s.x;
    out[1] = s.y;
    out[2] = s.tx;
    out[3] = s.ty;
  }

  PointReachOptions options_;
  std::vector<detail::AgentSlot> slots_;
  std::uint64_t seed_ = 0;
  std::optional<std::vector<double>> fixed_;
};

}  // namespace nfpo
