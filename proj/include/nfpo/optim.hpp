#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nfpo/param_store.hpp"

namespace nfpo {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm bound applied before each step; <= 0 disables.
  double max_grad_norm = 1.0;
};

/// Adaptive-moment optimizer with global gradient-norm clipping.
///
/// A step whose gradients contain NaN/Inf is skipped (parameters and moments
/// untouched) and counted in `skipped_steps()`.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Returns false when the step was skipped.
  bool step(ParamStore<T>& params, double lr) {
    const double norm = grad_norm(params);
    last_grad_norm_ = norm;
    if (!std::isfinite(norm)) {
      ++skipped_;
      return false;
    }
    clip_grad_norm(params, options_.max_grad_norm);
    ++steps_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (auto& [name, p] : params) {
      auto& m = first_[name];
      auto& v = second_[name];
      if (m.size() != p.numel()) {
        m.assign(p.numel(), T(0));
        v.assign(p.numel(), T(0));
      }
      auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = options_.beta1 * m[i] + (1.0 - options_.beta1) * gi;
        const double vi = options_.beta2 * v[i] + (1.0 - options_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + options_.eps));
      }
    }
    return true;
  }

  std::int64_t steps() const { return steps_; }
  std::int64_t skipped_steps() const { return skipped_; }
  double last_grad_norm() const { return last_grad_norm_; }
  const AdamOptions& options() const { return options_; }

  // Moment accumulators keyed like the parameter store, for checkpointing.
  const std::map<std::string, std::vector<T>>& first_moments() const { return first_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return second_; }

  void restore(std::map<std::string, std::vector<T>> first,
               std::map<std::string, std::vector<T>> second, std::int64_t steps,
               std::int64_t skipped) {
    first_ = std::move(first);
    second_ = std::move(second);
    steps_ = steps;
    skipped_ = skipped;
  }

 private:
  AdamOptions options_;
  std::map<std::string, std::vector<T>> first_;
  std::map<std::string, std::vector<T>> second_;
  std::int64_t steps_ = 0;
  std::int64_t skipped_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace nfpo
