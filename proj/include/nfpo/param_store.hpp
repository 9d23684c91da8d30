#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "nfpo/error.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

/// Named parameters, iterated in lexicographic order of their dotted names.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (params_.count(name)) throw Error("duplicate parameter '" + name + "'");
    value.set_requires_grad(true);
    return params_.emplace(name, std::move(value)).first->second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  /// Deep copy; the copy shares no storage with this store.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : params_) out.add(name, t.detach());
    return out;
  }

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

/// Global L2 norm of all parameter gradients.
template <typename T>
double grad_norm(const ParamStore<T>& store) {
  double sq = 0.0;
  for (const auto& [_, t] : store) {
    for (auto g : t.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double norm = grad_norm(store);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& [_, t] : store) {
      for (auto& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace nfpo
