#pragma once

// State-conditioned RealNVP policy.
//
// Layer j keeps the action coordinates d_j unchanged and applies an affine
// map to the complement c_j:
//
//   y[d_j] = a[d_j]
//   y[c_j] = a[c_j] * exp(g(s_j(a[d_j], obs))) + t_j(a[d_j], obs)
//
// where g is the scale normalization. The forward direction maps actions to
// the latent space of a standard-normal prior, so
//
//   log pi(a | obs) = log N(f(a); 0, I) + sum_j sum_{c_j} g(s_j).
//
// d_j alternates between even and odd action indices, starting with even.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfpo/error.hpp"
#include "nfpo/mlp.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

enum class NormKind { kNone, kClip, kTanh, kNoS };

/// Scale normalization g applied to the raw scale-network output.
struct NormMode {
  NormKind kind = NormKind::kTanh;
  double l = 0.5;

  /// Upper bound on |g(s)|; infinite for kNone, 0 for kNoS.
  double bound() const {
    switch (kind) {
      case NormKind::kNone:
        return INFINITY;
      case NormKind::kNoS:
        return 0.0;
      default:
        return l;
    }
  }

  void validate() const {
    if ((kind == NormKind::kClip || kind == NormKind::kTanh) && !(l > 0.0)) {
      throw ConfigError("norm bound l must be > 0 for clip/tanh, got " +
                        std::to_string(l));
    }
  }

  bool operator==(const NormMode&) const = default;
};

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::kNone:
      return "none";
    case NormKind::kClip:
      return "clip";
    case NormKind::kTanh:
      return "tanh";
    case NormKind::kNoS:
      return "no_s";
  }
  return "?";
}

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "none") return NormKind::kNone;
  if (s == "clip") return NormKind::kClip;
  if (s == "tanh") return NormKind::kTanh;
  if (s == "no_s") return NormKind::kNoS;
  throw ConfigError("unknown norm mode '" + s + "' (expected none|clip|tanh|no_s)");
}

template <typename T>
Tensor<T> normalize_scale(const Tensor<T>& s, const NormMode& mode) {
  const T l = static_cast<T>(mode.l);
  switch (mode.kind) {
    case NormKind::kNone:
      return s;
    case NormKind::kClip:
      return clip(s, -l, l);
    case NormKind::kTanh:
      return scale(tanh(s), l);
    case NormKind::kNoS:
      return Tensor<T>::zeros(s.shape());
  }
  return s;
}

/// g(s) and g'(s) for one scalar, matching normalize_scale and the clip
/// adjoint convention (pass-through on the closed interval).
inline double scale_value(double s, const NormMode& mode) {
  switch (mode.kind) {
    case NormKind::kNone:
      return s;
    case NormKind::kClip:
      return std::clamp(s, -mode.l, mode.l);
    case NormKind::kTanh:
      return mode.l * std::tanh(s);
    case NormKind::kNoS:
      return 0.0;
  }
  return s;
}

inline double scale_derivative(double s, const NormMode& mode) {
  switch (mode.kind) {
    case NormKind::kNone:
      return 1.0;
    case NormKind::kClip:
      return (s >= -mode.l && s <= mode.l) ? 1.0 : 0.0;
    case NormKind::kTanh: {
      const double th = std::tanh(s);
      return mode.l * (1.0 - th * th);
    }
    case NormKind::kNoS:
      return 0.0;
  }
  return 1.0;
}

/// Whether a raw scale output counts as saturated under `mode`.
inline bool is_saturated(double s, const NormMode& mode) {
  switch (mode.kind) {
    case NormKind::kTanh:
      return std::abs(std::tanh(s)) > 0.99;
    case NormKind::kClip:
      return std::abs(s) > mode.l;
    default:
      return false;
  }
}

struct FlowArch {
  std::size_t obs_dim = 1;
  std::size_t action_dim = 2;
  std::size_t layers = 4;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::kElu;
  NormMode norm;

  /// Kept index set d_j: even indices for even j, odd indices for odd j.
  std::vector<std::size_t> kept(std::size_t j) const {
    std::vector<std::size_t> out;
    for (std::size_t i = j % 2; i < action_dim; i += 2) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> transformed(std::size_t j) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 1 - j % 2; i < action_dim; i += 2) out.push_back(i);
    return out;
  }

  MlpSpec net_spec(std::size_t j) const {
    MlpSpec spec;
    spec.input = kept(j).size() + obs_dim;
    spec.hidden = hidden;
    spec.output = transformed(j).size();
    spec.activation = activation;
    spec.output_gain = 0.0;
    return spec;
  }

  bool has_scale_net() const { return norm.kind != NormKind::kNoS; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < layers; ++j) {
      n += net_spec(j).param_count() * (has_scale_net() ? 2 : 1);
    }
    return n;
  }

  /// Largest possible |sum of log-determinants| when g is bounded.
  double logdet_bound() const {
    double total = 0.0;
    for (std::size_t j = 0; j < layers; ++j) {
      total += norm.bound() * static_cast<double>(transformed(j).size());
    }
    return total;
  }

  void validate() const {
    if (action_dim < 2) throw ConfigError("flow action_dim must be >= 2");
    if (obs_dim < 1) throw ConfigError("flow obs_dim must be >= 1");
    if (layers < 1) throw ConfigError("flow needs at least one coupling layer");
    norm.validate();
    for (auto h : hidden) {
      if (h < 1) throw ConfigError("flow hidden widths must be >= 1");
    }
  }

  bool operator==(const FlowArch&) const = default;
};

inline void to_json(nlohmann::json& j, const FlowArch& a) {
  nlohmann::json masks = nlohmann::json::array();
  for (std::size_t l = 0; l < a.layers; ++l) masks.push_back(a.kept(l));
  j = {{"obs_dim", a.obs_dim},
       {"action_dim", a.action_dim},
       {"layers", a.layers},
       {"hidden", a.hidden},
       {"activation", to_string(a.activation)},
       {"norm_mode", to_string(a.norm.kind)},
       {"l", a.norm.l},
       {"kept_masks", masks}};
}

inline void from_json(const nlohmann::json& j, FlowArch& a) {
  a.obs_dim = j.at("obs_dim").get<std::size_t>();
  a.action_dim = j.at("action_dim").get<std::size_t>();
  a.layers = j.at("layers").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.norm.kind = parse_norm_kind(j.at("norm_mode").get<std::string>());
  a.norm.l = j.at("l").get<double>();
  if (j.contains("kept_masks")) {
    const auto masks = j.at("kept_masks");
    for (std::size_t l = 0; l < a.layers && l < masks.size(); ++l) {
      if (masks[l].get<std::vector<std::size_t>>() != a.kept(l)) {
        throw FormatError("checkpoint mask convention differs at layer " +
                          std::to_string(l));
      }
    }
  }
  a.validate();
}

/// Per-sample results of one coupling layer.
template <typename T>
struct CouplingResult {
  Tensor<T> out;      ///< [B, D]
  Tensor<T> logdet;   ///< [B], forward log|det| at the layer input
  Tensor<T> raw_scale;  ///< [B, |c_j|] pre-normalization s (zeros for no_s)
};

template <typename T>
class CouplingLayer {
 public:
  CouplingLayer(const FlowArch& arch, std::size_t index, std::string prefix = "actor")
      : index_(index),
        action_dim_(arch.action_dim),
        obs_dim_(arch.obs_dim),
        kept_(arch.kept(index)),
        transformed_(arch.transformed(index)),
        spec_(arch.net_spec(index)),
        norm_(arch.norm),
        s_name_(prefix + ".layer" + std::to_string(index) + ".s"),
        t_name_(prefix + ".layer" + std::to_string(index) + ".t") {}

  void init(ParamStore<T>& store, std::uint64_t seed) const {
    if (norm_.kind != NormKind::kNoS) init_mlp(store, s_name_, spec_, seed);
    init_mlp(store, t_name_, spec_, seed);
  }

  /// a -> y with the layer's log-determinant.
  CouplingResult<T> forward(const ParamStore<T>& store, const Tensor<T>& a,
                            const Tensor<T>& obs) const {
    check_inputs(a, obs);
    auto kept = select_cols(a, kept_);
    auto moved = select_cols(a, transformed_);
    auto [raw, g, t] = conditioners(store, kept, obs);
    auto y_moved = add(mul(moved, exp(g)), t);
    auto y = scatter_cols<T>({kept, y_moved}, {kept_, transformed_}, action_dim_);
    CouplingResult<T> res{y, sum_last(g), raw};
    check_finite_result(res, "forward");
    return res;
  }

  /// y -> a. The returned logdet is the forward log-determinant at the
  /// recovered a, which equals the one evaluated on y because the
  /// conditioning coordinates pass through unchanged.
  CouplingResult<T> inverse(const ParamStore<T>& store, const Tensor<T>& y,
                            const Tensor<T>& obs) const {
    check_inputs(y, obs);
    auto kept = select_cols(y, kept_);
    auto moved = select_cols(y, transformed_);
    auto [raw, g, t] = conditioners(store, kept, obs);
    auto a_moved = mul(sub(moved, t), exp(neg(g)));
    auto a = scatter_cols<T>({kept, a_moved}, {kept_, transformed_}, action_dim_);
    CouplingResult<T> res{a, sum_last(g), raw};
    check_finite_result(res, "inverse");
    return res;
  }

  std::size_t index() const { return index_; }
  const std::vector<std::size_t>& kept() const { return kept_; }
  const std::vector<std::size_t>& transformed() const { return transformed_; }
  const NormMode& norm() const { return norm_; }
  const MlpSpec& net_spec() const { return spec_; }
  const std::string& scale_prefix() const { return s_name_; }
  const std::string& shift_prefix() const { return t_name_; }

  /// Raw scale network output on conditioning input (kept coords, obs).
  Tensor<T> raw_scale(const ParamStore<T>& store, const Tensor<T>& kept,
                      const Tensor<T>& obs) const {
    return mlp_forward(store, s_name_, spec_, concat_last<T>({kept, obs}));
  }

 private:
  struct Conditioners {
    Tensor<T> raw, g, t;
  };

  Conditioners conditioners(const ParamStore<T>& store, const Tensor<T>& kept,
                            const Tensor<T>& obs) const {
    auto in = concat_last<T>({kept, obs});
    auto t = mlp_forward(store, t_name_, spec_, in);
    if (norm_.kind == NormKind::kNoS) {
      auto zeros = Tensor<T>::zeros(t.shape());
      return {zeros, zeros, t};
    }
    auto raw = mlp_forward(store, s_name_, spec_, in);
    return {raw, normalize_scale(raw, norm_), t};
  }

  void check_inputs(const Tensor<T>& a, const Tensor<T>& obs) const {
    if (a.rank() != 2 || a.cols() != action_dim_) {
      throw ShapeError("coupling layer " + std::to_string(index_) +
                       " expects actions [B, " + std::to_string(action_dim_) +
                       "], got " + shape_str(a.shape()));
    }
    if (obs.rank() != 2 || obs.cols() != obs_dim_ || obs.rows() != a.rows()) {
      throw ShapeError("coupling layer " + std::to_string(index_) +
                       " observation shape mismatch: " + shape_str(obs.shape()) +
                       " vs actions " + shape_str(a.shape()));
    }
  }

  void check_finite_result(const CouplingResult<T>& r, const char* dir) const {
    auto bad = [](std::span<const T> v) {
      return std::any_of(v.begin(), v.end(), [](T x) { return !std::isfinite(x); });
    };
    if (bad(r.out.data()) || bad(r.logdet.data())) {
      throw NonFiniteError("non-finite " + std::string(dir) +
                               " output in coupling layer " +
                               std::to_string(index_),
                           static_cast<int>(index_));
    }
  }

  std::size_t index_;
  std::size_t action_dim_;
  std::size_t obs_dim_;
  std::vector<std::size_t> kept_;
  std::vector<std::size_t> transformed_;
  MlpSpec spec_;
  NormMode norm_;
  std::string s_name_;
  std::string t_name_;
};

/// Standard-normal log density summed over the last axis: [B, D] -> [B].
template <typename T>
Tensor<T> std_normal_log_prob(const Tensor<T>& z) {
  const T c = static_cast<T>(-0.5 * std::log(2.0 * std::numbers::pi) *
                             static_cast<double>(z.cols()));
  return shift(scale(sum_last(square(z)), T(-0.5)), c);
}

template <typename T>
struct FlowEval {
  Tensor<T> log_prob;  ///< [B]
  Tensor<T> logdet;    ///< [B] summed over layers
  Tensor<T> latent;    ///< [B, D]
  std::vector<Tensor<T>> layer_logdet;
  std::vector<Tensor<T>> raw_scale;
};

template <typename T>
struct FlowSample {
  Tensor<T> action;    ///< [B, D]
  Tensor<T> log_prob;  ///< [B], density at temperature 1
  Tensor<T> logdet;    ///< [B]
};

struct SaturationStats {
  std::vector<double> layer_fraction;
  std::vector<double> layer_mean_abs_logdet;
  std::vector<double> layer_max_abs_logdet;
  double fraction = 0.0;
  double mean_abs_logdet = 0.0;
  double max_abs_logdet = 0.0;
};

template <typename T>
class FlowPolicy {
 public:
  explicit FlowPolicy(FlowArch arch, std::string prefix = "actor")
      : arch_(std::move(arch)), prefix_(std::move(prefix)) {
    arch_.validate();
    for (std::size_t j = 0; j < arch_.layers; ++j) layers_.emplace_back(arch_, j, prefix_);
  }

  void init(ParamStore<T>& store, std::uint64_t seed) const {
    for (const auto& layer : layers_) layer.init(store, seed);
  }

  const FlowArch& arch() const { return arch_; }
  const std::vector<CouplingLayer<T>>& layers() const { return layers_; }

  /// Exact log pi(a | obs) through the forward chain.
  FlowEval<T> evaluate(const ParamStore<T>& store, const Tensor<T>& action,
                       const Tensor<T>& obs) const {
    FlowEval<T> ev;
    Tensor<T> x = action;
    Tensor<T> total;
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      auto r = layers_[j].forward(store, x, obs);
      x = r.out;
      total = j == 0 ? r.logdet : add(total, r.logdet);
      ev.layer_logdet.push_back(r.logdet);
      ev.raw_scale.push_back(r.raw_scale);
    }
    ev.latent = x;
    ev.logdet = total;
    ev.log_prob = add(std_normal_log_prob(x), total);
    check_bound(total);
    return ev;
  }

  Tensor<T> log_prob(const ParamStore<T>& store, const Tensor<T>& action,
                     const Tensor<T>& obs) const {
    return evaluate(store, action, obs).log_prob;
  }

  /// z -> a through the inverse chain, with the summed forward
  /// log-determinant at the produced action. Differentiable when grad
  /// recording is on.
  std::pair<Tensor<T>, Tensor<T>> inverse(const ParamStore<T>& store,
                                          const Tensor<T>& latent,
                                          const Tensor<T>& obs) const {
    Tensor<T> x = latent;
    Tensor<T> total;
    for (std::size_t j = layers_.size(); j-- > 0;) {
      auto r = layers_[j].inverse(store, x, obs);
      x = r.out;
      total = j + 1 == layers_.size() ? r.logdet : add(total, r.logdet);
    }
    check_bound(total);
    return {x, total};
  }

  /// a = f^{-1}(z), z ~ N(0, temperature * I). The returned log-prob is the
  /// temperature-1 density of a, evaluated through the forward chain.
  FlowSample<T> sample(const ParamStore<T>& store, const Tensor<T>& obs,
                       double temperature, Stream& rng) const {
    if (temperature < 0.0) throw Error("temperature must be >= 0");
    NoGradGuard no_grad;
    const auto batch = obs.rows();
    std::vector<T> z(batch * arch_.action_dim);
    const double sd = std::sqrt(temperature);
    for (auto& v : z) v = static_cast<T>(sd * rng.normal());
    auto [a, _] = inverse(store, Tensor<T>(Shape{batch, arch_.action_dim}, std::move(z)), obs);
    auto ev = evaluate(store, a, obs);
    return {a, ev.log_prob, ev.logdet};
  }

  /// Deterministic action from the prior mode z = 0.
  Tensor<T> mode(const ParamStore<T>& store, const Tensor<T>& obs) const {
    NoGradGuard no_grad;
    return inverse(store, Tensor<T>::zeros(Shape{obs.rows(), arch_.action_dim}), obs).first;
  }

  /// Reparameterized Monte-Carlo entropy: -mean log pi(f^{-1}(z)) over n
  /// latent draws, with observation rows reused cyclically.
  Tensor<T> entropy(const ParamStore<T>& store, const Tensor<T>& obs,
                    std::size_t n, Stream& rng) const {
    if (n < 1) throw Error("flow entropy needs n >= 1 samples");
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i % obs.rows();
    auto obs_n = take_rows(obs, rows);
    std::vector<T> z(n * arch_.action_dim);
    for (auto& v : z) v = static_cast<T>(rng.normal());
    Tensor<T> latent(Shape{n, arch_.action_dim}, std::move(z));
    auto [a, logdet] = inverse(store, latent, obs_n);
    // log pi(a) = log q(z) + logdet(a); z is a constant of the parameters.
    return neg(mean(add(std_normal_log_prob(latent), logdet)));
  }

  SaturationStats saturation(const ParamStore<T>& store, const Tensor<T>& action,
                             const Tensor<T>& obs) const {
    NoGradGuard no_grad;
    return saturation_of(evaluate(store, action, obs));
  }

  SaturationStats saturation_of(const FlowEval<T>& ev) const {
    SaturationStats st;
    std::size_t sat = 0, count = 0;
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      std::size_t layer_sat = 0;
      const auto raw = ev.raw_scale[j].data();
      for (auto s : raw) layer_sat += is_saturated(s, arch_.norm) ? 1 : 0;
      st.layer_fraction.push_back(
          arch_.has_scale_net() ? static_cast<double>(layer_sat) / raw.size() : 0.0);
      if (arch_.has_scale_net()) {
        sat += layer_sat;
        count += raw.size();
      }
      double m = 0.0, mx = 0.0;
      for (auto v : ev.layer_logdet[j].data()) {
        m += std::abs(v);
        mx = std::max(mx, std::abs(static_cast<double>(v)));
      }
      st.layer_mean_abs_logdet.push_back(m / ev.layer_logdet[j].numel());
      st.layer_max_abs_logdet.push_back(mx);
    }
    st.fraction = count ? static_cast<double>(sat) / count : 0.0;
    double m = 0.0;
    for (auto v : ev.logdet.data()) {
      m += std::abs(v);
      st.max_abs_logdet = std::max(st.max_abs_logdet, std::abs(static_cast<double>(v)));
    }
    st.mean_abs_logdet = m / ev.logdet.numel();
    return st;
  }

  /// Count of samples whose total |logdet| exceeded the bounded-scale limit.
  std::size_t bound_violations() const { return violations_; }
  void reset_bound_violations() { violations_ = 0; }

 private:
  void check_bound(const Tensor<T>& total) const {
    if (arch_.norm.kind != NormKind::kTanh && arch_.norm.kind != NormKind::kClip) return;
    const double limit = arch_.logdet_bound();
    const double slack = 1e-6 * std::max(1.0, limit);
    for (auto v : total.data()) {
      if (std::abs(static_cast<double>(v)) > limit + slack) ++violations_;
    }
  }

  FlowArch arch_;
  std::string prefix_;
  std::vector<CouplingLayer<T>> layers_;
  mutable std::size_t violations_ = 0;
};

}  // namespace nfpo
