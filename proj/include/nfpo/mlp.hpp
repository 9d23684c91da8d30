#pragma once

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "nfpo/error.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/rng.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

enum class Activation { kElu, kTanh };

inline std::string to_string(Activation a) {
  return a == Activation::kElu ? "elu" : "tanh";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "elu") return Activation::kElu;
  if (s == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + s + "' (expected elu|tanh)");
}

/// Fully connected network: input -> hidden... -> output, identity output.
struct MlpSpec {
  std::size_t input = 1;
  std::vector<std::size_t> hidden;
  std::size_t output = 1;
  Activation activation = Activation::kElu;
  double hidden_gain = std::numbers::sqrt2;
  /// Orthogonal gain of the final layer; 0 zero-initializes it.
  double output_gain = 1.0;

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output);
    return w;
  }

  std::size_t layer_count() const { return hidden.size() + 1; }

  /// Sum over layers of in*out + out.
  std::size_t param_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) n += w[i] * w[i + 1] + w[i + 1];
    return n;
  }

  void validate() const {
    for (auto d : widths()) {
      if (d < 1) throw ConfigError("MLP dimensions must all be >= 1");
    }
  }
};

inline std::string mlp_weight_name(const std::string& prefix, std::size_t k) {
  return prefix + "." + std::to_string(k) + ".w";
}
inline std::string mlp_bias_name(const std::string& prefix, std::size_t k) {
  return prefix + "." + std::to_string(k) + ".b";
}

/// rows x cols matrix with orthonormal rows or columns (whichever is fewer),
/// scaled by gain.
inline std::vector<double> orthogonal_matrix(std::size_t rows, std::size_t cols,
                                             double gain, Stream& rng) {
  const auto big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = gain * (rows >= cols ? q(i, j) : q(j, i));
    }
  }
  return out;
}

/// Registers `prefix.{k}.w` ([in, out]) and `prefix.{k}.b` ([out]) for every
/// layer. Hidden layers are orthogonal with `hidden_gain`; the final layer
/// uses `output_gain` (zero when the gain is 0). Biases start at zero.
template <typename T>
void init_mlp(ParamStore<T>& store, const std::string& prefix,
              const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto w = spec.widths();
  for (std::size_t k = 0; k + 1 < w.size(); ++k) {
    const bool last = k + 2 == w.size();
    const double gain = last ? spec.output_gain : spec.hidden_gain;
    const auto name = mlp_weight_name(prefix, k);
    std::vector<T> weight(w[k] * w[k + 1], T(0));
    if (gain != 0.0) {
      Stream rng(seed, "init", {label_hash(name)});
      const auto m = orthogonal_matrix(w[k], w[k + 1], gain, rng);
      for (std::size_t i = 0; i < m.size(); ++i) weight[i] = static_cast<T>(m[i]);
    }
    store.add(name, Tensor<T>(Shape{w[k], w[k + 1]}, std::move(weight)));
    store.add(mlp_bias_name(prefix, k), Tensor<T>::zeros(Shape{w[k + 1]}));
  }
}

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, Activation a) {
  return a == Activation::kElu ? elu(x) : tanh(x);
}

template <typename T>
Tensor<T> mlp_forward(const ParamStore<T>& store, const std::string& prefix,
                      const MlpSpec& spec, const Tensor<T>& x) {
  if (x.rank() != 2 || x.cols() != spec.input) {
    throw ShapeError("MLP '" + prefix + "' expects input [B, " +
                     std::to_string(spec.input) + "], got " +
                     shape_str(x.shape()));
  }
  Tensor<T> h = x;
  const auto layers = spec.layer_count();
  for (std::size_t k = 0; k < layers; ++k) {
    h = add(matmul(h, store.get(mlp_weight_name(prefix, k))),
            store.get(mlp_bias_name(prefix, k)));
    if (k + 1 < layers) h = apply_activation(h, spec.activation);
  }
  return h;
}

}  // namespace nfpo
