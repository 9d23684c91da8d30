#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "nfpo/flow.hpp"
#include "nfpo/optim.hpp"
#include "nfpo/oracles.hpp"

using namespace nfpo;
using Td = Tensor<double>;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

FlowArch arch_of(std::size_t d, NormKind kind, std::size_t obs = 3) {
  return oracle::oracle_arch(d, kind, obs);
}

double std_normal_logpdf(std::span<const double> a) {
  double s = 0.0;
  for (auto v : a) s += v * v;
  return -0.5 * s - 0.5 * kLog2Pi * a.size();
}

/// MLE fit of a 2-D flow to a two-blob mixture; returns the trained store.
ParamStore<double> fit_two_blobs(const FlowPolicy<double>& flow, std::size_t steps) {
  ParamStore<double> store;
  flow.init(store, 5);
  Adam<double> opt;
  Stream rng(5, "blobs", {});
  const std::size_t batch = 128;
  for (std::size_t k = 0; k < steps; ++k) {
    std::vector<double> a(batch * 2), o(batch, 0.3);
    for (std::size_t i = 0; i < batch; ++i) {
      const double cx = rng.uniform() < 0.5 ? -1.5 : 1.5;
      a[2 * i] = cx + 0.3 * rng.normal();
      a[2 * i + 1] = 0.5 * rng.normal();
    }
    store.zero_grad();
    backward(neg(mean(flow.log_prob(store, Td({batch, 2}, a), Td({batch, 1}, o)))));
    opt.step(store, 3e-3);
  }
  return store;
}

}  // namespace

TEST(NormalizeScale, AnalyticValues) {
  EXPECT_NEAR(scale_value(1.0, {NormKind::kTanh, 0.5}), 0.380797, 1e-6);
  EXPECT_EQ(scale_value(1.0, {NormKind::kClip, 0.5}), 0.5);
  EXPECT_EQ(scale_value(-3.0, {NormKind::kClip, 0.5}), -0.5);
  EXPECT_EQ(scale_value(123.0, {NormKind::kNoS, 0.5}), 0.0);
  EXPECT_EQ(scale_value(7.0, {NormKind::kNone, 0.5}), 7.0);
  EXPECT_DOUBLE_EQ(scale_derivative(0.0, {NormKind::kTanh, 0.5}), 0.5);
  EXPECT_EQ(scale_derivative(0.7, {NormKind::kClip, 0.5}), 0.0);
}

TEST(NormalizeScale, TensorMatchesScalar) {
  Td s({5}, {-2.0, -0.4, 0.0, 0.5, 3.0});
  for (auto kind : oracle::all_norm_kinds()) {
    NormMode m{kind, 0.5};
    auto g = normalize_scale(s, m);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g.at(i), scale_value(s.at(i), m));
  }
}

TEST(Arch, KeptIndicesAlternateParity) {
  auto a = arch_of(4, NormKind::kTanh);
  EXPECT_EQ(a.kept(0), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(a.transformed(0), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(a.kept(1), (std::vector<std::size_t>{1, 3}));
  EXPECT_DOUBLE_EQ(a.logdet_bound(), 0.5 * 2 * 4);
}

TEST(Arch, ValidationAndJsonRoundTrip) {
  auto a = arch_of(3, NormKind::kClip);
  FlowArch back = nlohmann::json(a).get<FlowArch>();
  EXPECT_EQ(back, a);
  auto bad = a;
  bad.action_dim = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = a;
  bad.norm.l = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Coupling, IdentityAtInit) {
  for (auto kind : oracle::all_norm_kinds()) {
    FlowPolicy<double> flow(arch_of(4, kind));
    ParamStore<double> store;
    flow.init(store, 1);
    Stream rng(1, "x", {});
    auto a = oracle::normal_tensor<double>({16, 4}, 2.0, rng);
    auto obs = oracle::normal_tensor<double>({16, 3}, 1.0, rng);
    for (const auto& layer : flow.layers()) {
      auto r = layer.forward(store, a, obs);
      EXPECT_EQ(r.out.values(), a.values());
      for (auto v : r.logdet.data()) EXPECT_EQ(v, 0.0);
      EXPECT_EQ(layer.inverse(store, a, obs).out.values(), a.values());
    }
  }
}

TEST(Coupling, TanhPerLayerBound) {
  FlowPolicy<double> flow(arch_of(4, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 2);
  Stream rng(2, "x", {});
  oracle::randomize(store, 2.0, rng);  // deep saturation
  auto a = oracle::normal_tensor<double>({500, 4}, 1.0, rng);
  auto obs = oracle::normal_tensor<double>({500, 3}, 1.0, rng);
  for (const auto& layer : flow.layers()) {
    auto r = layer.forward(store, a, obs);
    const double bound = 0.5 * layer.transformed().size();
    for (auto v : r.logdet.data()) EXPECT_LE(std::abs(v), bound + 1e-12);
    a = r.out;
  }
}

TEST(Coupling, ClosedFormLogdetMatchesNumericJacobian) {
  for (std::size_t d : {2u, 4u, 8u}) {
    for (auto kind : oracle::all_norm_kinds()) {
      auto r = oracle::check_jacobian(arch_of(d, kind), 100, 17);
      EXPECT_LE(r.max_error, 1e-5) << "D=" << d << " mode=" << to_string(kind);
    }
  }
}

TEST(Coupling, CorruptedLogdetIsCaught) {
  auto wrong = [](const FlowPolicy<double>& f, const ParamStore<double>& s, const Td& a, const Td& o) {
    NoGradGuard g;
    auto ev = f.evaluate(s, a, o);
    return ev.logdet.item() - ev.layer_logdet.front().item();
  };
  auto r = oracle::check_jacobian(arch_of(4, NormKind::kTanh), 20, 17, wrong);
  EXPECT_GT(r.max_error, 1e-3);
}

TEST(Coupling, RoundTrip) {
  for (auto kind : oracle::all_norm_kinds()) {
    EXPECT_LE(oracle::check_bijectivity<double>(arch_of(2, kind), 1000, 3), 1e-6) << to_string(kind);
    EXPECT_LE(oracle::check_bijectivity<float>(arch_of(2, kind), 1000, 3), 1e-4) << to_string(kind);
    EXPECT_LE(oracle::check_bijectivity<double>(arch_of(5, kind), 1000, 3), 1e-6) << to_string(kind);
  }
}

TEST(Coupling, TanhInverseFiniteForLargeLatents) {
  FlowPolicy<double> flow(arch_of(2, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 4);
  Stream rng(4, "x", {});
  oracle::randomize(store, 1.0, rng);
  std::vector<double> z, o;
  for (double x = -6; x <= 6; x += 0.5) {
    for (double y = -6; y <= 6; y += 0.5) {
      z.insert(z.end(), {x, y});
      o.insert(o.end(), {0.2, -0.4, 0.9});
    }
  }
  const auto n = z.size() / 2;
  auto [a, logdet] = flow.inverse(store, Td({n, 2}, z), Td({n, 3}, o));
  for (auto v : a.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(LogProb, IdentityFlowIsStandardNormal) {
  FlowPolicy<double> flow(arch_of(2, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 1);
  Td origin({1, 2}, {0.0, 0.0});
  Td obs({1, 3}, {0.1, 0.2, 0.3});
  EXPECT_NEAR(flow.log_prob(store, origin, obs).item(), -kLog2Pi, 1e-12);
  EXPECT_NEAR(-kLog2Pi, -1.837877, 1e-6);
  Stream rng(1, "x", {});
  auto a = oracle::normal_tensor<double>({50, 2}, 2.0, rng);
  auto lp = flow.log_prob(store, a, oracle::normal_tensor<double>({50, 3}, 1.0, rng));
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_NEAR(lp.at(i), std_normal_logpdf(a.data().subspan(2 * i, 2)), 1e-12);
  }
}

TEST(LogProb, UntrainedDensityIntegratesToOne) {
  FlowPolicy<double> flow(arch_of(2, NormKind::kTanh, 1));
  ParamStore<double> store;
  flow.init(store, 1);
  EXPECT_NEAR(oracle::density_mass(flow, store, {0.3}), 1.0, 1e-2);
}

TEST(LogProb, TrainedDensityIntegratesToOne) {
  for (auto kind : {NormKind::kTanh, NormKind::kNone}) {
    FlowPolicy<double> flow(arch_of(2, kind, 1));
    auto store = fit_two_blobs(flow, 300);
    // The fit must have moved the density away from the prior.
    Td left({1, 2}, {-1.5, 0.0}), mid({1, 2}, {0.0, 2.5}), obs({1, 1}, {0.3});
    EXPECT_GT(flow.log_prob(store, left, obs).item(), flow.log_prob(store, mid, obs).item() + 1.0);
    EXPECT_NEAR(oracle::density_mass(flow, store, {0.3}), 1.0, 1e-2) << to_string(kind);
  }
}

TEST(Sample, ZeroTemperatureIsPriorMode) {
  FlowPolicy<double> flow(arch_of(3, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 6);
  Stream rng(6, "x", {});
  oracle::randomize(store, 0.3, rng);
  auto obs = oracle::normal_tensor<double>({8, 3}, 1.0, rng);
  auto s = flow.sample(store, obs, 0.0, rng);
  auto mode = flow.inverse(store, Td::zeros({8, 3}), obs).first;
  EXPECT_EQ(s.action.values(), mode.values());
  EXPECT_EQ(flow.mode(store, obs).values(), mode.values());
}

TEST(Sample, IdentityFlowSampleMean) {
  FlowPolicy<double> flow(arch_of(2, NormKind::kTanh, 1));
  ParamStore<double> store;
  flow.init(store, 1);
  Stream rng(9, "x", {});
  const std::size_t n = 100000;
  auto s = flow.sample(store, Td::zeros({n, 1}), 1.0, rng);
  double m0 = 0.0, m1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m0 += s.action.at(i, 0);
    m1 += s.action.at(i, 1);
  }
  EXPECT_LT(std::abs(m0 / n), 0.02);
  EXPECT_LT(std::abs(m1 / n), 0.02);
}

TEST(Sample, ReturnedLogProbMatchesEvaluation) {
  FlowPolicy<double> flow(arch_of(4, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 6);
  Stream rng(6, "x", {});
  oracle::randomize(store, 0.3, rng);
  auto obs = oracle::normal_tensor<double>({32, 3}, 1.0, rng);
  for (double tau : {1.0, 0.3}) {
    auto s = flow.sample(store, obs, tau, rng);
    auto lp = flow.log_prob(store, s.action, obs);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(s.log_prob.at(i), lp.at(i), 1e-12);
  }
}

TEST(Saturation, ZeroAtInit) {
  FlowPolicy<double> flow(arch_of(4, NormKind::kTanh));
  ParamStore<double> store;
  flow.init(store, 1);
  Stream rng(1, "x", {});
  auto st = flow.saturation(store, oracle::normal_tensor<double>({20, 4}, 1.0, rng),
                            oracle::normal_tensor<double>({20, 3}, 1.0, rng));
  EXPECT_EQ(st.fraction, 0.0);
  EXPECT_EQ(st.mean_abs_logdet, 0.0);
}

TEST(Saturation, ForcedConstantScaleSaturatesClip) {
  FlowPolicy<double> flow(arch_of(4, NormKind::kClip));
  ParamStore<double> store;
  flow.init(store, 1);
  for (const auto& layer : flow.layers()) {
    const auto last = layer.net_spec().layer_count() - 1;
    for (auto& v : store.get(mlp_bias_name(layer.scale_prefix(), last)).mutable_data()) v = 10.0;
  }
  Stream rng(1, "x", {});
  auto st = flow.saturation(store, oracle::normal_tensor<double>({20, 4}, 1.0, rng),
                            oracle::normal_tensor<double>({20, 3}, 1.0, rng));
  EXPECT_EQ(st.fraction, 1.0);
  EXPECT_NEAR(st.max_abs_logdet, 0.5 * 2 * 4, 1e-12);
  EXPECT_EQ(flow.bound_violations(), 0u);
}

TEST(Stability, NonFiniteForwardNamesLayerInFloat) {
  FlowPolicy<float> flow(arch_of(2, NormKind::kNone));
  ParamStore<float> store;
  flow.init(store, 1);
  for (auto& v : store.get(mlp_bias_name(flow.layers()[0].scale_prefix(), 1)).mutable_data()) v = 500.0f;
  Tensor<float> a({1, 2}, {1.0f, 1.0f}), obs({1, 3}, {0.f, 0.f, 0.f});
  try {
    flow.log_prob(store, a, obs);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.layer(), 0);
  }
}

TEST(Stability, NoSHasNoScaleParameters) {
  auto a = arch_of(4, NormKind::kNoS);
  FlowPolicy<double> flow(a);
  ParamStore<double> store;
  flow.init(store, 1);
  EXPECT_EQ(store.scalar_count(), a.param_count());
  for (const auto& name : store.names()) EXPECT_EQ(name.find(".s."), std::string::npos) << name;
}
