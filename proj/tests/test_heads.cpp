#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles/finite_diff.hpp"
#include "phpav/heads.hpp"

using namespace phpav;

namespace {

// Independent plain-loop projection oracle: relu MLP + row normalization.
std::vector<std::vector<double>> naive_project(const Tensor<double>& x, const Mlp2<double>& m) {
  long N = x.dim(0), D = x.dim(1), P = m.w1.dim(1);
  std::vector<std::vector<double>> out(size_t(N), std::vector<double>(size_t(P), 0.0));
  for (long i = 0; i < N; ++i) {
    std::vector<double> h(size_t(P), 0.0);
    for (long j = 0; j < P; ++j) {
      double s = m.b1.at(j);
      for (long d = 0; d < D; ++d) s += x.at(i, d) * m.w1.at(d, j);
      h[size_t(j)] = std::max(0.0, s);
    }
    double norm = 0;
    for (long j = 0; j < P; ++j) {
      double s = m.b2.at(j);
      for (long p = 0; p < P; ++p) s += h[size_t(p)] * m.w2.at(p, j);
      out[size_t(i)][size_t(j)] = s;
      norm += s * s;
    }
    norm = std::sqrt(norm);
    for (long j = 0; j < P; ++j) out[size_t(i)][size_t(j)] /= norm;
  }
  return out;
}

TEST(Heads, ProjectionRowsAreUnitNorm) {
  long D = 6, P = 6, N = 5;
  auto m = Mlp2<double>::init(D, P, 41, "heads:t:v");
  Graph<double> g;
  VarBinding<double> vb(g);
  auto mv = Mlp2Vars<double>::push(vb, m, "h/v");
  Rng r = Rng::derive(1, "x");
  auto y = mlp2_project(g.input(r.normal_tensor<double>({N, D}, 1.0)), mv);
  ASSERT_EQ(y.val().shape, (std::vector<long>{N, P}));
  for (long i = 0; i < N; ++i) {
    double n = 0;
    for (long j = 0; j < P; ++j) n += y.val().at(i, j) * y.val().at(i, j);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
}

TEST(Heads, ProjectionMatchesNaiveOracle) {
  long D = 5, P = 7, N = 4;
  auto m = Mlp2<double>::init(D, P, 42, "heads:t:a");
  Graph<double> g;
  VarBinding<double> vb(g);
  auto mv = Mlp2Vars<double>::push(vb, m, "h/a");
  Rng r = Rng::derive(2, "x");
  Tensor<double> x = r.normal_tensor<double>({N, D}, 1.2);
  auto y = mlp2_project(g.input(x), mv);
  auto want = naive_project(x, m);
  for (long i = 0; i < N; ++i)
    for (long j = 0; j < P; ++j) EXPECT_NEAR(y.val().at(i, j), want[size_t(i)][size_t(j)], 1e-12);
}

TEST(Heads, ZeroFinalLayerHitsNormalizationFloorNotNan) {
  long D = 4, P = 4, N = 3;
  auto m = Mlp2<double>::init(D, P, 43, "heads:t:v");
  std::fill(m.w2.data.begin(), m.w2.data.end(), 0.0);  // pre-norm output all zero
  Graph<double> g;
  VarBinding<double> vb(g);
  auto mv = Mlp2Vars<double>::push(vb, m, "h/v");
  Rng r = Rng::derive(3, "x");
  long before = warning_counters::normalization_floor().load();
  auto y = mlp2_project(g.input(r.normal_tensor<double>({N, D}, 1.0)), mv);
  EXPECT_GT(warning_counters::normalization_floor().load(), before);
  for (double v : y.val().data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Heads, LossSingletonBatchIsExactlyZero) {
  Graph<double> g;
  auto f = g.input(Tensor<double>({1, 3}, {0.6, 0.8, 0.0}));
  auto tt = g.input(Tensor<double>({1, 3}, {0.0, 1.0, 0.0}));
  auto ls = g.input(init_log_scale<double>());
  EXPECT_DOUBLE_EQ(contrastive_loss(f, tt, ls).val().at(0), 0.0);
}

TEST(Heads, LossIdentitySimilarityHandValue) {
  // F Tt^T = I at unit scale: loss = log(1 + e^(-1)) = 0.313262
  Graph<double> g;
  auto f = g.input(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto tt = g.input(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto ls = g.input(Tensor<double>({1}, {0.0}));  // scale = 1
  EXPECT_NEAR(contrastive_loss(f, tt, ls).val().at(0), std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(contrastive_loss(f, tt, ls).val().at(0), 0.313262, 1e-6);
}

TEST(Heads, LossAllIdenticalRowsIsLogBatch) {
  // every pair equally similar: loss = ln N for N=2 regardless of scale
  Graph<double> g;
  auto f = g.input(Tensor<double>({2, 2}, {1, 0, 1, 0}));
  auto tt = g.input(Tensor<double>({2, 2}, {1, 0, 1, 0}));
  for (double s : {0.0, 1.7}) {
    auto ls = g.input(Tensor<double>({1}, {s}));
    EXPECT_NEAR(contrastive_loss(f, tt, ls).val().at(0), std::log(2.0), 1e-12);
  }
  EXPECT_NEAR(std::log(2.0), 0.693147, 1e-6);
}

Tensor<double> random_unit_rows(long N, long D, uint64_t seed, const char* label) {
  Rng r = Rng::derive(seed, label);
  Tensor<double> t = r.normal_tensor<double>({N, D}, 1.0);
  for (long i = 0; i < N; ++i) {
    double n = 0;
    for (long j = 0; j < D; ++j) n += t.at(i, j) * t.at(i, j);
    n = std::sqrt(n);
    for (long j = 0; j < D; ++j) t.at(i, j) /= n;
  }
  return t;
}

TEST(Heads, LossSymmetricUnderFeatureTargetSwap) {
  Graph<double> g;
  auto fa = random_unit_rows(4, 5, 10, "f");
  auto ta = random_unit_rows(4, 5, 11, "t");
  auto ls = g.input(init_log_scale<double>());
  double ab = contrastive_loss(g.input(fa), g.input(ta), ls).val().at(0);
  double ba = contrastive_loss(g.input(ta), g.input(fa), ls).val().at(0);
  EXPECT_NEAR(ab, ba, 1e-12);
}

TEST(Heads, LossInvariantUnderJointRowPermutation) {
  long N = 5, D = 4;
  auto f = random_unit_rows(N, D, 12, "f");
  auto tt = random_unit_rows(N, D, 13, "t");
  std::vector<long> perm{3, 0, 4, 1, 2};
  Tensor<double> fp({N, D}), tp({N, D});
  for (long i = 0; i < N; ++i)
    for (long j = 0; j < D; ++j) {
      fp.at(i, j) = f.at(perm[size_t(i)], j);
      tp.at(i, j) = tt.at(perm[size_t(i)], j);
    }
  Graph<double> g;
  auto ls = g.input(Tensor<double>({1}, {1.1}));
  double base = contrastive_loss(g.input(f), g.input(tt), ls).val().at(0);
  double permuted = contrastive_loss(g.input(fp), g.input(tp), ls).val().at(0);
  EXPECT_NEAR(base, permuted, 1e-12);
}

TEST(Heads, LossValidation) {
  Graph<double> g;
  auto ls = g.input(init_log_scale<double>());
  auto f = g.input(Tensor<double>({2, 3}));
  auto bad = g.input(Tensor<double>({3, 3}));
  EXPECT_THROW(contrastive_loss(f, bad, ls), validation_error);
}

TEST(Heads, InitDeterministicAndTaskSeparated) {
  auto a1 = HeadParams<float>::init(8, 8, 7, "ave");
  auto a2 = HeadParams<float>::init(8, 8, 7, "ave");
  auto b = HeadParams<float>::init(8, 8, 7, "avvp");
  EXPECT_EQ(a1.mlp_v.w1.data, a2.mlp_v.w1.data);
  EXPECT_NE(a1.mlp_v.w1.data, b.mlp_v.w1.data);
  EXPECT_NE(a1.mlp_v.w1.data, a1.mlp_a.w1.data);  // four distinct heads
  EXPECT_NE(a1.mlp_tv.w1.data, a1.mlp_ta.w1.data);
  EXPECT_NEAR(init_log_scale<double>().at(0), std::log(1.0 / 0.07), 1e-15);
  ParamRegistry<float> reg;
  a1.register_params(reg, "heads/ave");
  EXPECT_EQ(reg.entries.size(), 16u);  // 4 MLPs x 4 tensors
}

TEST(Heads, FusedLogitsAverageTheTwoModalities) {
  long K = 5, dp = 4;
  Rng r = Rng::derive(21, "fuse");
  Tensor<float> fv = r.normal_tensor<float>({1, dp}, 1.0);
  Tensor<float> fa = r.normal_tensor<float>({1, dp}, 1.0);
  Tensor<float> cv = r.normal_tensor<float>({K, dp}, 1.0);
  Tensor<float> ca = r.normal_tensor<float>({K, dp}, 1.0);
  auto logits = fused_class_logits(fv, fa, cv, ca);
  ASSERT_EQ(logits.size(), size_t(K));
  for (long k = 0; k < K; ++k) {
    double sv = 0, sa = 0;
    for (long d = 0; d < dp; ++d) {
      sv += double(fv.at(0, d)) * double(cv.at(k, d));
      sa += double(fa.at(0, d)) * double(ca.at(k, d));
    }
    EXPECT_NEAR(logits[size_t(k)], 0.5 * (sv + sa), 1e-12);
  }
  Tensor<float> wrong({K, dp + 1});
  EXPECT_THROW(fused_class_logits(fv, fa, cv, wrong), validation_error);
  EXPECT_THROW(fused_class_logits(Tensor<float>({1, dp + 1}), fa, cv, ca), validation_error);
}

TEST(Heads, PredictSingleArgmaxAndTies) {
  EXPECT_EQ(predict_single({0.2, 0.9, 0.9}), 1);    // tie -> lowest id
  EXPECT_EQ(predict_single({0.5, 0.5, 0.5}), 0);    // full tie -> 0
  EXPECT_EQ(predict_single({-3.0, -1.0, -2.0}), 1);
  EXPECT_THROW(predict_single({}), validation_error);
}

TEST(Heads, PredictMultiThresholdAtZero) {
  auto mask = predict_multi({0.5, -0.1, 0.0, 1e-9});
  EXPECT_EQ(mask, (std::vector<int>{1, 0, 0, 1}));
}

TEST(Heads, PredictionInvariantUnderPositiveScaling) {
  std::vector<double> logits{0.4, -0.2, 0.7, 0.1};
  std::vector<double> scaled;
  for (double v : logits) scaled.push_back(2.3 * v);
  EXPECT_EQ(predict_single(logits), predict_single(scaled));
  EXPECT_EQ(predict_multi(logits), predict_multi(scaled));
}

TEST(Heads, GradcheckProjectionAndTemperature) {
  long D = 4, P = 4, N = 3;
  auto mv = Mlp2<double>::init(D, P, 51, "heads:t:v");
  auto mt = Mlp2<double>::init(D, P, 52, "heads:t:tv");
  Tensor<double> log_scale = init_log_scale<double>();
  ParamRegistry<double> reg;
  mv.register_params(reg, "h/v");
  mt.register_params(reg, "h/tv");
  reg.add("tau/v", &log_scale);
  Rng r = Rng::derive(53, "x");
  Tensor<double> xv = r.normal_tensor<double>({N, D}, 1.0);
  Tensor<double> xt = r.normal_tensor<double>({N, D}, 1.0);

  auto set_values = [&](const std::vector<Tensor<double>>& vals) {
    for (size_t i = 0; i < vals.size(); ++i) *reg.entries[i].second = vals[i];
  };
  auto build = [&](Graph<double>& g) {
    VarBinding<double> vb(g);
    auto pv = Mlp2Vars<double>::push(vb, mv, "h/v");
    auto pt = Mlp2Vars<double>::push(vb, mt, "h/tv");
    auto ls = vb.param("tau/v", log_scale);
    auto loss = contrastive_loss(mlp2_project(g.input(xv), pv),
                                 mlp2_project(g.input(xt), pt), ls);
    return std::make_pair(loss, vb);
  };

  std::vector<Tensor<double>> p0;
  for (auto& [_, t] : reg.entries) p0.push_back(*t);
  Graph<double> g;
  auto [loss, vb] = build(g);
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (auto& [name, var] : vb.bound()) analytic.push_back(g.grad(var));
  ASSERT_EQ(analytic.size(), p0.size());
  auto numeric = oracle::finite_diff_grad(
      [&](const std::vector<Tensor<double>>& vals) {
        set_values(vals);
        Graph<double> gg;
        gg.recording = false;
        return build(gg).first.val().at(0);
      },
      p0, 1e-5);  // smaller step: rectifier kinks + unit-normalization curvature
  set_values(p0);
  EXPECT_LT(oracle::max_rel_err(analytic, numeric), 1e-4);
}

}  // namespace
