#include <gtest/gtest.h>

#include <cmath>

#include "oracles/finite_diff.hpp"
#include "oracles/naive_attention.hpp"
#include "phpav/tmdg.hpp"

using namespace phpav;

namespace {

template <typename T>
TmdgVars<T> push_all(VarBinding<T>& vb, TmdgTask<T>& task, const TmdgAttn<T>& attn) {
  return TmdgVars<T>::push(vb, task, attn, "tmdg/t");
}

TEST(Tmdg, IdentityAttentionReducesSummaryToPlainMean) {
  // Wo = 0 makes the residual attention block the identity, so the summary
  // is the plain mean of [steps; pool] rows. T'=1, L=1: S = (token + p)/2.
  long d = 2;
  auto attn = TmdgAttn<double>::init(d, 3);
  std::fill(attn.wo.data.begin(), attn.wo.data.end(), 0.0);
  auto task = TmdgTask<double>::init(1, 1, d, 4, "t");
  task.pool = Tensor<double>({1, 2}, {0.7, 0.1});
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = push_all(vb, task, attn);
  auto steps = g.input(Tensor<double>({1, 2}, {0.3, 0.5}));
  auto s = tmdg_summarize(steps, vars);
  EXPECT_NEAR(s.val().at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(s.val().at(0, 1), 0.3, 1e-12);
}

TEST(Tmdg, SummarizeMatchesNaiveAttentionOracle) {
  long d = 5, L = 4, Tn = 3;
  auto attn = TmdgAttn<double>::init(d, 31);
  auto task = TmdgTask<double>::init(L, 2, d, 32, "t");
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = push_all(vb, task, attn);
  Rng r = Rng::derive(5, "steps");
  Tensor<double> steps = r.normal_tensor<double>({Tn, d}, 0.8);
  auto s = tmdg_summarize(g.input(steps), vars);

  Tensor<double> x({Tn + L, d});
  for (long i = 0; i < Tn; ++i)
    for (long j = 0; j < d; ++j) x.at(i, j) = steps.at(i, j);
  for (long i = 0; i < L; ++i)
    for (long j = 0; j < d; ++j) x.at(Tn + i, j) = task.pool.at(i, j);
  auto rows = oracle::naive_self_attention(x, attn.wq, attn.wk, attn.wv, attn.wo);
  for (long j = 0; j < d; ++j) {
    double mean = 0;
    for (auto& row : rows) mean += row[size_t(j)];
    mean /= double(rows.size());
    EXPECT_NEAR(s.val().at(0, j), mean, 1e-10);
  }
}

TEST(Tmdg, ZeroGeneratorGivesUniformPoolMean) {
  long d = 3, L = 4, n = 2;
  auto attn = TmdgAttn<double>::init(d, 3);
  auto task = TmdgTask<double>::init(L, n, d, 4, "t");
  std::fill(task.delta_s.data.begin(), task.delta_s.data.end(), 0.0);
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = push_all(vb, task, attn);
  auto s = g.input(Tensor<double>({1, d}, {0.4, -1.2, 2.0}));
  auto gen = tmdg_generate(s, vars);
  ASSERT_EQ(gen.val().shape, (std::vector<long>{n, d}));
  for (long j = 0; j < d; ++j) {
    double mean = 0;
    for (long l = 0; l < L; ++l) mean += task.pool.at(l, j);
    mean /= double(L);
    for (long i = 0; i < n; ++i) EXPECT_NEAR(gen.val().at(i, j), mean, 1e-12);
  }
}

TEST(Tmdg, SaturatedLogitSelectsSinglePoolRow) {
  long d = 2, L = 3, n = 1;
  auto attn = TmdgAttn<double>::init(d, 3);
  auto task = TmdgTask<double>::init(L, n, d, 4, "t");
  // delta_s rows are per-(slot,pool-row) logit directions; make row 0 huge.
  std::fill(task.delta_s.data.begin(), task.delta_s.data.end(), 0.0);
  task.delta_s.at(0, 0) = 50.0;
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = push_all(vb, task, attn);
  auto s = g.input(Tensor<double>({1, d}, {1.0, 0.0}));
  auto w = tmdg_mixture_weights(s, vars);
  EXPECT_NEAR(w.val().at(0, 0), 1.0, 1e-6);
  auto gen = tmdg_generate(s, vars);
  for (long j = 0; j < d; ++j) EXPECT_NEAR(gen.val().at(0, j), task.pool.at(0, j), 1e-6);
}

TEST(Tmdg, MixtureWeightsAreConvex) {
  long d = 6, L = 5, n = 3;
  auto attn = TmdgAttn<double>::init(d, 3);
  auto task = TmdgTask<double>::init(L, n, d, 77, "t");
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = push_all(vb, task, attn);
  Rng r = Rng::derive(9, "mix");
  for (int trial = 0; trial < 5; ++trial) {
    auto s = g.input(r.normal_tensor<double>({1, d}, 2.0));
    auto w = tmdg_mixture_weights(s, vars);
    for (long i = 0; i < n; ++i) {
      double sum = 0;
      for (long l = 0; l < L; ++l) {
        EXPECT_GE(w.val().at(i, l), 0.0);
        sum += w.val().at(i, l);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    // convexity: every generated coordinate lies inside the pool's column range
    auto gen = tmdg_generate(s, vars);
    for (long j = 0; j < d; ++j) {
      double lo = 1e300, hi = -1e300;
      for (long l = 0; l < L; ++l) {
        lo = std::min(lo, task.pool.at(l, j));
        hi = std::max(hi, task.pool.at(l, j));
      }
      for (long i = 0; i < n; ++i) {
        EXPECT_GE(gen.val().at(i, j), lo - 1e-9);
        EXPECT_LE(gen.val().at(i, j), hi + 1e-9);
      }
    }
  }
}

TEST(Tmdg, InjectPrependsAndDropRecoversBitExact) {
  long d = 4, L = 3, n = 2, Tn = 2, S = 3;
  auto attn = TmdgAttn<float>::init(d, 3);
  auto task = TmdgTask<float>::init(L, n, d, 4, "t");
  Graph<float> g;
  VarBinding<float> vb(g);
  auto vars = push_all(vb, task, attn);
  Rng r = Rng::derive(6, "clip");
  StreamState<float> st;
  Tensor<float> clip = r.normal_tensor<float>({Tn, S, d}, 1.0);
  st.tokens = g.input(clip);
  st.base_rows = S;
  long added = tmdg_apply_stream(g, vars, st);
  EXPECT_EQ(added, n);
  EXPECT_EQ(st.prompt_rows, n);
  EXPECT_EQ(st.tokens.val().shape, (std::vector<long>{Tn, S + n, d}));
  // same generated rows are shared across frames
  for (long t = 1; t < Tn; ++t)
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < d; ++j)
        EXPECT_EQ(st.tokens.val().at(t, i, j), st.tokens.val().at(0, i, j));
  auto back = drop_rows3(st.tokens, n);
  EXPECT_EQ(back.val().data, clip.data);  // bit-exact recovery
}

TEST(Tmdg, ZeroRowPrependIsIdentityAtOpLevel) {
  Graph<float> g;
  Rng r = Rng::derive(8, "id");
  Tensor<float> clip = r.normal_tensor<float>({2, 3, 4}, 1.0);
  auto x = g.input(clip);
  auto out = prepend_rows3(g.input(Tensor<float>({0, 4})), x);
  EXPECT_EQ(out.val().data, clip.data);
  auto out2 = drop_rows3(x, 0);
  EXPECT_EQ(out2.val().data, clip.data);
}

TEST(Tmdg, InitValidation) {
  EXPECT_THROW(TmdgTask<float>::init(0, 1, 4, 1, "t"), validation_error);
  EXPECT_THROW(TmdgTask<float>::init(3, 0, 4, 1, "t"), validation_error);
  EXPECT_THROW(TmdgTask<float>::init(3, 1, 0, 1, "t"), validation_error);
  Graph<double> g;
  VarBinding<double> vb(g);
  auto attn = TmdgAttn<double>::init(4, 3);
  auto task = TmdgTask<double>::init(3, 1, 4, 1, "t");
  auto vars = push_all(vb, task, attn);
  auto bad = g.input(Tensor<double>({2, 4}));  // S must be [1,d]
  EXPECT_THROW(tmdg_generate(bad, vars), validation_error);
  auto bad_steps = g.input(Tensor<double>({2, 5}));  // wrong token dim
  EXPECT_THROW(tmdg_summarize(bad_steps, vars), validation_error);
}

TEST(Tmdg, TaskPoolsAreDistinctAndInitDeterministic) {
  auto a1 = TmdgTask<float>::init(4, 2, 8, 10, "taskA");
  auto a2 = TmdgTask<float>::init(4, 2, 8, 10, "taskA");
  auto b = TmdgTask<float>::init(4, 2, 8, 10, "taskB");
  EXPECT_EQ(a1.pool.data, a2.pool.data);
  EXPECT_EQ(a1.delta_s.data, a2.delta_s.data);
  EXPECT_NE(a1.pool.data, b.pool.data);
  EXPECT_NE(a1.delta_s.data, b.delta_s.data);
}

TEST(Tmdg, GradcheckPoolAndGeneratorOnly) {
  long d = 4, L = 3, n = 2, Tn = 2, S = 2;
  auto attn = TmdgAttn<double>::init(d, 21);
  auto task = TmdgTask<double>::init(L, n, d, 22, "t");
  ParamRegistry<double> reg;
  task.register_params(reg, "tmdg/t");
  Rng r = Rng::derive(23, "grad");
  Tensor<double> clip = r.normal_tensor<double>({Tn, S, d}, 1.0);
  Tensor<double> probe = r.normal_tensor<double>({Tn, S + n, d}, 1.0);

  auto set_values = [&](const std::vector<Tensor<double>>& vals) {
    for (size_t i = 0; i < vals.size(); ++i) *reg.entries[i].second = vals[i];
  };
  auto build = [&](Graph<double>& g) {
    VarBinding<double> vb(g);
    auto vars = push_all(vb, task, attn);
    StreamState<double> st;
    st.tokens = g.input(clip);
    st.base_rows = S;
    tmdg_apply_stream(g, vars, st);
    return std::make_pair(mean_all(mul(st.tokens, g.input(probe))), vb);
  };

  std::vector<Tensor<double>> p0;
  for (auto& [_, t] : reg.entries) p0.push_back(*t);

  Graph<double> g;
  auto [loss, vb] = build(g);
  g.backward(loss);
  // the stream and the frozen attention enter as constants: exactly 2 leaves
  long leaves = 0;
  for (long i = 0; i < g.size(); ++i)
    if (g.node(i).needs_grad && !g.node(i).back) ++leaves;
  EXPECT_EQ(leaves, 2);

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
      p0, 1e-4);
  set_values(p0);
  EXPECT_LT(oracle::max_rel_err(analytic, numeric), 1e-4);
}

}  // namespace
