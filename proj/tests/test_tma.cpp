#include <gtest/gtest.h>

#include <cmath>

#include "oracles/finite_diff.hpp"
#include "phpav/tma.hpp"

using namespace phpav;

namespace {

template <typename T>
void zero(Tensor<T>& t) {
  std::fill(t.data.begin(), t.data.end(), T(0));
}

template <typename T>
void zero_all_map_params(TmaParams<T>& p) {
  zero(p.w_v);
  zero(p.delta_v);
  zero(p.w_a);
  zero(p.delta_a);
  zero(p.psi_a);
  zero(p.psi_v);
  for (auto* g : {&p.rnn_a, &p.rnn_v})
    for (auto* t : {&g->wr, &g->ur, &g->br, &g->wz, &g->uz, &g->bz, &g->wn, &g->un, &g->bn})
      zero(*t);
  zero(p.gamma_a);
  zero(p.gamma_v);
}

template <typename T>
Tensor<T> const_clip(long Tn, long S, long C, T value) {
  Tensor<T> t({Tn, S, C});
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

template <typename T>
StreamState<T> stream_of(Graph<T>& g, Tensor<T> clip) {
  StreamState<T> s;
  s.base_rows = clip.dim(1);
  s.tokens = g.input(std::move(clip));
  return s;
}

TEST(Tma, ZeroParamsGiveHalfMapsEverywhere) {
  TmaDims d{4, 4, 3, 2, 3};
  auto p = TmaParams<double>::init(d, 5);
  zero_all_map_params(p);
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = TmaVars<double>::push(vb, p);
  auto sv = stream_of(g, const_clip<double>(2, 3, 4, 1.7));
  auto sa = stream_of(g, const_clip<double>(2, 2, 4, -0.3));
  auto m = tma_maps(g, vars, sv.tokens, sa.tokens);
  for (auto mv : {m.m_vc, m.m_ac, m.m_vs, m.m_as, m.m_vt, m.m_at})
    for (double x : mv.val().data) EXPECT_DOUBLE_EQ(x, 0.5);
  EXPECT_EQ(m.m_vc.val().shape, (std::vector<long>{1, 4}));
  EXPECT_EQ(m.m_vs.val().shape, (std::vector<long>{1, 3}));
  EXPECT_EQ(m.m_as.val().shape, (std::vector<long>{1, 2}));
  EXPECT_EQ(m.m_vt.val().shape, (std::vector<long>{2, 1}));
}

TEST(Tma, ChannelMapHandValue) {
  // 1-channel streams, identity W and delta, audio global mean 2.0
  TmaDims d{1, 1, 1, 1, 1};
  auto p = TmaParams<double>::init(d, 5);
  zero_all_map_params(p);
  p.w_v = Tensor<double>({1, 1}, {1.0});
  p.delta_v = Tensor<double>({1, 1}, {1.0});
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = TmaVars<double>::push(vb, p);
  auto sv = stream_of(g, const_clip<double>(3, 1, 1, 0.0));
  auto sa = stream_of(g, const_clip<double>(3, 1, 1, 2.0));
  auto m = tma_maps(g, vars, sv.tokens, sa.tokens);
  EXPECT_NEAR(m.m_vc.val().at(0), 0.880797, 1e-6);  // sigma(2)
}

TEST(Tma, SpatialMapHandValue) {
  // 1x1 grids, psi scalar 3, audio mean 1 -> sigma(3)
  TmaDims d{1, 1, 1, 1, 1};
  auto p = TmaParams<double>::init(d, 5);
  zero_all_map_params(p);
  p.psi_a = Tensor<double>({1, 1}, {3.0});
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = TmaVars<double>::push(vb, p);
  auto sv = stream_of(g, const_clip<double>(2, 1, 1, 0.0));
  auto sa = stream_of(g, const_clip<double>(2, 1, 1, 1.0));
  auto m = tma_maps(g, vars, sv.tokens, sa.tokens);
  EXPECT_NEAR(m.m_vs.val().at(0), 0.952574, 1e-6);  // sigma(3)
}

TEST(Tma, TemporalMapHandValue) {
  // T=1, d_rnn=1: h0=0 so h1 = (1-z)*n with z = sig(x wz + bz),
  // n = tanh(x wn + bn); gate = sig(gamma * h1). Audio tokens all 0.9.
  TmaDims d{1, 1, 1, 1, 1};
  auto p = TmaParams<double>::init(d, 5);
  zero_all_map_params(p);
  p.rnn_a.wz = Tensor<double>({1, 1}, {-0.2});
  p.rnn_a.bz = Tensor<double>({1}, {0.05});
  p.rnn_a.wn = Tensor<double>({1, 1}, {0.7});
  p.rnn_a.bn = Tensor<double>({1}, {-0.1});
  p.rnn_a.wr = Tensor<double>({1, 1}, {0.3});
  p.rnn_a.br = Tensor<double>({1}, {0.1});
  p.rnn_a.un = Tensor<double>({1, 1}, {0.4});  // multiplies r*h0 = 0, inert at T=1
  p.gamma_a = Tensor<double>({1, 1}, {1.2});
  Graph<double> g;
  VarBinding<double> vb(g);
  auto vars = TmaVars<double>::push(vb, p);
  auto sv = stream_of(g, const_clip<double>(1, 1, 1, 0.0));
  auto sa = stream_of(g, const_clip<double>(1, 1, 1, 0.9));
  auto m = tma_maps(g, vars, sv.tokens, sa.tokens);
  const double x = 0.9;
  const double z = 1.0 / (1.0 + std::exp(-(x * -0.2 + 0.05)));
  const double n = std::tanh(x * 0.7 - 0.1);
  const double h1 = (1.0 - z) * n;
  const double want = 1.0 / (1.0 + std::exp(-(1.2 * h1)));
  EXPECT_NEAR(m.m_vt.val().at(0), want, 1e-12);
}

TEST(Tma, MapsStrictlyInsideUnitInterval) {
  // float pipeline with extreme activations: gates clamp away from 0/1
  TmaDims d{4, 4, 3, 3, 2};
  auto p = TmaParams<float>::init(d, 5);
  for (float v : {1e8f, -1e8f}) {
    Graph<float> g;
    VarBinding<float> vb(g);
    auto vars = TmaVars<float>::push(vb, p);
    auto sv = stream_of(g, const_clip<float>(2, 3, 4, v));
    auto sa = stream_of(g, const_clip<float>(2, 3, 4, -v));
    auto m = tma_maps(g, vars, sv.tokens, sa.tokens);
    for (auto mv : {m.m_vc, m.m_ac, m.m_vs, m.m_as, m.m_vt, m.m_at})
      for (float x : mv.val().data) {
        EXPECT_GT(x, 0.0f);
        EXPECT_LT(x, 1.0f);
      }
  }
}

TEST(Tma, FuseHandValues) {
  Graph<double> g;
  TmaVars<double> vars;  // only the blend coefficients matter for fuse
  long Tn = 2, S = 2, C = 2;
  Rng r = Rng::derive(3, "fuse");
  Tensor<double> clip = r.normal_tensor<double>({Tn, S, C}, 1.0);
  auto tokens = g.input(clip);
  Tensor<double> half_c({1, C});
  std::fill(half_c.data.begin(), half_c.data.end(), 0.5);
  auto m_c = g.input(half_c);
  auto m_s = g.input(Tensor<double>({1, S}));
  auto m_t = g.input(Tensor<double>({Tn, 1}));

  vars.alpha = g.input(Tensor<double>({1}, {0.0}));
  vars.beta = g.input(Tensor<double>({1}, {0.0}));
  vars.gamma = g.input(Tensor<double>({1}, {0.0}));
  auto zeroed = tma_fuse_one(tokens, m_c, m_s, m_t, vars);
  for (double x : zeroed.val().data) EXPECT_DOUBLE_EQ(x, 0.0);

  vars.alpha = g.input(Tensor<double>({1}, {1.0}));
  auto halved = tma_fuse_one(tokens, m_c, m_s, m_t, vars);
  for (long i = 0; i < clip.numel(); ++i)
    EXPECT_DOUBLE_EQ(halved.val().data[size_t(i)], 0.5 * clip.data[size_t(i)]);

  vars.residual = true;
  auto res = tma_fuse_one(tokens, m_c, m_s, m_t, vars);
  for (long i = 0; i < clip.numel(); ++i)
    EXPECT_DOUBLE_EQ(res.val().data[size_t(i)], 1.5 * clip.data[size_t(i)]);
}

TEST(Tma, FuseMatchesTripleLoopOracle) {
  for (long n : {2L, 3L}) {
    long Tn = n, S = n, C = n;
    Rng r = Rng::derive(7 + n, "fuse_oracle");
    Tensor<float> clip = r.normal_tensor<float>({Tn, S, C}, 1.3);
    Tensor<float> mc = r.normal_tensor<float>({1, C}, 0.3);
    Tensor<float> ms = r.normal_tensor<float>({1, S}, 0.3);
    Tensor<float> mt = r.normal_tensor<float>({Tn, 1}, 0.3);
    const float a = 0.7f, b = -0.4f, c = 1.1f;
    Graph<float> g;
    TmaVars<float> vars;
    vars.alpha = g.input(Tensor<float>({1}, {a}));
    vars.beta = g.input(Tensor<float>({1}, {b}));
    vars.gamma = g.input(Tensor<float>({1}, {c}));
    auto out = tma_fuse_one(g.input(clip), g.input(mc), g.input(ms), g.input(mt), vars);
    for (long t = 0; t < Tn; ++t)
      for (long s = 0; s < S; ++s)
        for (long ch = 0; ch < C; ++ch) {
          double gate = double(a) * mc.at(0, ch) + double(b) * ms.at(0, s) + double(c) * mt.at(t, 0);
          EXPECT_NEAR(out.val().at(t, s, ch), gate * clip.at(t, s, ch), 1e-6);
        }
  }
}

TEST(Tma, ApplyGatesBothStreams) {
  TmaDims d{4, 4, 3, 2, 3};
  auto p = TmaParams<float>::init(d, 5);
  Graph<float> g;
  VarBinding<float> vb(g);
  auto vars = TmaVars<float>::push(vb, p);
  Rng r = Rng::derive(1, "apply");
  auto sv = stream_of(g, r.normal_tensor<float>({2, 3, 4}, 1.f));
  auto sa = stream_of(g, r.normal_tensor<float>({2, 2, 4}, 1.f));
  Tensor<float> v_before = sv.tokens.val(), a_before = sa.tokens.val();
  tma_apply(g, vars, sv, sa);
  EXPECT_EQ(sv.tokens.val().shape, v_before.shape);
  EXPECT_EQ(sa.tokens.val().shape, a_before.shape);
  EXPECT_NE(sv.tokens.val().data, v_before.data);
  EXPECT_NE(sa.tokens.val().data, a_before.data);
  EXPECT_EQ(sv.prompt_rows, 0);  // gating never changes row counts
}

TEST(Tma, ShapeValidation) {
  TmaDims d{4, 4, 3, 2, 3};
  auto p = TmaParams<float>::init(d, 5);
  Graph<float> g;
  VarBinding<float> vb(g);
  auto vars = TmaVars<float>::push(vb, p);
  auto sv = stream_of(g, const_clip<float>(2, 5, 4, 1.f));  // 5 rows, params expect 3
  auto sa = stream_of(g, const_clip<float>(2, 2, 4, 1.f));
  EXPECT_THROW(tma_maps(g, vars, sv.tokens, sa.tokens), validation_error);
  auto sv2 = stream_of(g, const_clip<float>(2, 3, 2, 1.f));  // wrong channels
  EXPECT_THROW(tma_maps(g, vars, sv2.tokens, sa.tokens), validation_error);
  EXPECT_THROW(TmaParams<float>::init(TmaDims{0, 4, 3, 2, 3}, 5), validation_error);
}

TEST(Tma, InitDeterministic) {
  TmaDims d{4, 4, 3, 2, 3};
  auto a = TmaParams<float>::init(d, 5);
  auto b = TmaParams<float>::init(d, 5);
  EXPECT_EQ(a.w_v.data, b.w_v.data);
  EXPECT_EQ(a.rnn_a.wn.data, b.rnn_a.wn.data);
  EXPECT_FLOAT_EQ(a.alpha.at(0), 1.f / 3.f);
  auto c = TmaParams<float>::init(d, 6);
  EXPECT_NE(a.w_v.data, c.w_v.data);
}

// Analytic gradients of a probe loss through the full adapter (all six maps,
// both recurrent cells, the blend coefficients) vs central differences.
TEST(Tma, GradcheckAllParams) {
  TmaDims dims{3, 3, 3, 2, 2};
  auto p = TmaParams<double>::init(dims, 9);
  ParamRegistry<double> reg;
  p.register_params(reg);
  Rng r = Rng::derive(2, "gradcheck");
  Tensor<double> vclip = r.normal_tensor<double>({2, 3, 3}, 1.0);
  Tensor<double> aclip = r.normal_tensor<double>({2, 2, 3}, 1.0);
  Tensor<double> probe_v = r.normal_tensor<double>({2, 3, 3}, 1.0);
  Tensor<double> probe_a = r.normal_tensor<double>({2, 2, 3}, 1.0);

  auto set_values = [&](const std::vector<Tensor<double>>& vals) {
    for (size_t i = 0; i < vals.size(); ++i) *reg.entries[i].second = vals[i];
  };
  auto build = [&](Graph<double>& g) {
    VarBinding<double> vb(g);
    auto vars = TmaVars<double>::push(vb, p);
    auto sv = stream_of(g, vclip);
    auto sa = stream_of(g, aclip);
    tma_apply(g, vars, sv, sa);
    auto loss = add(mean_all(mul(sv.tokens, g.input(probe_v))),
                    mean_all(mul(sa.tokens, g.input(probe_a))));
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
      p0, 1e-4);
  set_values(p0);
  double err = oracle::max_rel_err(analytic, numeric);
  EXPECT_LT(err, 1e-4);
}

}  // namespace
