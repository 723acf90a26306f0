#include <gtest/gtest.h>

#include <cstdio>

#include "oracles/finite_diff.hpp"
#include "oracles/naive_encoder.hpp"
#include "phpav/encoder.hpp"

using namespace phpav;

namespace {

template <typename T>
Tensor<T> random_clip(uint64_t seed, long Tn, long S, long C, double std = 1.0) {
  Rng r = Rng::derive(seed, "clip");
  return cast_tensor<T>(r.normal_tensor<double>({Tn, S, C}, std));
}

TEST(Encoder, BandMap) {
  EncoderConfig c;
  EXPECT_EQ(c.num_layers(), 6);
  EXPECT_EQ(c.band_of(0), Band::shallow);
  EXPECT_EQ(c.band_of(1), Band::shallow);
  EXPECT_EQ(c.band_of(2), Band::middle);
  EXPECT_EQ(c.band_of(3), Band::middle);
  EXPECT_EQ(c.band_of(4), Band::deep);
  EXPECT_EQ(c.band_of(5), Band::deep);
  EXPECT_THROW(c.band_of(6), validation_error);
  EXPECT_THROW(c.band_of(-1), validation_error);
  c.middle_layers = 0;
  EXPECT_EQ(c.band_of(2), Band::deep);
  c.shallow_layers = c.middle_layers = c.deep_layers = 0;
  EXPECT_THROW(c.validate(), validation_error);
  c = EncoderConfig{};
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), validation_error);
  EXPECT_EQ(band_from_name(band_name(Band::middle)), Band::middle);
  EXPECT_THROW(band_from_name("bogus"), validation_error);
}

TEST(Encoder, FingerprintDeterministicAndSeedSensitive) {
  EncoderConfig c;
  auto a = FrozenDualEncoder<float>::create(c);
  auto b = FrozenDualEncoder<float>::create(c);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  c.seed = 12;
  auto d = FrozenDualEncoder<float>::create(c);
  EXPECT_NE(a.fingerprint(), d.fingerprint());
  // double instantiation digests identically (weights drawn in double, digest
  // over the f32 payload)
  auto dd = FrozenDualEncoder<double>::create(EncoderConfig{});
  EXPECT_EQ(a.fingerprint(), dd.fingerprint());
}

// Pinned digest of the default backbone. Any change to the weight layout,
// derivation labels, or RNG breaks this on purpose.
TEST(Encoder, FingerprintGolden) {
  auto e = FrozenDualEncoder<float>::create(EncoderConfig{});
  EXPECT_EQ(e.fingerprint(), "6acfae11ac93111b");
}

TEST(Encoder, EmptyHooksMatchesNaiveOracle) {
  auto enc = FrozenDualEncoder<double>::create(EncoderConfig{});
  auto vclip = random_clip<double>(5, 5, 16, 8);
  auto aclip = random_clip<double>(6, 5, 16, 8);
  Graph<double> g;
  auto out = enc.forward(g, vclip, aclip, HookSet<double>{});
  auto ref = oracle::naive_forward(enc, vclip, aclip);
  ASSERT_EQ(out.video_embed.val().shape, (std::vector<long>{1, 32}));
  for (long d = 0; d < 32; ++d) {
    EXPECT_NEAR(out.video_embed.val().at(0, d), ref.video_embed[size_t(d)], 1e-10);
    EXPECT_NEAR(out.audio_embed.val().at(0, d), ref.audio_embed[size_t(d)], 1e-10);
  }
  // float graph tracks the double oracle to float precision
  auto encf = FrozenDualEncoder<float>::create(EncoderConfig{});
  Graph<float> gf;
  auto outf = encf.forward(gf, cast_tensor<float>(vclip), cast_tensor<float>(aclip), {});
  for (long d = 0; d < 32; ++d)
    EXPECT_NEAR(outf.video_embed.val().at(0, d), ref.video_embed[size_t(d)], 2e-4);
  // row bookkeeping with no hooks: constant base rows, no prompts
  ASSERT_EQ(out.row_trace.size(), 6u);
  for (auto [rv, ra] : out.row_trace) {
    EXPECT_EQ(rv, 16);
    EXPECT_EQ(ra, 16);
  }
}

TEST(Encoder, ForwardDeterministicBitwise) {
  auto enc = FrozenDualEncoder<float>::create(EncoderConfig{});
  auto vclip = random_clip<float>(5, 5, 16, 8);
  auto aclip = random_clip<float>(6, 5, 16, 8);
  Graph<float> g1, g2;
  auto o1 = enc.forward(g1, vclip, aclip, {});
  auto o2 = enc.forward(g2, vclip, aclip, {});
  EXPECT_EQ(o1.video_embed.val().data, o2.video_embed.val().data);
  EXPECT_EQ(o1.audio_embed.val().data, o2.audio_embed.val().data);
}

TEST(Encoder, ClipShapeValidation) {
  auto enc = FrozenDualEncoder<float>::create(EncoderConfig{});
  Graph<float> g;
  Tensor<float> bad({5, 16, 7});  // wrong channel count
  auto good = random_clip<float>(5, 5, 16, 8);
  EXPECT_THROW(enc.forward(g, bad, good, {}), validation_error);
  EXPECT_THROW(enc.forward(g, good, bad, {}), validation_error);
}

// A hook that prepends k param rows at the entry to a band, replace-style:
// re-prepends fresh rows at every layer of the band (dropping its own rows
// from the previous layer first).
template <typename T>
HookSet<T> prepend_hook(Var<T> prompt, Band where, long k, bool video_side) {
  HookSet<T> h;
  h.pre_layer = [prompt, where, k, video_side](Graph<T>&, long, Band band, StreamState<T>& v,
                                               StreamState<T>& a) mutable {
    if (band != where) return;
    StreamState<T>& s = video_side ? v : a;
    if (s.prompt_rows > 0) {
      s.tokens = drop_rows3(s.tokens, s.prompt_rows);
      s.prompt_rows = 0;
    }
    s.tokens = prepend_rows3(prompt, s.tokens);
    s.prompt_rows = k;
  };
  return h;
}

TEST(Encoder, PromptRowBookkeeping) {
  auto enc = FrozenDualEncoder<float>::create(EncoderConfig{});
  auto vclip = random_clip<float>(5, 5, 16, 8);
  auto aclip = random_clip<float>(6, 5, 16, 8);
  Graph<float> g;
  auto prompt = g.param(Rng::derive(9, "p").normal_tensor<float>({3, 32}, 0.02));
  auto out = enc.forward(g, vclip, aclip, prepend_hook(prompt, Band::middle, 3, true));
  // shallow layers see 16 video rows; middle and deep see 19 (rows persist
  // after the band unless a later hook drops them)
  std::vector<long> want_v{16, 16, 19, 19, 19, 19};
  for (size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(out.row_trace[l].first, want_v[l]) << "layer " << l;
    EXPECT_EQ(out.row_trace[l].second, 16) << "layer " << l;
  }
  // embedding still pools only the 16 base rows
  EXPECT_EQ(out.video.prompt_rows, 3);
  EXPECT_EQ(out.video.base_rows, 16);
  EXPECT_EQ(out.video_embed.val().shape, (std::vector<long>{1, 32}));
  // bookkeeping breakage is caught: a hook that edits tokens but not counters
  HookSet<float> bad;
  bad.pre_layer = [&](Graph<float>& gg, long l, Band, StreamState<float>& v, StreamState<float>&) {
    if (l == 3) v.tokens = drop_rows3(v.tokens, 2);  // silently drops rows
  };
  Graph<float> g2;
  auto p2 = g2.param(Rng::derive(9, "p").normal_tensor<float>({3, 32}, 0.02));
  EXPECT_THROW(enc.forward(g2, vclip, aclip, bad), validation_error);
}

TEST(Encoder, HookLocality) {
  // hook active only in the deep band: activations entering layers 0..3 are
  // bit-identical to the hook-free run, layers 4.. differ
  auto enc = FrozenDualEncoder<float>::create(EncoderConfig{});
  auto vclip = random_clip<float>(5, 5, 16, 8);
  auto aclip = random_clip<float>(6, 5, 16, 8);
  Graph<float> g0, g1;
  auto base = enc.forward(g0, vclip, aclip, {}, true);
  auto prompt = g1.param(Rng::derive(10, "p").normal_tensor<float>({2, 32}, 0.5));
  auto hooked = enc.forward(g1, vclip, aclip, prepend_hook(prompt, Band::deep, 2, false), true);
  for (size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(base.audio_layer_inputs[l].data, hooked.audio_layer_inputs[l].data) << l;
    EXPECT_EQ(base.video_layer_inputs[l].data, hooked.video_layer_inputs[l].data) << l;
  }
  EXPECT_NE(base.audio_layer_inputs[4].data, hooked.audio_layer_inputs[4].data);
  // video stream untouched by an audio-side deep hook
  EXPECT_EQ(base.video_layer_inputs[5].data, hooked.video_layer_inputs[5].data);
  EXPECT_EQ(base.video_embed.val().data, hooked.video_embed.val().data);
  EXPECT_NE(base.audio_embed.val().data, hooked.audio_embed.val().data);
}

TEST(Encoder, BackboneGetsNoGradients) {
  auto enc = FrozenDualEncoder<float>::create(EncoderConfig{});
  auto vclip = random_clip<float>(5, 3, 16, 8);
  auto aclip = random_clip<float>(6, 3, 16, 8);
  Graph<float> g;
  auto prompt = g.param(Rng::derive(9, "p").normal_tensor<float>({2, 32}, 0.02));
  auto out = enc.forward(g, vclip, aclip, prepend_hook(prompt, Band::middle, 2, true));
  auto loss = mean_all(add(out.video_embed, out.audio_embed));
  g.backward(loss);
  // prompt got a gradient; nothing else in the graph is a leaf parameter
  const auto& pg = g.grad(prompt);
  ASSERT_FALSE(pg.data.empty());
  double mag = 0;
  for (float x : pg.data) mag += std::abs(x);
  EXPECT_GT(mag, 0.0);
  int leaf_params = 0;
  for (int i = 0; i < static_cast<int>(g.size()); ++i)
    if (g.node(i).needs_grad && !g.node(i).back) leaf_params++;
  EXPECT_EQ(leaf_params, 1);
}

// Gradient of a prompt parameter through the full stack of frozen layers,
// against central differences. This is the integration-level gradient check;
// per-op checks live in the graph test.
TEST(Encoder, PromptGradcheckThroughEncoder) {
  EncoderConfig cfg;
  cfg.shallow_layers = cfg.middle_layers = cfg.deep_layers = 1;
  cfg.embed_dim = 12;
  cfg.video_channels = cfg.audio_channels = 4;
  auto enc = FrozenDualEncoder<double>::create(cfg);
  auto vclip = random_clip<double>(5, 2, 6, 4);
  auto aclip = random_clip<double>(6, 2, 6, 4);
  Tensor<double> p0 = Rng::derive(9, "p").normal_tensor<double>({2, 12}, 0.3);
  Tensor<double> probe = Rng::derive(13, "probe").normal_tensor<double>({1, 12}, 1.0);

  auto run = [&](const std::vector<Tensor<double>>& params, Graph<double>& g,
                 std::vector<Var<double>>& vars) {
    auto prompt = g.param(params[0]);
    vars.push_back(prompt);
    auto out = enc.forward(g, vclip, aclip, prepend_hook(prompt, Band::middle, 2, true));
    // probe both embeddings so the loss depends on cross-stream values
    auto pv = g.input(probe);
    return mean_all(mul(add(out.video_embed, out.audio_embed), pv));
  };

  Graph<double> g;
  std::vector<Var<double>> vars;
  auto loss = run({p0}, g, vars);
  g.backward(loss);
  std::vector<Tensor<double>> analytic{g.grad(vars[0])};

  auto numeric = oracle::finite_diff_grad(
      [&](const std::vector<Tensor<double>>& ps) {
        Graph<double> gg;
        gg.recording = false;
        std::vector<Var<double>> vs;
        return run(ps, gg, vs).val().at(0);
      },
      {p0}, 1e-5);
  double err = oracle::max_rel_err(analytic, numeric);
  EXPECT_LT(err, 1e-6) << "prompt grad rel err through encoder";
}

}  // namespace
