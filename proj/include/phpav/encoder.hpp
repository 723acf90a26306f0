#ifndef PHPAV_ENCODER_HPP
#define PHPAV_ENCODER_HPP

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "phpav/array_io.hpp"
#include "phpav/graph.hpp"
#include "phpav/rng.hpp"

// Frozen dual-stream transformer encoders (one per modality) with pre-layer
// hook points. The backbone is a stand-in for a large pretrained model: its
// weights are derived deterministically from a seed, enter the compute graph
// as constants (never parameters), and are never updated. All task capacity
// lives in the hooked-in components.
//
// Layers are grouped into three depth bands (shallow / middle / deep); hooks
// receive the band of each layer so components can restrict themselves to a
// placement. Hooks see both streams at once, which is what lets cross-modal
// components exchange information between video and audio.

namespace phpav {

enum class Band { shallow, middle, deep };

inline std::string band_name(Band b) {
  switch (b) {
    case Band::shallow: return "shallow";
    case Band::middle: return "middle";
    case Band::deep: return "deep";
  }
  throw validation_error("unknown band");
}

inline Band band_from_name(const std::string& s) {
  if (s == "shallow") return Band::shallow;
  if (s == "middle") return Band::middle;
  if (s == "deep") return Band::deep;
  throw validation_error("unknown band: " + s);
}

struct EncoderConfig {
  long embed_dim = 32;
  long shallow_layers = 2, middle_layers = 2, deep_layers = 2;
  long video_channels = 8, audio_channels = 8;
  uint64_t seed = 11;

  long num_layers() const { return shallow_layers + middle_layers + deep_layers; }

  void validate() const {
    if (embed_dim < 1) throw validation_error("embed_dim must be positive");
    if (shallow_layers < 0 || middle_layers < 0 || deep_layers < 0)
      throw validation_error("band sizes must be non-negative");
    if (num_layers() < 1) throw validation_error("encoder needs at least one layer");
    if (video_channels < 1 || audio_channels < 1)
      throw validation_error("channel counts must be positive");
  }

  Band band_of(long layer) const {
    if (layer < 0 || layer >= num_layers())
      throw validation_error("layer index out of range: " + std::to_string(layer));
    if (layer < shallow_layers) return Band::shallow;
    if (layer < shallow_layers + middle_layers) return Band::middle;
    return Band::deep;
  }
};

template <typename T>
struct EncoderLayerWeights {
  Tensor<T> wq, wk, wv, wo;  // [D,D] single-head attention, no biases
  Tensor<T> w1, b1, w2, b2;  // tanh FFN D->D->D
};

template <typename T>
struct ModalityWeights {
  Tensor<T> w_in;  // [C,D] input token projection
  std::vector<EncoderLayerWeights<T>> layers;
};

// One stream's live state while the encoder runs. Prompt rows, when present,
// are always the LEADING rows of each frame; the original clip tokens keep
// their order as the trailing base_rows. Hooks that change the row count must
// keep that invariant and update prompt_rows.
template <typename T>
struct StreamState {
  Var<T> tokens;         // [T, prompt_rows + base_rows, D]
  long base_rows = 0;
  long prompt_rows = 0;

  long rows() const { return prompt_rows + base_rows; }
};

template <typename T>
struct HookSet {
  // Runs before frozen layer `layer` transforms the streams.
  std::function<void(Graph<T>&, long layer, Band band, StreamState<T>& video,
                     StreamState<T>& audio)>
      pre_layer;
};

template <typename T>
struct EncoderForward {
  StreamState<T> video, audio;       // state after the last layer
  Var<T> video_embed, audio_embed;   // [1,D] mean over frames x base rows
  // row counts entering each layer, after that layer's hook ran
  std::vector<std::pair<long, long>> row_trace;
  // populated only when keep_trace: tokens entering each layer (post-hook)
  std::vector<Tensor<T>> video_layer_inputs, audio_layer_inputs;
};

template <typename T>
class FrozenDualEncoder {
public:
  EncoderConfig cfg;
  ModalityWeights<T> video, audio;

  static FrozenDualEncoder create(const EncoderConfig& cfg) {
    cfg.validate();
    FrozenDualEncoder e;
    e.cfg = cfg;
    e.video = init_modality(cfg, "video", cfg.video_channels);
    e.audio = init_modality(cfg, "audio", cfg.audio_channels);
    return e;
  }

  // Digest over every backbone weight; training must leave this unchanged.
  std::string fingerprint() const {
    std::map<std::string, const Tensor<T>*> m;
    collect(m, "video", video);
    collect(m, "audio", audio);
    return fingerprint_arrays(m);
  }

  EncoderForward<T> forward(Graph<T>& g, const Tensor<T>& video_clip,
                            const Tensor<T>& audio_clip, const HookSet<T>& hooks,
                            bool keep_trace = false) const {
    check_clip(video_clip, cfg.video_channels, "video");
    check_clip(audio_clip, cfg.audio_channels, "audio");
    EncoderForward<T> out;
    out.video = project(g, video_clip, video);
    out.audio = project(g, audio_clip, audio);
    for (long l = 0; l < cfg.num_layers(); ++l) {
      Band band = cfg.band_of(l);
      if (hooks.pre_layer) hooks.pre_layer(g, l, band, out.video, out.audio);
      if (out.video.tokens.val().dim(1) != out.video.rows() ||
          out.audio.tokens.val().dim(1) != out.audio.rows())
        throw validation_error("hook at layer " + std::to_string(l) +
                               " broke row bookkeeping");
      out.row_trace.emplace_back(out.video.rows(), out.audio.rows());
      if (keep_trace) {
        out.video_layer_inputs.push_back(out.video.tokens.val());
        out.audio_layer_inputs.push_back(out.audio.tokens.val());
      }
      apply_layer(g, out.video, video.layers[static_cast<size_t>(l)]);
      apply_layer(g, out.audio, audio.layers[static_cast<size_t>(l)]);
    }
    out.video_embed = pool_all3(out.video.tokens, out.video.prompt_rows);
    out.audio_embed = pool_all3(out.audio.tokens, out.audio.prompt_rows);
    return out;
  }

private:
  static ModalityWeights<T> init_modality(const EncoderConfig& cfg, const std::string& name,
                                          long channels) {
    ModalityWeights<T> m;
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    auto draw = [&](const std::string& label, std::vector<long> shape) {
      Rng r = Rng::derive(cfg.seed, "enc:" + name + ":" + label);
      // draw in double so every scalar instantiation sees the same values
      return cast_tensor<T>(r.normal_tensor<double>(std::move(shape), std));
    };
    m.w_in = draw("in", {channels, cfg.embed_dim});
    for (long l = 0; l < cfg.num_layers(); ++l) {
      std::string p = "L" + std::to_string(l) + ":";
      EncoderLayerWeights<T> w;
      w.wq = draw(p + "wq", {cfg.embed_dim, cfg.embed_dim});
      w.wk = draw(p + "wk", {cfg.embed_dim, cfg.embed_dim});
      w.wv = draw(p + "wv", {cfg.embed_dim, cfg.embed_dim});
      w.wo = draw(p + "wo", {cfg.embed_dim, cfg.embed_dim});
      w.w1 = draw(p + "w1", {cfg.embed_dim, cfg.embed_dim});
      w.b1 = draw(p + "b1", {cfg.embed_dim});
      w.w2 = draw(p + "w2", {cfg.embed_dim, cfg.embed_dim});
      w.b2 = draw(p + "b2", {cfg.embed_dim});
      m.layers.push_back(std::move(w));
    }
    return m;
  }

  static void collect(std::map<std::string, const Tensor<T>*>& m, const std::string& name,
                      const ModalityWeights<T>& w) {
    m[name + "/in"] = &w.w_in;
    for (size_t l = 0; l < w.layers.size(); ++l) {
      std::string p = name + "/L" + std::to_string(l) + "/";
      const auto& lw = w.layers[l];
      m[p + "wq"] = &lw.wq;
      m[p + "wk"] = &lw.wk;
      m[p + "wv"] = &lw.wv;
      m[p + "wo"] = &lw.wo;
      m[p + "w1"] = &lw.w1;
      m[p + "b1"] = &lw.b1;
      m[p + "w2"] = &lw.w2;
      m[p + "b2"] = &lw.b2;
    }
  }

  void check_clip(const Tensor<T>& clip, long channels, const char* which) const {
    if (clip.rank() != 3 || clip.dim(2) != channels)
      throw validation_error(std::string(which) + " clip must be [T,S," +
                             std::to_string(channels) + "], got " + clip.shape_str());
  }

  StreamState<T> project(Graph<T>& g, const Tensor<T>& clip, const ModalityWeights<T>& w) const {
    StreamState<T> s;
    s.tokens = mat3(g.input(clip), g.input(w.w_in));
    s.base_rows = clip.dim(1);
    s.prompt_rows = 0;
    return s;
  }

  void apply_layer(Graph<T>& g, StreamState<T>& s, const EncoderLayerWeights<T>& lw) const {
    const long Tn = s.tokens.val().dim(0), rows = s.tokens.val().dim(1), D = cfg.embed_dim;
    auto c = [&](const Tensor<T>& t) { return g.input(t); };
    auto q = mat3(s.tokens, c(lw.wq));
    auto k = mat3(s.tokens, c(lw.wk));
    auto v = mat3(s.tokens, c(lw.wv));
    auto attn = softmax_lastdim(scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(D))));
    auto ctx = mat3(bmm(attn, v), c(lw.wo));
    s.tokens = add(s.tokens, ctx);
    auto flat = reshape(s.tokens, {Tn * rows, D});
    auto h = tanh_(add_bias(matmul(flat, c(lw.w1)), c(lw.b1)));
    auto f = add_bias(matmul(h, c(lw.w2)), c(lw.b2));
    s.tokens = add(s.tokens, reshape(f, {Tn, rows, D}));
  }
};

}  // namespace phpav

#endif
