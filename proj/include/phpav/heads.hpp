#ifndef PHPAV_HEADS_HPP
#define PHPAV_HEADS_HPP

#include <cmath>
#include <string>

#include "phpav/params.hpp"
#include "phpav/rng.hpp"

// Projection heads and the symmetric contrastive objective. Four 2-layer
// rectified MLPs per task (video/audio features, video/audio text targets)
// project embeddings into a shared space; the training signal is CLIP-style
// symmetric InfoNCE per modality with a learnable temperature stored in log
// space (logits = exp(log_scale) * cosine, scale = 1/tau), and the total loss
// is L_v + L_a. Prediction fuses the two modalities' cosine logits equally.

namespace phpav {

template <typename T>
struct Mlp2 {
  Tensor<T> w1, b1, w2, b2;  // [D,Dp],[Dp],[Dp,Dp],[Dp]

  static Mlp2 init(long d_in, long d_proj, uint64_t seed, const std::string& label) {
    Mlp2 m;
    auto draw = [&](const char* part, std::vector<long> shape, double std) {
      Rng r = Rng::derive(seed, label + ":" + part);
      return cast_tensor<T>(r.normal_tensor<double>(std::move(shape), std));
    };
    m.w1 = draw("w1", {d_in, d_proj}, 1.0 / std::sqrt(static_cast<double>(d_in)));
    m.b1 = Tensor<T>({d_proj});
    m.w2 = draw("w2", {d_proj, d_proj}, 1.0 / std::sqrt(static_cast<double>(d_proj)));
    m.b2 = Tensor<T>({d_proj});
    return m;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + "/w1", &w1);
    reg.add(prefix + "/b1", &b1);
    reg.add(prefix + "/w2", &w2);
    reg.add(prefix + "/b2", &b2);
  }
};

template <typename T>
struct Mlp2Vars {
  Var<T> w1, b1, w2, b2;

  static Mlp2Vars push(VarBinding<T>& vb, Mlp2<T>& m, const std::string& prefix) {
    Mlp2Vars v;
    v.w1 = vb.param(prefix + "/w1", m.w1);
    v.b1 = vb.param(prefix + "/b1", m.b1);
    v.w2 = vb.param(prefix + "/w2", m.w2);
    v.b2 = vb.param(prefix + "/b2", m.b2);
    return v;
  }
};

// x [N,D] -> L2-normalized [N,Dp]
template <typename T>
Var<T> mlp2_project(Var<T> x, const Mlp2Vars<T>& m) {
  auto h = relu(add_bias(matmul(x, m.w1), m.b1));
  return l2normalize_rows(add_bias(matmul(h, m.w2), m.b2));
}

template <typename T>
struct HeadParams {
  Mlp2<T> mlp_v, mlp_a, mlp_tv, mlp_ta;

  static HeadParams init(long d_in, long d_proj, uint64_t seed, const std::string& task_id) {
    HeadParams h;
    h.mlp_v = Mlp2<T>::init(d_in, d_proj, seed, "heads:" + task_id + ":v");
    h.mlp_a = Mlp2<T>::init(d_in, d_proj, seed, "heads:" + task_id + ":a");
    h.mlp_tv = Mlp2<T>::init(d_in, d_proj, seed, "heads:" + task_id + ":tv");
    h.mlp_ta = Mlp2<T>::init(d_in, d_proj, seed, "heads:" + task_id + ":ta");
    return h;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    mlp_v.register_params(reg, prefix + "/mlp_v");
    mlp_a.register_params(reg, prefix + "/mlp_a");
    mlp_tv.register_params(reg, prefix + "/mlp_tv");
    mlp_ta.register_params(reg, prefix + "/mlp_ta");
  }
};

template <typename T>
struct HeadVars {
  Mlp2Vars<T> mlp_v, mlp_a, mlp_tv, mlp_ta;

  static HeadVars push(VarBinding<T>& vb, HeadParams<T>& h, const std::string& prefix) {
    HeadVars v;
    v.mlp_v = Mlp2Vars<T>::push(vb, h.mlp_v, prefix + "/mlp_v");
    v.mlp_a = Mlp2Vars<T>::push(vb, h.mlp_a, prefix + "/mlp_a");
    v.mlp_tv = Mlp2Vars<T>::push(vb, h.mlp_tv, prefix + "/mlp_tv");
    v.mlp_ta = Mlp2Vars<T>::push(vb, h.mlp_ta, prefix + "/mlp_ta");
    return v;
  }
};

// Learnable log inverse-temperature, init log(1/0.07) (cosine scale ~14.29).
template <typename T>
inline Tensor<T> init_log_scale() {
  return Tensor<T>({1}, {static_cast<T>(std::log(1.0 / 0.07))});
}

// Symmetric InfoNCE over a batch of matched rows. F, Tt [N,Dp] L2-normalized;
// logits = exp(log_scale) * F Tt^T; loss = mean of the two cross-entropy
// directions with the diagonal as targets. N=1 gives exactly 0.
template <typename T>
Var<T> contrastive_loss(Var<T> f, Var<T> tt, Var<T> log_scale) {
  const Tensor<T>& vf = f.val();
  if (vf.rank() != 2 || !vf.same_shape(tt.val()))
    throw validation_error("contrastive_loss: F and T must be [N,Dp] alike");
  if (vf.dim(0) < 1) throw validation_error("contrastive_loss: empty batch");
  auto logits = smul(matmul_nt(f, tt), exp_scalar(log_scale));  // [N,N]
  auto dir1 = mean_all(sub(logsumexp_rows(logits), take_diag(logits)));
  auto logits_t = transpose2(logits);
  auto dir2 = mean_all(sub(logsumexp_rows(logits_t), take_diag(logits_t)));
  return scale(add(dir1, dir2), 0.5);
}

// Inference: fused cosine logits against per-class projected text rows.
// class_tv/class_ta [K,Dp]; f_v/f_a [1,Dp]; returns [K] doubles.
template <typename T>
std::vector<double> fused_class_logits(const Tensor<T>& f_v, const Tensor<T>& f_a,
                                       const Tensor<T>& class_tv, const Tensor<T>& class_ta) {
  if (class_tv.rank() != 2 || !class_tv.same_shape(class_ta))
    throw validation_error("predict: class embedding shapes differ");
  long K = class_tv.dim(0), dp = class_tv.dim(1);
  if (f_v.numel() != dp || f_a.numel() != dp)
    throw validation_error("predict: feature dim mismatch");
  std::vector<double> logits(static_cast<size_t>(K), 0.0);
  for (long k = 0; k < K; ++k) {
    double sv = 0, sa = 0;
    for (long d = 0; d < dp; ++d) {
      sv += double(f_v.data[static_cast<size_t>(d)]) * class_tv.at(k, d);
      sa += double(f_a.data[static_cast<size_t>(d)]) * class_ta.at(k, d);
    }
    logits[static_cast<size_t>(k)] = 0.5 * (sv + sa);
  }
  return logits;
}

// argmax with ties broken toward the lowest class id
inline int predict_single(const std::vector<double>& logits) {
  if (logits.empty()) throw validation_error("predict: no classes");
  int best = 0;
  for (int k = 1; k < static_cast<int>(logits.size()); ++k)
    if (logits[static_cast<size_t>(k)] > logits[static_cast<size_t>(best)]) best = k;
  return best;
}

// multi-label rule: class active iff fused cosine logit > 0
inline std::vector<int> predict_multi(const std::vector<double>& logits) {
  std::vector<int> out(logits.size(), 0);
  for (size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] > 0 ? 1 : 0;
  return out;
}

}  // namespace phpav

#endif
