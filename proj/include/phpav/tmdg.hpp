#ifndef PHPAV_TMDG_HPP
#define PHPAV_TMDG_HPP

#include <cmath>
#include <map>
#include <string>

#include "phpav/encoder.hpp"
#include "phpav/params.hpp"
#include "phpav/rng.hpp"

// Task-specific modality-shared dynamic generating adapter. Each task owns a
// prompt pool P [L,d] and a generator matrix delta_s [n*L, d]. At each layer
// of its band, for each modality:
//   1. summarize: S = mean over rows of SelfAttn([per-step token means; P])
//   2. generate:  row-softmax(reshape(delta_s . S, [n,L])) . P  -> G [n,d]
//   3. inject:    prepend G to the stream (replace-style across band layers)
// The self-attention block is shared across tasks and modalities and is NOT
// trained: the per-stage trainable set is pinned to task-owned parameters
// plus the task-shared gating adapter, and a drifting summarizer would let
// stage t silently shift every earlier task's generated prompts. Pool rows
// mix through a softmax, so each generated prompt is a convex combination of
// pool rows (the bare product in the source formulation is scale-degenerate).

namespace phpav {

// Frozen single-head self-attention with residual: x + softmax(qk^T/sqrt(d)) v Wo.
template <typename T>
struct TmdgAttn {
  Tensor<T> wq, wk, wv, wo;  // [d,d]

  static TmdgAttn init(long d, uint64_t seed) {
    TmdgAttn a;
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    auto draw = [&](const char* label) {
      Rng r = Rng::derive(seed, std::string("tmdg:attn:") + label);
      return cast_tensor<T>(r.normal_tensor<double>({d, d}, std));
    };
    a.wq = draw("wq");
    a.wk = draw("wk");
    a.wv = draw("wv");
    a.wo = draw("wo");
    return a;
  }
};

template <typename T>
struct TmdgTask {
  Tensor<T> pool;     // [L,d]
  Tensor<T> delta_s;  // [n*L, d]
  long n = 0, pool_size = 0;

  static TmdgTask init(long pool_size, long n, long d, uint64_t seed, const std::string& task_id) {
    if (pool_size < 1 || n < 1 || d < 1) throw validation_error("tmdg: L, n, d must be positive");
    TmdgTask t;
    t.pool_size = pool_size;
    t.n = n;
    Rng rp = Rng::derive(seed, "tmdg:" + task_id + ":pool");
    t.pool = cast_tensor<T>(rp.normal_tensor<double>({pool_size, d}, 0.02));
    Rng rd = Rng::derive(seed, "tmdg:" + task_id + ":delta_s");
    t.delta_s = cast_tensor<T>(rd.normal_tensor<double>({n * pool_size, d}, 0.1));
    return t;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + "/pool", &pool);
    reg.add(prefix + "/delta_s", &delta_s);
  }
};

template <typename T>
struct TmdgVars {
  Var<T> pool, delta_s;
  Var<T> wq, wk, wv, wo;  // frozen
  long n = 0, pool_size = 0;

  static TmdgVars push(VarBinding<T>& vb, TmdgTask<T>& task, const TmdgAttn<T>& attn,
                       const std::string& prefix) {
    TmdgVars v;
    v.n = task.n;
    v.pool_size = task.pool_size;
    v.pool = vb.param(prefix + "/pool", task.pool);
    v.delta_s = vb.param(prefix + "/delta_s", task.delta_s);
    v.wq = vb.frozen(attn.wq);
    v.wk = vb.frozen(attn.wk);
    v.wv = vb.frozen(attn.wv);
    v.wo = vb.frozen(attn.wo);
    return v;
  }
};

// S = mean over rows of SelfAttn([steps; P]), steps [T',d] -> S [1,d].
template <typename T>
Var<T> tmdg_summarize(Var<T> steps, const TmdgVars<T>& p) {
  if (steps.val().rank() != 2 || steps.val().dim(1) != p.pool.val().dim(1))
    throw validation_error("tmdg summarize: token dim must match pool dim");
  auto x = concat_rows(steps, p.pool);  // [T'+L, d]
  long d = x.val().dim(1);
  auto q = matmul(x, p.wq);
  auto k = matmul(x, p.wk);
  auto v = matmul(x, p.wv);
  auto attn = softmax_lastdim(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d))));
  auto out = add(x, matmul(matmul(attn, v), p.wo));  // residual
  return mean_rows(out);  // [1,d]
}

// G = row-softmax(reshape(delta_s . S, [n,L])) . P  -> [n,d]
template <typename T>
Var<T> tmdg_generate(Var<T> s, const TmdgVars<T>& p) {
  if (s.val().rank() != 2 || s.val().dim(0) != 1)
    throw validation_error("tmdg generate: S must be [1,d]");
  auto logits = reshape(matmul_nt(s, p.delta_s), {p.n, p.pool_size});  // [n,L]
  auto weights = softmax_lastdim(logits);
  return matmul(weights, p.pool);
}

// Mixture weights alone (for convexity checks / inspection).
template <typename T>
Var<T> tmdg_mixture_weights(Var<T> s, const TmdgVars<T>& p) {
  return softmax_lastdim(reshape(matmul_nt(s, p.delta_s), {p.n, p.pool_size}));
}

// One full adapter step for one stream: summarize the live tokens (per-step
// means over all current rows), generate, prepend. Returns the generated
// prompt row count.
template <typename T>
long tmdg_apply_stream(Graph<T>&, const TmdgVars<T>& p, StreamState<T>& s) {
  auto steps = pool_rows3(s.tokens, 0);  // [T,d]
  auto g_rows = tmdg_generate(tmdg_summarize(steps, p), p);
  s.tokens = prepend_rows3(g_rows, s.tokens);
  s.prompt_rows += p.n;
  return p.n;
}

}  // namespace phpav

#endif
