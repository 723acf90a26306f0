#ifndef PHPAV_TMA_HPP
#define PHPAV_TMA_HPP

#include <cmath>
#include <string>

#include "phpav/encoder.hpp"
#include "phpav/params.hpp"
#include "phpav/rng.hpp"

// Task-shared modality-aggregating adapter. At each layer of its band it
// derives six attention maps from the pair of token streams — per-channel,
// per-position, and per-timestep gates for each modality, each computed from
// the OTHER modality's stream — and rescales the tokens by the blended gate
//
//   gate_v[t,s,c] = alpha*M_vc[c] + beta*M_vs[s] + gamma*M_vt[t]
//
// (audio symmetric). Gating replaces the tokens; a residual variant exists
// behind a flag. One parameter set is shared across all tasks and all layers
// of the band, so it keeps adapting throughout the incremental sequence.

namespace phpav {

// Single gated recurrent cell, row-vector convention:
//   r = sig(x Wr + h Ur + br), z = sig(x Wz + h Uz + bz),
//   n = tanh(x Wn + (r.h) Un + bn), h' = (1-z).n + z.h,  h0 = 0.
template <typename T>
struct GruParams {
  Tensor<T> wr, ur, br, wz, uz, bz, wn, un, bn;

  static GruParams init(long in_dim, long hidden, uint64_t seed, const std::string& label,
                        double std) {
    GruParams p;
    auto draw = [&](const char* part, std::vector<long> shape) {
      Rng r = Rng::derive(seed, label + ":" + part);
      return cast_tensor<T>(r.normal_tensor<double>(std::move(shape), std));
    };
    p.wr = draw("wr", {in_dim, hidden});
    p.ur = draw("ur", {hidden, hidden});
    p.br = Tensor<T>({hidden});
    p.wz = draw("wz", {in_dim, hidden});
    p.uz = draw("uz", {hidden, hidden});
    p.bz = Tensor<T>({hidden});
    p.wn = draw("wn", {in_dim, hidden});
    p.un = draw("un", {hidden, hidden});
    p.bn = Tensor<T>({hidden});
    return p;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + "/wr", &wr);
    reg.add(prefix + "/ur", &ur);
    reg.add(prefix + "/br", &br);
    reg.add(prefix + "/wz", &wz);
    reg.add(prefix + "/uz", &uz);
    reg.add(prefix + "/bz", &bz);
    reg.add(prefix + "/wn", &wn);
    reg.add(prefix + "/un", &un);
    reg.add(prefix + "/bn", &bn);
  }
};

template <typename T>
struct GruVars {
  Var<T> wr, ur, br, wz, uz, bz, wn, un, bn;

  static GruVars push(VarBinding<T>& vb, GruParams<T>& p, const std::string& prefix) {
    GruVars v;
    v.wr = vb.param(prefix + "/wr", p.wr);
    v.ur = vb.param(prefix + "/ur", p.ur);
    v.br = vb.param(prefix + "/br", p.br);
    v.wz = vb.param(prefix + "/wz", p.wz);
    v.uz = vb.param(prefix + "/uz", p.uz);
    v.bz = vb.param(prefix + "/bz", p.bz);
    v.wn = vb.param(prefix + "/wn", p.wn);
    v.un = vb.param(prefix + "/un", p.un);
    v.bn = vb.param(prefix + "/bn", p.bn);
    return v;
  }
};

// One recurrence step: x [1,in], h [1,hidden] -> h' [1,hidden].
template <typename T>
Var<T> gru_step(Var<T> x, Var<T> h, const GruVars<T>& p) {
  auto r = sigmoid(add(add_bias(matmul(x, p.wr), p.br), matmul(h, p.ur)));
  auto z = sigmoid(add(add_bias(matmul(x, p.wz), p.bz), matmul(h, p.uz)));
  auto n = tanh_(add(add_bias(matmul(x, p.wn), p.bn), matmul(mul(r, h), p.un)));
  // (1-z).n + z.h == n + z.(h-n)
  return add(n, mul(z, sub(h, n)));
}

struct TmaDims {
  long c_v = 0, c_a = 0;        // channel dims of the two streams (both = D here)
  long rows_v = 0, rows_a = 0;  // token rows entering the adapter's band
  long d_rnn = 0;
};

template <typename T>
struct TmaParams {
  TmaDims dims;
  Tensor<T> w_v, delta_v;  // [C_v,C_v], [C_v,C_a]
  Tensor<T> w_a, delta_a;  // [C_a,C_a], [C_a,C_v]
  Tensor<T> psi_a;         // [rows_v, C_a]  audio mean -> video position logits
  Tensor<T> psi_v;         // [rows_a, C_v]
  GruParams<T> rnn_a, rnn_v;
  Tensor<T> gamma_a, gamma_v;       // [1, d_rnn] hidden -> per-step logit
  Tensor<T> alpha, beta, gamma;     // scalars [1]
  bool residual = false;

  static TmaParams init(const TmaDims& dims, uint64_t seed) {
    if (dims.c_v < 1 || dims.c_a < 1 || dims.rows_v < 1 || dims.rows_a < 1 || dims.d_rnn < 1)
      throw validation_error("tma: all dims must be positive");
    TmaParams p;
    p.dims = dims;
    const double std = 0.1;  // keeps initial gates near sigma(0)=0.5
    auto draw = [&](const char* label, std::vector<long> shape) {
      Rng r = Rng::derive(seed, std::string("tma:") + label);
      return cast_tensor<T>(r.normal_tensor<double>(std::move(shape), std));
    };
    p.w_v = draw("w_v", {dims.c_v, dims.c_v});
    p.delta_v = draw("delta_v", {dims.c_v, dims.c_a});
    p.w_a = draw("w_a", {dims.c_a, dims.c_a});
    p.delta_a = draw("delta_a", {dims.c_a, dims.c_v});
    p.psi_a = draw("psi_a", {dims.rows_v, dims.c_a});
    p.psi_v = draw("psi_v", {dims.rows_a, dims.c_v});
    p.rnn_a = GruParams<T>::init(dims.c_a, dims.d_rnn, seed, "tma:rnn_a", std);
    p.rnn_v = GruParams<T>::init(dims.c_v, dims.d_rnn, seed, "tma:rnn_v", std);
    p.gamma_a = draw("gamma_a", {1, dims.d_rnn});
    p.gamma_v = draw("gamma_v", {1, dims.d_rnn});
    p.alpha = Tensor<T>({1}, {T(1) / T(3)});
    p.beta = Tensor<T>({1}, {T(1) / T(3)});
    p.gamma = Tensor<T>({1}, {T(1) / T(3)});
    return p;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix = "tma") {
    reg.add(prefix + "/w_v", &w_v);
    reg.add(prefix + "/delta_v", &delta_v);
    reg.add(prefix + "/w_a", &w_a);
    reg.add(prefix + "/delta_a", &delta_a);
    reg.add(prefix + "/psi_a", &psi_a);
    reg.add(prefix + "/psi_v", &psi_v);
    rnn_a.register_params(reg, prefix + "/rnn_a");
    rnn_v.register_params(reg, prefix + "/rnn_v");
    reg.add(prefix + "/gamma_a", &gamma_a);
    reg.add(prefix + "/gamma_v", &gamma_v);
    reg.add(prefix + "/alpha", &alpha);
    reg.add(prefix + "/beta", &beta);
    reg.add(prefix + "/gamma", &gamma);
  }
};

template <typename T>
struct TmaVars {
  TmaDims dims;
  Var<T> w_v, delta_v, w_a, delta_a, psi_a, psi_v;
  GruVars<T> rnn_a, rnn_v;
  Var<T> gamma_a, gamma_v, alpha, beta, gamma;
  bool residual = false;

  static TmaVars push(VarBinding<T>& vb, TmaParams<T>& p, const std::string& prefix = "tma") {
    TmaVars v;
    v.dims = p.dims;
    v.residual = p.residual;
    v.w_v = vb.param(prefix + "/w_v", p.w_v);
    v.delta_v = vb.param(prefix + "/delta_v", p.delta_v);
    v.w_a = vb.param(prefix + "/w_a", p.w_a);
    v.delta_a = vb.param(prefix + "/delta_a", p.delta_a);
    v.psi_a = vb.param(prefix + "/psi_a", p.psi_a);
    v.psi_v = vb.param(prefix + "/psi_v", p.psi_v);
    v.rnn_a = GruVars<T>::push(vb, p.rnn_a, prefix + "/rnn_a");
    v.rnn_v = GruVars<T>::push(vb, p.rnn_v, prefix + "/rnn_v");
    v.gamma_a = vb.param(prefix + "/gamma_a", p.gamma_a);
    v.gamma_v = vb.param(prefix + "/gamma_v", p.gamma_v);
    v.alpha = vb.param(prefix + "/alpha", p.alpha);
    v.beta = vb.param(prefix + "/beta", p.beta);
    v.gamma = vb.param(prefix + "/gamma", p.gamma);
    return v;
  }
};

template <typename T>
struct TmaMaps {
  Var<T> m_vc, m_ac;  // [1,C_v], [1,C_a] channel gates
  Var<T> m_vs, m_as;  // [1,rows_v], [1,rows_a] positional gates
  Var<T> m_vt, m_at;  // [T,1] temporal gates
};

namespace detail {

// run the cell over per-step features [T, in], map hiddens to logits [T,1]
template <typename T>
Var<T> temporal_logits(Graph<T>& g, Var<T> steps, const GruVars<T>& cell, Var<T> gamma_row) {
  long Tn = steps.val().dim(0);
  long hidden = gamma_row.val().dim(1);
  Var<T> h = g.input(Tensor<T>({1, hidden}));
  Var<T> out;
  for (long t = 0; t < Tn; ++t) {
    h = gru_step(slice_rows(steps, t, t + 1), h, cell);
    Var<T> logit = matmul_nt(h, gamma_row);  // [1,1]
    out = t ? concat_rows(out, logit) : logit;
  }
  return out;  // [T,1]
}

}  // namespace detail

// Compute all six maps from the current streams. Maps are strict sigmoid
// outputs, clamped away from exactly 0/1 in finite precision.
template <typename T>
TmaMaps<T> tma_maps(Graph<T>& g, const TmaVars<T>& p, Var<T> v_tokens, Var<T> a_tokens) {
  const Tensor<T>& vv = v_tokens.val();
  const Tensor<T>& va = a_tokens.val();
  if (vv.rank() != 3 || va.rank() != 3 || vv.dim(2) != p.dims.c_v || va.dim(2) != p.dims.c_a)
    throw validation_error("tma: stream channel dims do not match params");
  if (vv.dim(1) != p.dims.rows_v || va.dim(1) != p.dims.rows_a)
    throw validation_error("tma: stream row count " + std::to_string(vv.dim(1)) + "/" +
                           std::to_string(va.dim(1)) + " does not match params " +
                           std::to_string(p.dims.rows_v) + "/" + std::to_string(p.dims.rows_a));
  if (vv.dim(0) != va.dim(0)) throw validation_error("tma: streams disagree on T");

  TmaMaps<T> m;
  auto phi_a = pool_all3(a_tokens, 0);  // [1,C_a] global mean
  auto phi_v = pool_all3(v_tokens, 0);  // [1,C_v]
  // channel: M_vc = sig(W_v . delta_v(phi_a)), row-vector form x A^T
  m.m_vc = gate_sigmoid(matmul_nt(matmul_nt(phi_a, p.delta_v), p.w_v));
  m.m_ac = gate_sigmoid(matmul_nt(matmul_nt(phi_v, p.delta_a), p.w_a));
  // spatial: M_vs = sig(psi_a(phi_a)) over video positions
  m.m_vs = gate_sigmoid(matmul_nt(phi_a, p.psi_a));
  m.m_as = gate_sigmoid(matmul_nt(phi_v, p.psi_v));
  // temporal: per-step means of the other stream through the recurrent cell
  auto steps_a = pool_rows3(a_tokens, 0);  // [T,C_a]
  auto steps_v = pool_rows3(v_tokens, 0);  // [T,C_v]
  m.m_vt = gate_sigmoid(detail::temporal_logits(g, steps_a, p.rnn_a, p.gamma_a));
  m.m_at = gate_sigmoid(detail::temporal_logits(g, steps_v, p.rnn_v, p.gamma_v));
  return m;
}

// Blend the three maps into a full-rank gate and rescale tokens.
template <typename T>
Var<T> tma_fuse_one(Var<T> tokens, Var<T> m_c, Var<T> m_s, Var<T> m_t, const TmaVars<T>& p) {
  long Tn = tokens.val().dim(0), S = tokens.val().dim(1), C = tokens.val().dim(2);
  auto gate = add(add(broadcast3(smul(m_c, p.alpha), 2, Tn, S, C),
                      broadcast3(smul(m_s, p.beta), 1, Tn, S, C)),
                  broadcast3(smul(m_t, p.gamma), 0, Tn, S, C));
  auto gated = mul(gate, tokens);
  return p.residual ? add(tokens, gated) : gated;
}

// Full adapter step: recompute maps from the live streams, gate both.
template <typename T>
void tma_apply(Graph<T>& g, const TmaVars<T>& p, StreamState<T>& v, StreamState<T>& a) {
  TmaMaps<T> m = tma_maps(g, p, v.tokens, a.tokens);
  v.tokens = tma_fuse_one(v.tokens, m.m_vc, m.m_vs, m.m_vt, p);
  a.tokens = tma_fuse_one(a.tokens, m.m_ac, m.m_as, m.m_at, p);
}

}  // namespace phpav

#endif
