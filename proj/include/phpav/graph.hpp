#ifndef PHPAV_GRAPH_HPP
#define PHPAV_GRAPH_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "phpav/common.hpp"
#include "phpav/tensor.hpp"

// Reverse-mode autodiff on a flat tape. Every op appends one node holding the
// forward value and (when recording and reachable from a parameter) a closure
// that scatters the node's gradient into its inputs' gradients. backward()
// walks the tape once in reverse. Nodes are addressed by index; closures never
// hold references into the node vector, which may reallocate.
//
// Templated on the scalar so the float32 pipeline and the float64 gradient
// oracles share one implementation.

namespace phpav {

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;
  const Tensor<T>& val() const { return g->node_val(id); }
};

template <typename T>
class Graph {
public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // lazily allocated; empty means zero
    std::function<void()> back;
    bool needs_grad = false;
  };

  // When false (evaluation mode) no backward closures are stored; forward
  // values are bit-identical either way.
  bool recording = true;

  Var<T> input(Tensor<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> param(Tensor<T> v) { return push(std::move(v), true, nullptr); }

  Var<T> push(Tensor<T> v, bool needs_grad, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, std::move(back), needs_grad});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& node_val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

  // Gradient buffer for a node, allocated as zeros on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty() && n.val.numel() > 0) n.grad = Tensor<T>(n.val.shape);
    return n.grad;
  }

  // Gradient of a node after backward(); empty tensor means exactly zero
  // (the node was not reached by the backward sweep).
  const Tensor<T>& grad(const Var<T>& v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

  void backward(const Var<T>& loss) {
    if (!recording) throw validation_error("graph: backward() called on a non-recording graph");
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.val.numel() != 1) throw validation_error("graph: backward() target must be scalar");
    grad_buf(loss.id).data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.needs_grad && !n.grad.data.empty()) n.back();
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

private:
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
inline bool want_back(Graph<T>* g, bool needs) {
  return g->recording && needs;
}

}  // namespace detail

// ----- elementwise -----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!a.val().same_shape(b.val())) throw validation_error("add: shape mismatch");
  Graph<T>* g = a.g;
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (long i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] += pb[i];
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < go.numel(); ++i) ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < go.numel(); ++i) gb.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      }
    };
  }
  return r;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (!a.val().same_shape(b.val())) throw validation_error("sub: shape mismatch");
  Graph<T>* g = a.g;
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (long i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] -= pb[i];
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < go.numel(); ++i) ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < go.numel(); ++i) gb.data[static_cast<size_t>(i)] -= go.data[static_cast<size_t>(i)];
      }
    };
  }
  return r;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (!a.val().same_shape(b.val())) throw validation_error("mul: shape mismatch");
  Graph<T>* g = a.g;
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (long i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] *= pb[i];
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi] {
      const Tensor<T>& go = g->node(oi).grad;
      const Tensor<T>& va = g->node(ai).val;
      const Tensor<T>& vb = g->node(bi).val;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < go.numel(); ++i)
          ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)] * vb.data[static_cast<size_t>(i)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < go.numel(); ++i)
          gb.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)] * va.data[static_cast<size_t>(i)];
      }
    };
  }
  return r;
}

// y = a * c with a compile-time-known constant c (no gradient into c)
template <typename T>
Var<T> scale(Var<T> a, double c) {
  Graph<T>* g = a.g;
  Tensor<T> out = a.val();
  for (auto& x : out.data) x = static_cast<T>(x * c);
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi, c] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += static_cast<T>(go.data[static_cast<size_t>(i)] * c);
    };
  }
  return r;
}

// y = a * s where s is a learnable scalar (1-element tensor)
template <typename T>
Var<T> smul(Var<T> a, Var<T> s) {
  if (s.val().numel() != 1) throw validation_error("smul: scale must be scalar");
  Graph<T>* g = a.g;
  const T sv = s.val().data[0];
  Tensor<T> out = a.val();
  for (auto& x : out.data) x *= sv;
  bool ng = g->node(a.id).needs_grad || g->node(s.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, si = s.id, oi = r.id;
    g->node(oi).back = [g, ai, si, oi, sv] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < go.numel(); ++i)
          ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)] * sv;
      }
      if (g->node(si).needs_grad) {
        const Tensor<T>& va = g->node(ai).val;
        T acc = T(0);
        for (long i = 0; i < go.numel(); ++i)
          acc += go.data[static_cast<size_t>(i)] * va.data[static_cast<size_t>(i)];
        g->grad_buf(si).data[0] += acc;
      }
    };
  }
  return r;
}

template <typename T, typename Fwd, typename Drv>
Var<T> unary_op(Var<T> a, Fwd f, Drv dfdy, const char*) {
  // dfdy receives (x, y) and returns dy/dx; many activations are cheapest in
  // terms of their own output y.
  Graph<T>* g = a.g;
  Tensor<T> out = a.val();
  for (auto& x : out.data) x = f(x);
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi, dfdy] {
      const Tensor<T>& go = g->node(oi).grad;
      const Tensor<T>& vx = g->node(ai).val;
      const Tensor<T>& vy = g->node(oi).val;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] +=
            go.data[static_cast<size_t>(i)] * dfdy(vx.data[static_cast<size_t>(i)], vy.data[static_cast<size_t>(i)]);
    };
  }
  return r;
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

// Sigmoid clamped into the open interval: float saturates to exactly 0/1 for
// |x| beyond ~17, which would break the strict (0,1) range contract on the
// attention maps. Clamped region has zero derivative.
template <typename T>
Var<T> gate_sigmoid(Var<T> a) {
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return unary_op(
      a,
      [lo, hi](T x) {
        T y = T(1) / (T(1) + std::exp(-x));
        return y < lo ? lo : (y > hi ? hi : y);
      },
      [lo, hi](T, T y) { return (y <= lo || y >= hi) ? T(0) : y * (T(1) - y); }, "gate_sigmoid");
}

template <typename T>
Var<T> tanh_(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); },
      "relu");
}

// exp of a learnable scalar (temperature scales)
template <typename T>
Var<T> exp_scalar(Var<T> s) {
  if (s.val().numel() != 1) throw validation_error("exp_scalar: input must be scalar");
  return unary_op(
      s, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp_scalar");
}

// ----- matmul family -----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
    throw validation_error("matmul: bad shapes " + va.shape_str() + " x " + vb.shape_str());
  long m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({m, n});
  gemm_nn(va.ptr(), vb.ptr(), out.ptr(), m, k, n);
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, m, k, n] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad)  // dA += dC * B^T
        gemm_nt(go.ptr(), g->node(bi).val.ptr(), g->grad_buf(ai).ptr(), m, n, k);
      if (g->node(bi).needs_grad)  // dB += A^T * dC
        gemm_tn(g->node(ai).val.ptr(), go.ptr(), g->grad_buf(bi).ptr(), m, k, n);
    };
  }
  return r;
}

// y[m,n] = a[m,k] * b[n,k]^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1))
    throw validation_error("matmul_nt: bad shapes " + va.shape_str() + " x " + vb.shape_str());
  long m = va.dim(0), k = va.dim(1), n = vb.dim(0);
  Graph<T>* g = a.g;
  Tensor<T> out({m, n});
  gemm_nt(va.ptr(), vb.ptr(), out.ptr(), m, k, n);
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, m, k, n] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad)  // dA += dC * B
        gemm_nn(go.ptr(), g->node(bi).val.ptr(), g->grad_buf(ai).ptr(), m, n, k);
      if (g->node(bi).needs_grad)  // dB += dC^T * A
        gemm_tn(go.ptr(), g->node(ai).val.ptr(), g->grad_buf(bi).ptr(), m, n, k);
    };
  }
  return r;
}

// batched matmul over leading dim: y[B,m,n] = a[B,m,k] * b[B,k,n]
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1))
    throw validation_error("bmm: bad shapes " + va.shape_str() + " x " + vb.shape_str());
  long B = va.dim(0), m = va.dim(1), k = va.dim(2), n = vb.dim(2);
  Graph<T>* g = a.g;
  Tensor<T> out({B, m, n});
  for (long t = 0; t < B; ++t)
    gemm_nn(va.ptr() + t * m * k, vb.ptr() + t * k * n, out.ptr() + t * m * n, m, k, n);
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, B, m, k, n] {
      const Tensor<T>& go = g->node(oi).grad;
      for (long t = 0; t < B; ++t) {
        if (g->node(ai).needs_grad)
          gemm_nt(go.ptr() + t * m * n, g->node(bi).val.ptr() + t * k * n,
                  g->grad_buf(ai).ptr() + t * m * k, m, n, k);
        if (g->node(bi).needs_grad)
          gemm_tn(g->node(ai).val.ptr() + t * m * k, go.ptr() + t * m * n,
                  g->grad_buf(bi).ptr() + t * k * n, m, k, n);
      }
    };
  }
  return r;
}

// batched: y[B,m,n] = a[B,m,k] * b[B,n,k]^T
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2))
    throw validation_error("bmm_nt: bad shapes " + va.shape_str() + " x " + vb.shape_str());
  long B = va.dim(0), m = va.dim(1), k = va.dim(2), n = vb.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({B, m, n});
  for (long t = 0; t < B; ++t)
    gemm_nt(va.ptr() + t * m * k, vb.ptr() + t * n * k, out.ptr() + t * m * n, m, k, n);
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, B, m, k, n] {
      const Tensor<T>& go = g->node(oi).grad;
      for (long t = 0; t < B; ++t) {
        if (g->node(ai).needs_grad)  // dA[t] += dC[t] * B[t]
          gemm_nn(go.ptr() + t * m * n, g->node(bi).val.ptr() + t * n * k,
                  g->grad_buf(ai).ptr() + t * m * k, m, n, k);
        if (g->node(bi).needs_grad)  // dB[t] += dC[t]^T * A[t]
          gemm_tn(go.ptr() + t * m * n, g->node(ai).val.ptr() + t * m * k,
                  g->grad_buf(bi).ptr() + t * n * k, m, n, k);
      }
    };
  }
  return r;
}

// y[m,n] = x[m,n] + b[n] broadcast over rows
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vb = b.val();
  if (vx.rank() != 2 || vb.numel() != vx.dim(1)) throw validation_error("add_bias: bad shapes");
  long m = vx.dim(0), n = vx.dim(1);
  Graph<T>* g = x.g;
  Tensor<T> out = vx;
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out.data[static_cast<size_t>(i * n + j)] += vb.data[static_cast<size_t>(j)];
  bool ng = g->node(x.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, xi, bi, oi, m, n] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(xi).needs_grad) {
        Tensor<T>& gx = g->grad_buf(xi);
        for (long i = 0; i < go.numel(); ++i) gx.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < m; ++i)
          for (long j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += go.data[static_cast<size_t>(i * n + j)];
      }
    };
  }
  return r;
}

template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

// ----- shape ops -----

template <typename T>
Var<T> reshape(Var<T> a, std::vector<long> shape) {
  if (Tensor<T>::numel_of(shape) != a.val().numel())
    throw validation_error("reshape: numel mismatch");
  Graph<T>* g = a.g;
  Tensor<T> out(std::move(shape), a.val().data);
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < go.numel(); ++i) ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
    };
  }
  return r;
}

template <typename T>
Var<T> transpose2(Var<T> a) {
  const Tensor<T>& va = a.val();
  if (va.rank() != 2) throw validation_error("transpose2: rank must be 2");
  long m = va.dim(0), n = va.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({n, m});
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out.data[static_cast<size_t>(j * m + i)] = va.data[static_cast<size_t>(i * n + j)];
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi, m, n] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j)
          ga.data[static_cast<size_t>(i * n + j)] += go.data[static_cast<size_t>(j * m + i)];
    };
  }
  return r;
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1))
    throw validation_error("concat_rows: bad shapes");
  long ma = va.dim(0), mb = vb.dim(0), n = va.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({ma + mb, n});
  std::copy(va.data.begin(), va.data.end(), out.data.begin());
  std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + static_cast<long>(ma * n));
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, ma, mb, n] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < ma * n; ++i) ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < mb * n; ++i)
          gb.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(ma * n + i)];
      }
    };
  }
  return r;
}

template <typename T>
Var<T> slice_rows(Var<T> a, long r0, long r1) {
  const Tensor<T>& va = a.val();
  if (va.rank() != 2 || r0 < 0 || r1 > va.dim(0) || r0 >= r1)
    throw validation_error("slice_rows: bad range");
  long n = va.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({r1 - r0, n});
  std::copy(va.data.begin() + r0 * n, va.data.begin() + r1 * n, out.data.begin());
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi, r0, n] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(r0 * n + i)] += go.data[static_cast<size_t>(i)];
    };
  }
  return r;
}

template <typename T>
Var<T> row(Var<T> a, long i) {
  return slice_rows(a, i, i + 1);
}

template <typename T>
Var<T> slice_cols(Var<T> a, long c0, long c1) {
  const Tensor<T>& va = a.val();
  if (va.rank() != 2 || c0 < 0 || c1 > va.dim(1) || c0 >= c1)
    throw validation_error("slice_cols: bad range");
  long m = va.dim(0), n = va.dim(1), w = c1 - c0;
  Graph<T>* g = a.g;
  Tensor<T> out({m, w});
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < w; ++j)
      out.data[static_cast<size_t>(i * w + j)] = va.data[static_cast<size_t>(i * n + c0 + j)];
  bool ng = g->node(a.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, oi = r.id;
    g->node(oi).back = [g, ai, oi, m, n, w, c0] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& ga = g->grad_buf(ai);
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < w; ++j)
          ga.data[static_cast<size_t>(i * n + c0 + j)] += go.data[static_cast<size_t>(i * w + j)];
    };
  }
  return r;
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0))
    throw validation_error("concat_cols: bad shapes");
  long m = va.dim(0), na = va.dim(1), nb = vb.dim(1);
  Graph<T>* g = a.g;
  Tensor<T> out({m, na + nb});
  for (long i = 0; i < m; ++i) {
    std::copy(va.data.begin() + i * na, va.data.begin() + (i + 1) * na,
              out.data.begin() + i * (na + nb));
    std::copy(vb.data.begin() + i * nb, vb.data.begin() + (i + 1) * nb,
              out.data.begin() + i * (na + nb) + na);
  }
  bool ng = g->node(a.id).needs_grad || g->node(b.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int ai = a.id, bi = b.id, oi = r.id;
    g->node(oi).back = [g, ai, bi, oi, m, na, nb] {
      const Tensor<T>& go = g->node(oi).grad;
      long n = na + nb;
      if (g->node(ai).needs_grad) {
        Tensor<T>& ga = g->grad_buf(ai);
        for (long i = 0; i < m; ++i)
          for (long j = 0; j < na; ++j)
            ga.data[static_cast<size_t>(i * na + j)] += go.data[static_cast<size_t>(i * n + j)];
      }
      if (g->node(bi).needs_grad) {
        Tensor<T>& gb = g->grad_buf(bi);
        for (long i = 0; i < m; ++i)
          for (long j = 0; j < nb; ++j)
            gb.data[static_cast<size_t>(i * nb + j)] += go.data[static_cast<size_t>(i * n + na + j)];
      }
    };
  }
  return r;
}

// prepend the same rows p[n,D] to every frame of x[T,S,D] -> [T,n+S,D]
template <typename T>
Var<T> prepend_rows3(Var<T> p, Var<T> x) {
  const Tensor<T>& vp = p.val();
  const Tensor<T>& vx = x.val();
  if (vp.rank() != 2 || vx.rank() != 3 || vp.dim(1) != vx.dim(2))
    throw validation_error("prepend_rows3: bad shapes " + vp.shape_str() + " + " + vx.shape_str());
  long n = vp.dim(0), Tn = vx.dim(0), S = vx.dim(1), D = vx.dim(2);
  Graph<T>* g = p.g;
  Tensor<T> out({Tn, n + S, D});
  for (long t = 0; t < Tn; ++t) {
    std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + t * (n + S) * D);
    std::copy(vx.data.begin() + t * S * D, vx.data.begin() + (t + 1) * S * D,
              out.data.begin() + t * (n + S) * D + n * D);
  }
  bool ng = g->node(p.id).needs_grad || g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int pi = p.id, xi = x.id, oi = r.id;
    g->node(oi).back = [g, pi, xi, oi, n, Tn, S, D] {
      const Tensor<T>& go = g->node(oi).grad;
      if (g->node(pi).needs_grad) {
        Tensor<T>& gp = g->grad_buf(pi);
        for (long t = 0; t < Tn; ++t)
          for (long i = 0; i < n * D; ++i)
            gp.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(t * (n + S) * D + i)];
      }
      if (g->node(xi).needs_grad) {
        Tensor<T>& gx = g->grad_buf(xi);
        for (long t = 0; t < Tn; ++t)
          for (long i = 0; i < S * D; ++i)
            gx.data[static_cast<size_t>(t * S * D + i)] +=
                go.data[static_cast<size_t>(t * (n + S) * D + n * D + i)];
      }
    };
  }
  return r;
}

// drop the first n rows of every frame: x[T,S,D] -> [T,S-n,D]
template <typename T>
Var<T> drop_rows3(Var<T> x, long n) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 3 || n < 0 || n >= vx.dim(1)) throw validation_error("drop_rows3: bad count");
  long Tn = vx.dim(0), S = vx.dim(1), D = vx.dim(2), R = S - n;
  Graph<T>* g = x.g;
  Tensor<T> out({Tn, R, D});
  for (long t = 0; t < Tn; ++t)
    std::copy(vx.data.begin() + (t * S + n) * D, vx.data.begin() + (t + 1) * S * D,
              out.data.begin() + t * R * D);
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, n, Tn, S, D, R] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long t = 0; t < Tn; ++t)
        for (long i = 0; i < R * D; ++i)
          gx.data[static_cast<size_t>((t * S + n) * D + i)] += go.data[static_cast<size_t>(t * R * D + i)];
    };
  }
  return r;
}

// ----- reductions / broadcasts -----

// mean over rows r0.. of every frame: x[T,S,D] -> [T,D]
template <typename T>
Var<T> pool_rows3(Var<T> x, long r0 = 0) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 3 || r0 < 0 || r0 >= vx.dim(1)) throw validation_error("pool_rows3: bad range");
  long Tn = vx.dim(0), S = vx.dim(1), D = vx.dim(2), R = S - r0;
  Graph<T>* g = x.g;
  Tensor<T> out({Tn, D});
  for (long t = 0; t < Tn; ++t)
    for (long s = r0; s < S; ++s)
      for (long d = 0; d < D; ++d)
        out.data[static_cast<size_t>(t * D + d)] += vx.data[static_cast<size_t>((t * S + s) * D + d)];
  for (auto& v : out.data) v /= static_cast<T>(R);
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, Tn, S, D, r0, R] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long t = 0; t < Tn; ++t)
        for (long s = r0; s < S; ++s)
          for (long d = 0; d < D; ++d)
            gx.data[static_cast<size_t>((t * S + s) * D + d)] +=
                go.data[static_cast<size_t>(t * D + d)] / static_cast<T>(R);
    };
  }
  return r;
}

// mean over frames and rows r0..: x[T,S,D] -> [1,D]
template <typename T>
Var<T> pool_all3(Var<T> x, long r0 = 0) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 3 || r0 < 0 || r0 >= vx.dim(1)) throw validation_error("pool_all3: bad range");
  long Tn = vx.dim(0), S = vx.dim(1), D = vx.dim(2);
  long cnt = Tn * (S - r0);
  Graph<T>* g = x.g;
  Tensor<T> out({1, D});
  for (long t = 0; t < Tn; ++t)
    for (long s = r0; s < S; ++s)
      for (long d = 0; d < D; ++d)
        out.data[static_cast<size_t>(d)] += vx.data[static_cast<size_t>((t * S + s) * D + d)];
  for (auto& v : out.data) v /= static_cast<T>(cnt);
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, Tn, S, D, r0, cnt] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long t = 0; t < Tn; ++t)
        for (long s = r0; s < S; ++s)
          for (long d = 0; d < D; ++d)
            gx.data[static_cast<size_t>((t * S + s) * D + d)] +=
                go.data[static_cast<size_t>(d)] / static_cast<T>(cnt);
    };
  }
  return r;
}

// mean over rows of a rank-2 tensor: x[m,n] -> [1,n]
template <typename T>
Var<T> mean_rows(Var<T> x) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 2) throw validation_error("mean_rows: rank must be 2");
  long m = vx.dim(0), n = vx.dim(1);
  Graph<T>* g = x.g;
  Tensor<T> out({1, n});
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out.data[static_cast<size_t>(j)] += vx.data[static_cast<size_t>(i * n + j)];
  for (auto& v : out.data) v /= static_cast<T>(m);
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, m, n] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j)
          gx.data[static_cast<size_t>(i * n + j)] += go.data[static_cast<size_t>(j)] / static_cast<T>(m);
    };
  }
  return r;
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  const Tensor<T>& vx = x.val();
  long n = vx.numel();
  if (n == 0) throw validation_error("mean_all: empty tensor");
  Graph<T>* g = x.g;
  Tensor<T> out({1});
  T acc = T(0);
  for (long i = 0; i < n; ++i) acc += vx.data[static_cast<size_t>(i)];
  out.data[0] = acc / static_cast<T>(n);
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, n] {
      const T go = g->node(oi).grad.data[0];
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < n; ++i) gx.data[static_cast<size_t>(i)] += go / static_cast<T>(n);
    };
  }
  return r;
}

// expand vector v along one axis of a [T,S,C] block; backward sums over the
// other two axes. axis: 0 -> v has T entries, 1 -> S entries, 2 -> C entries.
template <typename T>
Var<T> broadcast3(Var<T> v, int axis, long Tn, long S, long C) {
  const Tensor<T>& vv = v.val();
  long want = axis == 0 ? Tn : axis == 1 ? S : C;
  if (vv.numel() != want)
    throw validation_error("broadcast3: vector length " + std::to_string(vv.numel()) +
                           " does not match axis extent " + std::to_string(want));
  Graph<T>* g = v.g;
  Tensor<T> out({Tn, S, C});
  for (long t = 0; t < Tn; ++t)
    for (long s = 0; s < S; ++s)
      for (long c = 0; c < C; ++c) {
        long idx = axis == 0 ? t : axis == 1 ? s : c;
        out.data[static_cast<size_t>((t * S + s) * C + c)] = vv.data[static_cast<size_t>(idx)];
      }
  bool ng = g->node(v.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int vi = v.id, oi = r.id;
    g->node(oi).back = [g, vi, oi, axis, Tn, S, C] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gv = g->grad_buf(vi);
      for (long t = 0; t < Tn; ++t)
        for (long s = 0; s < S; ++s)
          for (long c = 0; c < C; ++c) {
            long idx = axis == 0 ? t : axis == 1 ? s : c;
            gv.data[static_cast<size_t>(idx)] += go.data[static_cast<size_t>((t * S + s) * C + c)];
          }
    };
  }
  return r;
}

// ----- softmax / log-sum-exp / normalize -----

// softmax over the last axis, rank 2 or 3
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() < 2) throw validation_error("softmax_lastdim: rank must be >= 2");
  long n = vx.dim(vx.rank() - 1);
  long rows = vx.numel() / n;
  Graph<T>* g = x.g;
  Tensor<T> out = vx;
  for (long i = 0; i < rows; ++i) {
    T* p = out.ptr() + i * n;
    T mx = p[0];
    for (long j = 1; j < n; ++j) mx = std::max(mx, p[j]);
    T sum = T(0);
    for (long j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    for (long j = 0; j < n; ++j) p[j] /= sum;
  }
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, rows, n] {
      const Tensor<T>& go = g->node(oi).grad;
      const Tensor<T>& y = g->node(oi).val;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < rows; ++i) {
        const T* gp = go.ptr() + i * n;
        const T* yp = y.ptr() + i * n;
        T dot = T(0);
        for (long j = 0; j < n; ++j) dot += gp[j] * yp[j];
        T* xp = gx.ptr() + i * n;
        for (long j = 0; j < n; ++j) xp[j] += (gp[j] - dot) * yp[j];
      }
    };
  }
  return r;
}

// stable log(sum(exp(row))): x[m,n] -> [m,1]
template <typename T>
Var<T> logsumexp_rows(Var<T> x) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 2) throw validation_error("logsumexp_rows: rank must be 2");
  long m = vx.dim(0), n = vx.dim(1);
  Graph<T>* g = x.g;
  Tensor<T> out({m, 1});
  for (long i = 0; i < m; ++i) {
    const T* p = vx.ptr() + i * n;
    T mx = p[0];
    for (long j = 1; j < n; ++j) mx = std::max(mx, p[j]);
    T sum = T(0);
    for (long j = 0; j < n; ++j) sum += std::exp(p[j] - mx);
    out.data[static_cast<size_t>(i)] = mx + std::log(sum);
  }
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, m, n] {
      const Tensor<T>& go = g->node(oi).grad;
      const Tensor<T>& y = g->node(oi).val;
      const Tensor<T>& vx2 = g->node(xi).val;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < m; ++i) {
        const T gi = go.data[static_cast<size_t>(i)];
        const T yi = y.data[static_cast<size_t>(i)];
        const T* p = vx2.ptr() + i * n;
        T* xp = gx.ptr() + i * n;
        for (long j = 0; j < n; ++j) xp[j] += gi * std::exp(p[j] - yi);
      }
    };
  }
  return r;
}

// diagonal of a square matrix: x[m,m] -> [m,1]
template <typename T>
Var<T> take_diag(Var<T> x) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 2 || vx.dim(0) != vx.dim(1)) throw validation_error("take_diag: not square");
  long m = vx.dim(0);
  Graph<T>* g = x.g;
  Tensor<T> out({m, 1});
  for (long i = 0; i < m; ++i) out.data[static_cast<size_t>(i)] = vx.data[static_cast<size_t>(i * m + i)];
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, m] {
      const Tensor<T>& go = g->node(oi).grad;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < m; ++i)
        gx.data[static_cast<size_t>(i * m + i)] += go.data[static_cast<size_t>(i)];
    };
  }
  return r;
}

// L2-normalize each row; rows with norm below eps are divided by eps instead
// (degenerate input guard; increments the warning counter).
template <typename T>
Var<T> l2normalize_rows(Var<T> x, T eps = T(1e-12)) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 2) throw validation_error("l2normalize_rows: rank must be 2");
  long m = vx.dim(0), n = vx.dim(1);
  Graph<T>* g = x.g;
  Tensor<T> out = vx;
  std::vector<T> norms(static_cast<size_t>(m));
  for (long i = 0; i < m; ++i) {
    T* p = out.ptr() + i * n;
    T sq = T(0);
    for (long j = 0; j < n; ++j) sq += p[j] * p[j];
    T nr = std::sqrt(sq);
    if (nr < eps) {
      nr = eps;
      warning_counters::normalization_floor()++;
    }
    norms[static_cast<size_t>(i)] = nr;
    for (long j = 0; j < n; ++j) p[j] /= nr;
  }
  bool ng = g->node(x.id).needs_grad;
  auto r = g->push(std::move(out), ng, nullptr);
  if (detail::want_back(g, ng)) {
    int xi = x.id, oi = r.id;
    g->node(oi).back = [g, xi, oi, m, n, norms, eps] {
      const Tensor<T>& go = g->node(oi).grad;
      const Tensor<T>& y = g->node(oi).val;
      Tensor<T>& gx = g->grad_buf(xi);
      for (long i = 0; i < m; ++i) {
        const T* gp = go.ptr() + i * n;
        const T* yp = y.ptr() + i * n;
        T* xp = gx.ptr() + i * n;
        const T nr = norms[static_cast<size_t>(i)];
        // floored rows: y = x / eps exactly, jacobian is I/eps
        bool floored = false;
        {
          T sq = T(0);
          const Tensor<T>& vx2 = g->node(xi).val;
          const T* p = vx2.ptr() + i * n;
          for (long j = 0; j < n; ++j) sq += p[j] * p[j];
          floored = std::sqrt(sq) < eps;
        }
        if (floored) {
          for (long j = 0; j < n; ++j) xp[j] += gp[j] / nr;
        } else {
          T dot = T(0);
          for (long j = 0; j < n; ++j) dot += gp[j] * yp[j];
          for (long j = 0; j < n; ++j) xp[j] += (gp[j] - dot * yp[j]) / nr;
        }
      }
    };
  }
  return r;
}

// y[T,S,N] = x[T,S,K] * w[K,N], weight broadcast over frames. Composite of
// certified primitives (reshape + matmul), so it needs no backward of its own.
template <typename T>
Var<T> mat3(Var<T> x, Var<T> w) {
  const Tensor<T>& vx = x.val();
  if (vx.rank() != 3 || w.val().rank() != 2 || vx.dim(2) != w.val().dim(0))
    throw validation_error("mat3: bad shapes " + vx.shape_str() + " x " + w.val().shape_str());
  long Tn = vx.dim(0), S = vx.dim(1), K = vx.dim(2), N = w.val().dim(1);
  return reshape(matmul(reshape(x, {Tn * S, K}), w), {Tn, S, N});
}

}  // namespace phpav

#endif
