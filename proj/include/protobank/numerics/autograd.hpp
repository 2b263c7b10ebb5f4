#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protobank/error.hpp"
#include "protobank/numerics/tensor.hpp"

// Reverse-mode differentiation over dense tensors. A Tape records every op
// in creation order, which is already a topological order, so backward is a
// single reverse sweep.
namespace protobank::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }
  Var variable(Tensor t) { return push(std::move(t), true, nullptr); }

  // Adds an op result. The backward closure runs only when some input
  // requires a gradient; it reads grad(self) and accumulates into inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward,
             const char* op_name) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name);
    }
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient slot for accumulation, zero-filled on first touch.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  const Tensor* grad_if_any(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.has_grad ? &n.grad : nullptr;
  }

  // Gradient of the last backward() target w.r.t. v; zeros if unreached.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.has_grad ? n.grad : Tensor(n.value.shape);
  }

  void backward(Var loss) {
    if (nodes_[loss.id].value.size() != 1) {
      throw NumericError("backward() needs a scalar loss, got shape " +
                         shape_str(nodes_[loss.id].value.shape));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad_slot(loss.id).data[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient in backward pass");
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Tensor t, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(t), Tensor(), requires_grad, false, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw NumericError(what);
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline Tape& tape_of(const Var& a, const Var& b) {
  require(a.tape == b.tape && a.tape != nullptr, "vars belong to different tapes");
  return *a.tape;
}

// Accumulates g into the gradient of `id` if that node participates.
inline void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_slot(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  Tape& t = detail::tape_of(a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    detail::accumulate(tp, a, g);
    detail::accumulate(tp, b, g);
  }, "add");
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  Tape& t = detail::tape_of(a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    Tensor g = *tp.grad_if_any(self);
    detail::accumulate(tp, a, g);
    for (double& v : g.data) v = -v;
    detail::accumulate(tp, b, g);
  }, "sub");
}

// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  Tape& t = detail::tape_of(a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  }, "mul");
}

inline Var hadamard(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return a.tape->record(std::move(out), {a}, [a = a.id, s](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
  }, "scale");
}

// x[rows, n] + bias[n], broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  Tape& t = detail::tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require(xv.rank() == 2 && bv.rank() == 1 && bv.dim(0) == xv.dim(1),
                  "add_bias: expected [r,n] + [n], got " + shape_str(xv.shape) + " + " +
                      shape_str(bv.shape));
  Tensor out = xv;
  const std::size_t r = xv.dim(0), n = xv.dim(1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv.data[j];
  return t.record(std::move(out), {x, bias}, [x = x.id, b = bias.id, r, n](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    detail::accumulate(tp, x, g);
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) gb.data[j] += g.data[i * n + j];
    }
  }, "add_bias");
}

namespace detail {

// c[m,p] += a[m,n] * b[n,p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c[m,n] += g[m,p] * b[n,p]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    double* ci = c + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double* bk = b + k * p;
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += gi[j] * bk[j];
      ci[k] += s;
    }
  }
}

// c[n,p] += a[m,n]^T * g[m,p]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t n,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    const double* gi = g + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      double* ck = c + k * p;
      for (std::size_t j = 0; j < p; ++j) ck[j] += aik * gi[j];
    }
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                  "matmul: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const std::size_t m = av.dim(0), n = av.dim(1), p = bv.dim(1);
  Tensor out({m, p});
  detail::gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, n, p);
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id, m, n, p](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    if (tp.requires_grad(a)) {
      detail::gemm_nt(g.data.data(), tp.value(b).data.data(), tp.grad_slot(a).data.data(), m, n, p);
    }
    if (tp.requires_grad(b)) {
      detail::gemm_tn(tp.value(a).data.data(), g.data.data(), tp.grad_slot(b).data.data(), m, n, p);
    }
  }, "matmul");
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require(av.rank() == 2, "transpose: expected matrix, got " + shape_str(av.shape));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = av.data[i * c + j];
  return a.tape->record(std::move(out), {a}, [a = a.id, r, c](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga.data[i * c + j] += g.data[j * r + i];
  }, "transpose");
}

inline Var reshape(Var a, Shape shape) {
  detail::require(shape_size(shape) == a.value().size(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  return a.tape->record(std::move(out), {a}, [a = a.id](Tape& tp, std::size_t self) {
    detail::accumulate(tp, a, *tp.grad_if_any(self));
  }, "reshape");
}

// Outer product. Vectors [m],[n] -> [m,n]; row batches [B,m],[B,n] -> [B,m,n].
inline Var outer(Var u, Var v) {
  Tape& t = detail::tape_of(u, v);
  const Tensor& uv = u.value();
  const Tensor& vv = v.value();
  const bool batched = uv.rank() == 2;
  detail::require((uv.rank() == 1 && vv.rank() == 1) ||
                      (batched && vv.rank() == 2 && uv.dim(0) == vv.dim(0)),
                  "outer: incompatible shapes " + shape_str(uv.shape) + " and " + shape_str(vv.shape));
  const std::size_t bsz = batched ? uv.dim(0) : 1;
  const std::size_t m = batched ? uv.dim(1) : uv.dim(0);
  const std::size_t n = batched ? vv.dim(1) : vv.dim(0);
  Tensor out(batched ? Shape{bsz, m, n} : Shape{m, n});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out.data[(b * m + i) * n + j] = uv.data[b * m + i] * vv.data[b * n + j];
  return t.record(std::move(out), {u, v}, [u = u.id, v = v.id, bsz, m, n](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& uv = tp.value(u);
    const Tensor& vv = tp.value(v);
    if (tp.requires_grad(u)) {
      Tensor& gu = tp.grad_slot(u);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t i = 0; i < m; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.data[(b * m + i) * n + j] * vv.data[b * n + j];
          gu.data[b * m + i] += s;
        }
    }
    if (tp.requires_grad(v)) {
      Tensor& gv = tp.grad_slot(v);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t i = 0; i < m; ++i) {
          const double ui = uv.data[b * m + i];
          for (std::size_t j = 0; j < n; ++j) gv.data[b * n + j] += g.data[(b * m + i) * n + j] * ui;
        }
    }
  }, "outer");
}

// 2-D convolution, stride 1, same padding (odd kernel sizes).
// x: [B, C, H, W], kernels: [O, C, KH, KW], bias: [O] -> [B, O, H, W].
inline Var conv2d(Var x, Var kernels, Var bias) {
  Tape& t = detail::tape_of(x, kernels);
  detail::tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  const Tensor& bv = bias.value();
  detail::require(xv.rank() == 4 && kv.rank() == 4 && bv.rank() == 1 && kv.dim(1) == xv.dim(1) &&
                      bv.dim(0) == kv.dim(0) && kv.dim(2) % 2 == 1 && kv.dim(3) % 2 == 1,
                  "conv2d: incompatible shapes " + shape_str(xv.shape) + ", " + shape_str(kv.shape) +
                      ", " + shape_str(bv.shape));
  struct Dims {
    std::size_t B, C, H, W, O, KH, KW;
  };
  const Dims d{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3)};
  const long ph = static_cast<long>(d.KH / 2), pw = static_cast<long>(d.KW / 2);

  // Visits every (output pixel, input pixel, weight) triple inside the padded frame.
  auto sweep = [d, ph, pw](auto&& fn) {
    for (std::size_t b = 0; b < d.B; ++b)
      for (std::size_t o = 0; o < d.O; ++o)
        for (std::size_t c = 0; c < d.C; ++c)
          for (std::size_t ki = 0; ki < d.KH; ++ki)
            for (std::size_t kj = 0; kj < d.KW; ++kj) {
              const long di = static_cast<long>(ki) - ph;
              const long dj = static_cast<long>(kj) - pw;
              const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
              const std::size_t i1 = di > 0 ? d.H - static_cast<std::size_t>(di) : d.H;
              const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
              const std::size_t j1 = dj > 0 ? d.W - static_cast<std::size_t>(dj) : d.W;
              const std::size_t widx = ((o * d.C + c) * d.KH + ki) * d.KW + kj;
              const std::size_t ybase = (b * d.O + o) * d.H * d.W;
              const std::size_t xbase = (b * d.C + c) * d.H * d.W;
              fn(widx, ybase, xbase, i0, i1, j0, j1, di, dj);
            }
  };

  Tensor out({d.B, d.O, d.H, d.W});
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t o = 0; o < d.O; ++o) {
      double* plane = out.data.data() + (b * d.O + o) * d.H * d.W;
      std::fill(plane, plane + d.H * d.W, bv.data[o]);
    }
  sweep([&](std::size_t widx, std::size_t ybase, std::size_t xbase, std::size_t i0, std::size_t i1,
            std::size_t j0, std::size_t j1, long di, long dj) {
    const double w = kv.data[widx];
    for (std::size_t i = i0; i < i1; ++i) {
      double* yrow = out.data.data() + ybase + i * d.W;
      const double* xrow = xv.data.data() + xbase + static_cast<std::size_t>(static_cast<long>(i) + di) * d.W;
      for (std::size_t j = j0; j < j1; ++j) yrow[j] += w * xrow[static_cast<long>(j) + dj];
    }
  });

  return t.record(std::move(out), {x, kernels, bias},
                  [x = x.id, k = kernels.id, bi = bias.id, d, sweep](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& xv = tp.value(x);
    const Tensor& kv = tp.value(k);
    const bool gx = tp.requires_grad(x), gk = tp.requires_grad(k);
    double* dx = gx ? tp.grad_slot(x).data.data() : nullptr;
    double* dk = gk ? tp.grad_slot(k).data.data() : nullptr;
    if (gx || gk) {
      sweep([&](std::size_t widx, std::size_t ybase, std::size_t xbase, std::size_t i0, std::size_t i1,
                std::size_t j0, std::size_t j1, long di, long dj) {
        const double w = kv.data[widx];
        double acc = 0.0;
        for (std::size_t i = i0; i < i1; ++i) {
          const double* grow = g.data.data() + ybase + i * d.W;
          const std::size_t xr = xbase + static_cast<std::size_t>(static_cast<long>(i) + di) * d.W;
          for (std::size_t j = j0; j < j1; ++j) {
            const std::size_t xi = xr + static_cast<std::size_t>(static_cast<long>(j) + dj);
            if (dx) dx[xi] += w * grow[j];
            acc += grow[j] * xv.data[xi];
          }
        }
        if (dk) dk[widx] += acc;
      });
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_slot(bi);
      for (std::size_t b = 0; b < d.B; ++b)
        for (std::size_t o = 0; o < d.O; ++o) {
          const double* plane = g.data.data() + (b * d.O + o) * d.H * d.W;
          double s = 0.0;
          for (std::size_t i = 0; i < d.H * d.W; ++i) s += plane[i];
          gb.data[o] += s;
        }
    }
  }, "conv2d");
}

// [B, C, H, W] -> [B, C], mean over each spatial plane.
inline Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  detail::require(xv.rank() == 4, "global_avg_pool: expected rank 4, got " + shape_str(xv.shape));
  const std::size_t bc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1)});
  for (std::size_t i = 0; i < bc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += xv.data[i * hw + j];
    out.data[i] = s / static_cast<double>(hw);
  }
  return x.tape->record(std::move(out), {x}, [x = x.id, bc, hw](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& gx = tp.grad_slot(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < bc; ++i)
      for (std::size_t j = 0; j < hw; ++j) gx.data[i * hw + j] += g.data[i] * inv;
  }, "global_avg_pool");
}

namespace detail {

// Elementwise op whose derivative is expressed through (input, output).
template <class F, class DF>
Var unary(Var a, F f, DF df, const char* name) {
  Tensor out = a.value();
  for (double& v : out.data) v = f(v);
  return a.tape->record(std::move(out), {a}, [a = a.id, df](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& in = tp.value(a);
    const Tensor& out = tp.value(self);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * df(in.data[i], out.data[i]);
  }, name);
}

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var relu(Var a) {
  return detail::unary(a, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double in, double) { return in > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double v) { return std::tanh(v); },
                       [](double, double out) { return 1.0 - out * out; }, "tanh");
}

inline Var sigmoid(Var a) {
  return detail::unary(a, detail::stable_sigmoid,
                       [](double, double out) { return out * (1.0 - out); }, "sigmoid");
}

// Concatenation along the last axis of two rank-1 or two rank-2 tensors.
inline Var concat(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require(av.rank() == bv.rank() && (av.rank() == 1 || av.rank() == 2) &&
                      (av.rank() == 1 || av.dim(0) == bv.dim(0)),
                  "concat: incompatible shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  const std::size_t rows = av.rank() == 2 ? av.dim(0) : 1;
  const std::size_t na = detail::last_dim(av.shape), nb = detail::last_dim(bv.shape);
  Tensor out(av.rank() == 2 ? Shape{rows, na + nb} : Shape{na + nb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data.data() + r * na, na, out.data.data() + r * (na + nb));
    std::copy_n(bv.data.data() + r * nb, nb, out.data.data() + r * (na + nb) + na);
  }
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id, rows, na, nb](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < na; ++j) ga.data[r * na + j] += g.data[r * (na + nb) + j];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < nb; ++j) gb.data[r * nb + j] += g.data[r * (na + nb) + na + j];
    }
  }, "concat");
}

// Softmax along the last axis.
inline Var softmax(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = detail::last_dim(av.shape);
  detail::require(n > 0, "softmax over empty axis");
  const std::size_t rows = av.size() / n;
  Tensor out = av;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= s;
  }
  return a.tape->record(std::move(out), {a}, [a = a.id, rows, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data.data() + r * n;
      const double* gr = g.data.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) ga.data[r * n + j] += yr[j] * (gr[j] - dot);
    }
  }, "softmax");
}

// Unit-norm rows along the last axis. Rows with (numerically) zero norm map
// to zero and pass no gradient.
inline Var l2_normalize(Var a) {
  constexpr double kMinNorm = 1e-12;
  const Tensor& av = a.value();
  const std::size_t n = detail::last_dim(av.shape);
  const std::size_t rows = n ? av.size() / n : 0;
  Tensor out = av;
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
    norms[r] = std::sqrt(s);
    const double inv = norms[r] > kMinNorm ? 1.0 / norms[r] : 0.0;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
  return a.tape->record(std::move(out), {a}, [a = a.id, rows, n, norms = std::move(norms)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Tensor& g = *tp.grad_if_any(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] <= kMinNorm) continue;
      const double* yr = y.data.data() + r * n;
      const double* gr = g.data.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) ga.data[r * n + j] += (gr[j] - yr[j] * dot) / norms[r];
    }
  }, "l2_normalize");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a = a.id](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const double g = tp.grad_if_any(self)->data[0];
    for (double& v : tp.grad_slot(a).data) v += g;
  }, "sum");
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  detail::require(n > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// Mean binary cross-entropy of probabilities against 0/1 labels.
inline Var bce(Var pred, const std::vector<double>& labels) {
  const Tensor& p = pred.value();
  detail::require(p.size() == labels.size() && !labels.empty(),
                  "bce: " + std::to_string(p.size()) + " predictions vs " +
                      std::to_string(labels.size()) + " labels");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    loss -= labels[i] * std::log(p.data[i]) + (1.0 - labels[i]) * std::log(1.0 - p.data[i]);
  }
  const double n = static_cast<double>(p.size());
  return pred.tape->record(Tensor::scalar(loss / n), {pred}, [a = pred.id, labels, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const double g = tp.grad_if_any(self)->data[0];
    const Tensor& p = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < p.size(); ++i) {
      ga.data[i] += g * (-(labels[i] / p.data[i]) + (1.0 - labels[i]) / (1.0 - p.data[i])) / n;
    }
  }, "bce");
}

// Mean binary cross-entropy evaluated on logits (numerically stable form).
inline Var bce_with_logits(Var logits, const std::vector<double>& labels) {
  const Tensor& z = logits.value();
  detail::require(z.size() == labels.size() && !labels.empty(),
                  "bce_with_logits: " + std::to_string(z.size()) + " logits vs " +
                      std::to_string(labels.size()) + " labels");
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z.data[i];
    loss += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(z.size());
  return logits.tape->record(Tensor::scalar(loss / n), {logits}, [a = logits.id, labels, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const double g = tp.grad_if_any(self)->data[0];
    const Tensor& z = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < z.size(); ++i) {
      ga.data[i] += g * (detail::stable_sigmoid(z.data[i]) - labels[i]) / n;
    }
  }, "bce_with_logits");
}

inline Var mse(Var a, Var b) {
  Var diff = sub(a, b);
  return mean(mul(diff, diff));
}

// Row lookup: table [V, k], indices -> [len(indices), k].
inline Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  detail::require(tv.rank() == 2, "gather_rows: table must be a matrix");
  const std::size_t v = tv.dim(0), k = tv.dim(1);
  Tensor out({indices.size(), k});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    detail::require(indices[r] < v, "gather_rows: index " + std::to_string(indices[r]) + " out of range");
    std::copy_n(tv.data.data() + indices[r] * k, k, out.data.data() + r * k);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(out), {table}, [t = table.id, idx = std::move(idx), k](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(t)) return;
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& gt = tp.grad_slot(t);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < k; ++j) gt.data[idx[r] * k + j] += g.data[r * k + j];
  }, "gather_rows");
}

}  // namespace protobank::ag
