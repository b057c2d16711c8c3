// SPDX-License-Identifier: Apache-2.0

#include "itclip/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "itclip/kernels.hpp"

namespace itclip {

namespace {

constexpr double kGeluC = 0.7978845608028653728;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void softmax_row(const double* logits, const std::uint8_t* vis, int m, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j) {
    if ((!vis || vis[j]) && logits[j] > mx) mx = logits[j];
  }
  if (!std::isfinite(mx) && mx < 0)
    throw std::domain_error("masked_softmax: no visible entry");
  double z = 0.0;
  for (int j = 0; j < m; ++j) {
    if (!vis || vis[j]) {
      out[j] = std::exp(logits[j] - mx);
      z += out[j];
    } else {
      out[j] = 0.0;
    }
  }
  const double inv = 1.0 / z;
  for (int j = 0; j < m; ++j) out[j] *= inv;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace

std::vector<double> masked_softmax(const std::vector<double>& logits,
                                   const std::vector<std::uint8_t>& visible) {
  if (visible.size() != logits.size())
    throw std::invalid_argument("masked_softmax: mask length mismatch");
  std::vector<double> out(logits.size());
  softmax_row(logits.data(), visible.data(), static_cast<int>(logits.size()), out.data());
  return out;
}

double log_sigmoid_value(double x) {
  return std::fmin(x, 0.0) - std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_neg(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(x));
}

Var Tape::leaf(Tensor value, bool needs_grad) {
  return push(std::move(value), needs_grad);
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.numel() == 0) {
    static thread_local Tensor zeros;
    zeros = Tensor(n.value.shape());
    return zeros;
  }
  return n.grad;
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (v(root).numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  grad_buf(root.id).at(0) = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.back && n.grad.numel() != 0) n.back();
  }
}

// ---- elementwise / shape -------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  check_same_shape(ta, tb, "add");
  Tensor out(ta.shape());
  kernels::active().vadd(out.data(), ta.data(), tb.data(), ta.numel());
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b] {
      const Tensor& g = nodes_[o.id].grad;
      if (needs_grad(a)) kernels::active().axpy(grad_buf(a.id).data(), 1.0, g.data(), g.numel());
      if (needs_grad(b)) kernels::active().axpy(grad_buf(b.id).data(), 1.0, g.data(), g.numel());
    };
  }
  return o;
}

Var Tape::sub(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  check_same_shape(ta, tb, "sub");
  Tensor out(ta.shape());
  kernels::active().vsub(out.data(), ta.data(), tb.data(), ta.numel());
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b] {
      const Tensor& g = nodes_[o.id].grad;
      if (needs_grad(a)) kernels::active().axpy(grad_buf(a.id).data(), 1.0, g.data(), g.numel());
      if (needs_grad(b)) kernels::active().axpy(grad_buf(b.id).data(), -1.0, g.data(), g.numel());
    };
  }
  return o;
}

Var Tape::mul(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  check_same_shape(ta, tb, "mul");
  Tensor out(ta.shape());
  kernels::active().vmul(out.data(), ta.data(), tb.data(), ta.numel());
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b] {
      const Tensor& g = nodes_[o.id].grad;
      const std::size_t n = g.numel();
      if (needs_grad(a)) {
        Tensor& ga = grad_buf(a.id);
        const double* gb_ = g.data();
        const double* tb_ = v(b).data();
        for (std::size_t i = 0; i < n; ++i) ga.at(i) += gb_[i] * tb_[i];
      }
      if (needs_grad(b)) {
        Tensor& gb = grad_buf(b.id);
        const double* g_ = g.data();
        const double* ta_ = v(a).data();
        for (std::size_t i = 0; i < n; ++i) gb.at(i) += g_[i] * ta_[i];
      }
    };
  }
  return o;
}

Var Tape::scale(Var a, double s) {
  const Tensor& ta = v(a);
  Tensor out = ta;
  kernels::active().scale(out.data(), s, out.numel());
  const bool ng = needs_grad(a);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, s] {
      const Tensor& g = nodes_[o.id].grad;
      kernels::active().axpy(grad_buf(a.id).data(), s, g.data(), g.numel());
    };
  }
  return o;
}

Var Tape::add_row_broadcast(Var x, Var vec) {
  const Tensor &tx = v(x), &tv = v(vec);
  if (tx.rank() != 2 || tv.numel() != static_cast<std::size_t>(tx.dim(1)))
    throw std::invalid_argument("add_row_broadcast: shape mismatch");
  const int n = tx.dim(0), d = tx.dim(1);
  Tensor out(tx.shape());
  for (int i = 0; i < n; ++i)
    kernels::active().vadd(out.data() + static_cast<std::size_t>(i) * d,
                           tx.data() + static_cast<std::size_t>(i) * d, tv.data(), d);
  const bool ng = needs_grad(x) || needs_grad(vec);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, x, vec, n, d] {
      const Tensor& g = nodes_[o.id].grad;
      if (needs_grad(x))
        kernels::active().axpy(grad_buf(x.id).data(), 1.0, g.data(), g.numel());
      if (needs_grad(vec)) {
        Tensor& gv = grad_buf(vec.id);
        for (int i = 0; i < n; ++i)
          kernels::active().axpy(gv.data(), 1.0, g.data() + static_cast<std::size_t>(i) * d, d);
      }
    };
  }
  return o;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int d = v(parts[0]).dim(1);
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    if (v(p).rank() != 2 || v(p).dim(1) != d)
      throw std::invalid_argument("concat_rows: column mismatch");
    total += v(p).dim(0);
    ng = ng || needs_grad(p);
  }
  Tensor out({total, d});
  std::size_t off = 0;
  for (Var p : parts) {
    std::memcpy(out.data() + off, v(p).data(), v(p).numel() * sizeof(double));
    off += v(p).numel();
  }
  Var o = push(std::move(out), ng);
  if (ng) {
    std::vector<Var> ps = parts;
    nodes_[o.id].back = [this, o, ps] {
      const Tensor& g = nodes_[o.id].grad;
      std::size_t off2 = 0;
      for (Var p : ps) {
        const std::size_t n = v(p).numel();
        if (needs_grad(p))
          kernels::active().axpy(grad_buf(p.id).data(), 1.0, g.data() + off2, n);
        off2 += n;
      }
    };
  }
  return o;
}

Var Tape::row(Var x, int r) { return gather_rows(x, {r}); }

Var Tape::gather_rows(Var x, std::vector<int> rows) {
  const Tensor& tx = v(x);
  if (tx.rank() != 2) throw std::invalid_argument("gather_rows: rank != 2");
  const int d = tx.dim(1);
  Tensor out({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tx.dim(0))
      throw std::out_of_range("gather_rows: row index out of range");
    std::memcpy(out.data() + i * d, tx.data() + static_cast<std::size_t>(rows[i]) * d,
                sizeof(double) * d);
  }
  const bool ng = needs_grad(x);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, x, rows = std::move(rows), d] {
      const Tensor& g = nodes_[o.id].grad;
      Tensor& gx = grad_buf(x.id);
      for (std::size_t i = 0; i < rows.size(); ++i)
        kernels::active().axpy(gx.data() + static_cast<std::size_t>(rows[i]) * d, 1.0,
                               g.data() + i * d, d);
    };
  }
  return o;
}

Var Tape::embedding_rows(Var table, std::vector<int> ids) {
  return gather_rows(table, std::move(ids));
}

// ---- linear algebra ------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + ta.shape_str() + " * " +
                                tb.shape_str());
  const int r = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({r, n});
  kernels::active().matmul_nn(out.data(), ta.data(), tb.data(), r, k, n);
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b, r, k, n] {
      const Tensor& g = nodes_[o.id].grad;
      if (needs_grad(a))
        kernels::active().matmul_nt(grad_buf(a.id).data(), g.data(), v(b).data(), r, n, k);
      if (needs_grad(b))
        kernels::active().matmul_tn(grad_buf(b.id).data(), v(a).data(), g.data(), k, r, n);
    };
  }
  return o;
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
    throw std::invalid_argument("matmul_nt: shape mismatch " + ta.shape_str() + " * " +
                                tb.shape_str() + "^T");
  const int r = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
  Tensor out({r, n});
  kernels::active().matmul_nt(out.data(), ta.data(), tb.data(), r, k, n);
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b, r, k, n] {
      const Tensor& g = nodes_[o.id].grad;
      if (needs_grad(a))
        kernels::active().matmul_nn(grad_buf(a.id).data(), g.data(), v(b).data(), r, n, k);
      if (needs_grad(b))
        kernels::active().matmul_tn(grad_buf(b.id).data(), g.data(), v(a).data(), n, r, k);
    };
  }
  return o;
}

// ---- nonlinearities ------------------------------------------------------

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor &tx = v(x), &tg = v(gamma), &tb = v(beta);
  if (tx.rank() != 2) throw std::invalid_argument("layer_norm: rank != 2");
  const int n = tx.dim(0), d = tx.dim(1);
  if (tg.numel() != static_cast<std::size_t>(d) || tb.numel() != static_cast<std::size_t>(d))
    throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
  Tensor out(tx.shape());
  Tensor xhat(tx.shape());
  Tensor inv_std({n});
  for (int i = 0; i < n; ++i) {
    const double* xr = tx.data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std.at(i) = is;
    double* xh = xhat.data() + static_cast<std::size_t>(i) * d;
    double* or_ = out.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mu) * is;
      or_[j] = tg.at(j) * xh[j] + tb.at(j);
    }
  }
  const bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  Var o = push(std::move(out), ng);
  nodes_[o.id].aux = std::move(xhat);
  nodes_[o.id].aux2 = std::move(inv_std);
  if (ng) {
    nodes_[o.id].back = [this, o, x, gamma, beta, n, d] {
      const Tensor& g = nodes_[o.id].grad;
      const Tensor& xhat_ = nodes_[o.id].aux;
      const Tensor& istd = nodes_[o.id].aux2;
      const Tensor& tg = v(gamma);
      for (int i = 0; i < n; ++i) {
        const double* gr = g.data() + static_cast<std::size_t>(i) * d;
        const double* xh = xhat_.data() + static_cast<std::size_t>(i) * d;
        if (needs_grad(beta)) {
          kernels::active().axpy(grad_buf(beta.id).data(), 1.0, gr, d);
        }
        if (needs_grad(gamma)) {
          Tensor& gg = grad_buf(gamma.id);
          for (int j = 0; j < d; ++j) gg.at(j) += gr[j] * xh[j];
        }
        if (needs_grad(x)) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = gr[j] * tg.at(j);
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= d;
          m2 /= d;
          const double is = istd.at(i);
          double* gx = grad_buf(x.id).data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            const double dxh = gr[j] * tg.at(j);
            gx[j] += is * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    };
  }
  return o;
}

Var Tape::gelu(Var x) {
  const Tensor& tx = v(x);
  Tensor out(tx.shape());
  Tensor th(tx.shape());  // tanh(u), reused in backward
  const std::size_t n = tx.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double xv = tx.at(i);
    const double u = kGeluC * (xv + kGeluA * xv * xv * xv);
    const double t = std::tanh(u);
    th.at(i) = t;
    out.at(i) = 0.5 * xv * (1.0 + t);
  }
  const bool ng = needs_grad(x);
  Var o = push(std::move(out), ng);
  nodes_[o.id].aux = std::move(th);
  if (ng) {
    nodes_[o.id].back = [this, o, x, n] {
      const Tensor& g = nodes_[o.id].grad;
      const Tensor& th_ = nodes_[o.id].aux;
      const Tensor& tx_ = v(x);
      Tensor& gx = grad_buf(x.id);
      for (std::size_t i = 0; i < n; ++i) {
        const double xv = tx_.at(i);
        const double t = th_.at(i);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * xv * xv);
        gx.at(i) += g.at(i) * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
      }
    };
  }
  return o;
}

Var Tape::masked_softmax_vec(Var logits, std::vector<std::uint8_t> visible) {
  const Tensor& tl = v(logits);
  if (tl.numel() != visible.size())
    throw std::invalid_argument("masked_softmax: mask length mismatch");
  Tensor out(tl.shape());
  softmax_row(tl.data(), visible.data(), static_cast<int>(tl.numel()), out.data());
  const bool ng = needs_grad(logits);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, logits] {
      const Tensor& g = nodes_[o.id].grad;
      const Tensor& w = nodes_[o.id].value;
      Tensor& gl = grad_buf(logits.id);
      const std::size_t n = w.numel();
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += g.at(i) * w.at(i);
      for (std::size_t i = 0; i < n; ++i) gl.at(i) += w.at(i) * (g.at(i) - s);
    };
  }
  return o;
}

Var Tape::log_sigmoid(Var x) {
  const Tensor& tx = v(x);
  if (tx.numel() != 1) throw std::invalid_argument("log_sigmoid: scalar expected");
  Tensor out = Tensor::scalar(log_sigmoid_value(tx.at(0)));
  const bool ng = needs_grad(x);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, x] {
      grad_buf(x.id).at(0) += nodes_[o.id].grad.at(0) * sigmoid_neg(v(x).at(0));
    };
  }
  return o;
}

Var Tape::exp_scalar(Var x) {
  const Tensor& tx = v(x);
  if (tx.numel() != 1) throw std::invalid_argument("exp_scalar: scalar expected");
  Tensor out = Tensor::scalar(std::exp(tx.at(0)));
  const bool ng = needs_grad(x);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, x] {
      grad_buf(x.id).at(0) += nodes_[o.id].grad.at(0) * nodes_[o.id].value.at(0);
    };
  }
  return o;
}

// ---- reductions / scalars ------------------------------------------------

Var Tape::cosine_similarity(Var a, Var b) {
  const Tensor &ta = v(a), &tb = v(b);
  if (ta.numel() != tb.numel())
    throw std::invalid_argument("cosine_similarity: length mismatch");
  const std::size_t n = ta.numel();
  const auto& K = kernels::active();
  const double na = std::sqrt(K.dot(ta.data(), ta.data(), n));
  const double nb = std::sqrt(K.dot(tb.data(), tb.data(), n));
  if (na == 0.0 || nb == 0.0)
    throw std::domain_error("cosine_similarity: zero-norm input");
  const double dp = K.dot(ta.data(), tb.data(), n);
  const double cs = dp / (na * nb);
  const bool ng = needs_grad(a) || needs_grad(b);
  Var o = push(Tensor::scalar(cs), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, a, b, na, nb, cs, n] {
      const double g = nodes_[o.id].grad.at(0);
      const double* pa = v(a).data();
      const double* pb = v(b).data();
      if (needs_grad(a)) {
        Tensor& ga = grad_buf(a.id);
        const double c1 = g / (na * nb);
        const double c2 = g * cs / (na * na);
        for (std::size_t i = 0; i < n; ++i) ga.at(i) += c1 * pb[i] - c2 * pa[i];
      }
      if (needs_grad(b)) {
        Tensor& gb = grad_buf(b.id);
        const double c1 = g / (na * nb);
        const double c2 = g * cs / (nb * nb);
        for (std::size_t i = 0; i < n; ++i) gb.at(i) += c1 * pa[i] - c2 * pb[i];
      }
    };
  }
  return o;
}

Var Tape::weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws) {
  if (xs.size() != ws.size())
    throw std::invalid_argument("weighted_sum: length mismatch");
  double acc = 0.0;
  bool ng = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (v(xs[i]).numel() != 1)
      throw std::invalid_argument("weighted_sum: scalar terms expected");
    acc += ws[i] * v(xs[i]).at(0);
    ng = ng || needs_grad(xs[i]);
  }
  Var o = push(Tensor::scalar(acc), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, xs, ws] {
      const double g = nodes_[o.id].grad.at(0);
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (needs_grad(xs[i])) grad_buf(xs[i].id).at(0) += g * ws[i];
    };
  }
  return o;
}

// ---- attention -----------------------------------------------------------

Var Tape::to_heads(Var x, int heads) {
  const Tensor& tx = v(x);
  if (tx.rank() != 2 || tx.dim(1) % heads != 0)
    throw std::invalid_argument("to_heads: width not divisible by heads");
  const int n = tx.dim(0), d = tx.dim(1), dh = d / heads;
  Tensor out({heads, n, dh});
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      std::memcpy(out.data() + (static_cast<std::size_t>(h) * n + i) * dh,
                  tx.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(h) * dh,
                  sizeof(double) * dh);
  const bool ng = needs_grad(x);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, x, heads, n, d, dh] {
      const Tensor& g = nodes_[o.id].grad;
      Tensor& gx = grad_buf(x.id);
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i)
          kernels::active().axpy(
              gx.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(h) * dh, 1.0,
              g.data() + (static_cast<std::size_t>(h) * n + i) * dh, dh);
    };
  }
  return o;
}

Var Tape::from_heads(Var xh) {
  const Tensor& tx = v(xh);
  if (tx.rank() != 3) throw std::invalid_argument("from_heads: rank != 3");
  const int heads = tx.dim(0), n = tx.dim(1), dh = tx.dim(2), d = heads * dh;
  Tensor out({n, d});
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      std::memcpy(out.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(h) * dh,
                  tx.data() + (static_cast<std::size_t>(h) * n + i) * dh, sizeof(double) * dh);
  const bool ng = needs_grad(xh);
  Var o = push(std::move(out), ng);
  if (ng) {
    nodes_[o.id].back = [this, o, xh, heads, n, d, dh] {
      const Tensor& g = nodes_[o.id].grad;
      Tensor& gx = grad_buf(xh.id);
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i)
          kernels::active().axpy(gx.data() + (static_cast<std::size_t>(h) * n + i) * dh, 1.0,
                                 g.data() + static_cast<std::size_t>(i) * d +
                                     static_cast<std::size_t>(h) * dh,
                                 dh);
    };
  }
  return o;
}

Var Tape::attend(Var qh, Var kh, Var vh, const MaskGrid* visible) {
  const Tensor &tq = v(qh), &tk = v(kh), &tv = v(vh);
  if (tq.rank() != 3 || tk.rank() != 3 || tv.rank() != 3)
    throw std::invalid_argument("attend: head-major rank-3 tensors expected");
  const int heads = tq.dim(0), nq = tq.dim(1), dh = tq.dim(2), m = tk.dim(1);
  if (tk.dim(0) != heads || tv.dim(0) != heads || tk.dim(2) != dh || tv.dim(1) != m ||
      tv.dim(2) != dh)
    throw std::invalid_argument("attend: shape mismatch");
  if (visible && (visible->heads != heads || visible->tokens != m))
    throw std::invalid_argument("attend: mask shape mismatch");

  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& K = kernels::active();
  Tensor out({heads, nq, dh});
  Tensor weights({heads, nq, m});
  std::vector<double> logits(static_cast<std::size_t>(nq) * m);
  for (int h = 0; h < heads; ++h) {
    const double* Q = tq.data() + static_cast<std::size_t>(h) * nq * dh;
    const double* Kd = tk.data() + static_cast<std::size_t>(h) * m * dh;
    const double* Vd = tv.data() + static_cast<std::size_t>(h) * m * dh;
    double* W = weights.data() + static_cast<std::size_t>(h) * nq * m;
    double* O = out.data() + static_cast<std::size_t>(h) * nq * dh;
    std::fill(logits.begin(), logits.end(), 0.0);
    K.matmul_nt(logits.data(), Q, Kd, nq, dh, m);
    K.scale(logits.data(), s, logits.size());
    const std::uint8_t* vis =
        visible ? visible->visible.data() + static_cast<std::size_t>(h) * m : nullptr;
    for (int i = 0; i < nq; ++i)
      softmax_row(logits.data() + static_cast<std::size_t>(i) * m, vis, m,
                  W + static_cast<std::size_t>(i) * m);
    K.matmul_nn(O, W, Vd, nq, m, dh);
  }
  const bool ng = needs_grad(qh) || needs_grad(kh) || needs_grad(vh);
  Var o = push(std::move(out), ng);
  nodes_[o.id].aux = std::move(weights);
  if (ng) {
    nodes_[o.id].back = [this, o, qh, kh, vh, heads, nq, dh, m, s] {
      const auto& K2 = kernels::active();
      const Tensor& g = nodes_[o.id].grad;
      const Tensor& W = nodes_[o.id].aux;
      std::vector<double> dW(static_cast<std::size_t>(nq) * m);
      std::vector<double> dL(static_cast<std::size_t>(nq) * m);
      for (int h = 0; h < heads; ++h) {
        const double* Wh = W.data() + static_cast<std::size_t>(h) * nq * m;
        const double* gO = g.data() + static_cast<std::size_t>(h) * nq * dh;
        const double* Q = v(qh).data() + static_cast<std::size_t>(h) * nq * dh;
        const double* Kd = v(kh).data() + static_cast<std::size_t>(h) * m * dh;
        const double* Vd = v(vh).data() + static_cast<std::size_t>(h) * m * dh;
        // dW = gO V^T
        std::fill(dW.begin(), dW.end(), 0.0);
        K2.matmul_nt(dW.data(), gO, Vd, nq, dh, m);
        if (needs_grad(vh)) {
          double* gV = grad_buf(vh.id).data() + static_cast<std::size_t>(h) * m * dh;
          K2.matmul_tn(gV, Wh, gO, m, nq, dh);
        }
        // softmax backward (masked entries have W == 0, so dL == 0 there)
        for (int i = 0; i < nq; ++i) {
          const double* wr = Wh + static_cast<std::size_t>(i) * m;
          const double* dwr = dW.data() + static_cast<std::size_t>(i) * m;
          double* dlr = dL.data() + static_cast<std::size_t>(i) * m;
          const double dot = K2.dot(dwr, wr, m);
          for (int j = 0; j < m; ++j) dlr[j] = s * wr[j] * (dwr[j] - dot);
        }
        if (needs_grad(qh)) {
          double* gQ = grad_buf(qh.id).data() + static_cast<std::size_t>(h) * nq * dh;
          K2.matmul_nn(gQ, dL.data(), Kd, nq, m, dh);
        }
        if (needs_grad(kh)) {
          double* gK = grad_buf(kh.id).data() + static_cast<std::size_t>(h) * m * dh;
          K2.matmul_tn(gK, dL.data(), Q, m, nq, dh);
        }
      }
    };
  }
  return o;
}

const Tensor& Tape::attention_weights(Var attend_node) const {
  const Node& n = nodes_[attend_node.id];
  if (n.aux.rank() != 3)
    throw std::logic_error("attention_weights: node has no saved weights");
  return n.aux;
}

}  // namespace itclip
