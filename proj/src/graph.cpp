#include "inca/graph.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace inca {

namespace {

template <typename T>
void check_same(const BasicTensor<T>& a, const BasicTensor<T>& b,
                const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimension,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
}

template <typename T>
BasicTensor<T> gemm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out({a.rows(), b.cols()});
  kernels::gemm(a.ptr(), b.ptr(), out.ptr(), a.rows(), a.cols(), b.cols());
  return out;
}

template <typename T>
T sigmoid(T u) {
  if (u >= T(0)) return T(1) / (T(1) + std::exp(-u));
  const T e = std::exp(u);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  require(v.id < nodes_.size(), ErrorKind::kRange, "invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  require(v.id < nodes_.size(), ErrorKind::kRange, "invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::push(TensorT value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::constant(const TensorT& t) {
  Node n;
  n.borrowed = &t;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::constant(TensorT&& t) {
  return push(std::move(t), false, nullptr);
}

template <typename T>
Var Graph<T>::param(const TensorT& t) {
  Node n;
  n.borrowed = &t;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::param(TensorT&& t) {
  return push(std::move(t), true, nullptr);
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
T Graph<T>::scalar(Var v) const {
  const auto& t = value(v);
  require(t.size() == 1, ErrorKind::kDimension,
          "scalar(): tensor has shape " + shape_str(t.shape()));
  return t[0];
}

template <typename T>
const BasicTensor<T>* Graph<T>::grad(Var v) const {
  const auto& n = node(v);
  return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
BasicTensor<T> Graph<T>::grad_or_zero(Var v) const {
  const auto& n = node(v);
  if (n.has_grad) return n.grad;
  return TensorT(n.value().shape());
}

template <typename T>
BasicTensor<T>& Graph<T>::grad_buffer(Var v) {
  auto& n = node(v);
  if (!n.has_grad) {
    n.grad = TensorT(n.value().shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Graph<T>::accumulate(Var v, const TensorT& g) {
  auto& buf = grad_buffer(v);
  T* dst = buf.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0, n = buf.size(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void Graph<T>::backward(Var loss) {
  auto& root = node(loss);
  require(root.value().size() == 1, ErrorKind::kDimension,
          "backward(): loss must be a scalar, got shape " +
              shape_str(root.value().shape()));
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    // The callback only touches parents, which precede this node.
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.cols() == bv.rows(), ErrorKind::kDimension,
          "matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
              shape_str(bv.shape()));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(gemm(av, bv), rg, [a, b](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) g.accumulate(a, gemm(go, transposed(g.value(b))));
    if (g.requires_grad(b)) g.accumulate(b, gemm(transposed(g.value(a)), go));
  });
}

template <typename T>
Var Graph<T>::matmul_nt(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.cols() == bv.cols(), ErrorKind::kDimension,
          "matmul_nt: inner dimensions differ, " + shape_str(av.shape()) +
              " x " + shape_str(bv.shape()) + "^T");
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(gemm(av, transposed(bv)), rg, [a, b](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) g.accumulate(a, gemm(go, g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, gemm(transposed(go), g.value(a)));
  });
}

template <typename T>
Var Graph<T>::transpose(Var a) {
  return push(transposed(value(a)), requires_grad(a),
              [a](Graph& g, const TensorT& go) { g.accumulate(a, transposed(go)); });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  check_same(av, bv, "add");
  TensorT out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) g.accumulate(a, go);
    if (g.requires_grad(b)) g.accumulate(b, go);
  });
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  check_same(av, bv, "sub");
  TensorT out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) g.accumulate(a, go);
    if (g.requires_grad(b)) {
      auto& buf = g.grad_buffer(b);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] -= go[i];
    }
  });
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  check_same(av, bv, "mul");
  TensorT out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& g, const TensorT& go) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      TensorT da(av.shape());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = go[i] * bv[i];
      g.accumulate(a, da);
    }
    if (g.requires_grad(b)) {
      TensorT db(bv.shape());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = go[i] * av[i];
      g.accumulate(b, db);
    }
  });
}

template <typename T>
Var Graph<T>::scale(Var a, T s) {
  TensorT out = value(a);
  for (auto& v : out.data()) v *= s;
  return push(std::move(out), requires_grad(a), [a, s](Graph& g, const TensorT& go) {
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += go[i] * s;
  });
}

template <typename T>
Var Graph<T>::add_row(Var a, Var row) {
  const auto& av = value(a);
  const auto& rv = value(row);
  require(rv.size() == av.cols(), ErrorKind::kDimension,
          "add_row: row of shape " + shape_str(rv.shape()) +
              " does not broadcast over " + shape_str(av.shape()));
  TensorT out = av;
  const std::size_t p = av.rows(), q = av.cols();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] += rv[j];
  const bool rg = requires_grad(a) || requires_grad(row);
  return push(std::move(out), rg, [a, row, p, q](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) g.accumulate(a, go);
    if (g.requires_grad(row)) {
      auto& buf = g.grad_buffer(row);
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) buf[j] += go[i * q + j];
    }
  });
}

template <typename T>
Var Graph<T>::gelu(Var a) {
  // tanh approximation
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto& av = value(a);
  TensorT out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  return push(std::move(out), requires_grad(a), [a](Graph& g, const TensorT& go) {
    const auto& av = g.value(a);
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T x = av[i];
      const T th = std::tanh(kC * (x + kA * x * x * x));
      const T dth = (T(1) - th * th) * kC * (T(1) + T(3) * kA * x * x);
      buf[i] += go[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * dth);
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

template <typename T>
Var Graph<T>::softmax_rows(Var a) {
  const auto& av = value(a);
  const std::size_t p = av.rows(), q = av.cols();
  TensorT out(av.shape());
  for (std::size_t i = 0; i < p; ++i) {
    const T* x = av.ptr() + i * q;
    T* y = out.ptr() + i * q;
    T m = q ? x[0] : T(0);
    for (std::size_t j = 1; j < q; ++j) m = std::max(m, x[j]);
    T s = T(0);
    for (std::size_t j = 0; j < q; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (std::size_t j = 0; j < q; ++j) y[j] /= s;
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), requires_grad(a), [a, self, p, q](Graph& g, const TensorT& go) {
    const auto& y = g.value(self);
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < p; ++i) {
      const T* yr = y.ptr() + i * q;
      const T* gr = go.ptr() + i * q;
      T dot = T(0);
      for (std::size_t j = 0; j < q; ++j) dot += gr[j] * yr[j];
      T* br = buf.ptr() + i * q;
      for (std::size_t j = 0; j < q; ++j) br[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var Graph<T>::layer_norm(Var a, Var gamma, Var beta, T eps) {
  const auto& av = value(a);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  const std::size_t p = av.rows(), d = av.cols();
  require(d >= 1, ErrorKind::kDimension, "layer_norm: empty last axis");
  require(gv.size() == d && bv.size() == d, ErrorKind::kDimension,
          "layer_norm: affine parameters must have length " + std::to_string(d));

  TensorT out(av.shape());
  TensorT xhat(av.shape());
  std::vector<T> rstd(p);
  for (std::size_t i = 0; i < p; ++i) {
    const T* x = av.ptr() + i * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= T(d);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (x[j] - mean) * r;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  const bool rg = requires_grad(a) || requires_grad(gamma) || requires_grad(beta);
  return push(std::move(out), rg,
              [a, gamma, beta, p, d, xhat = std::move(xhat), rstd = std::move(rstd)](
                  Graph& g, const TensorT& go) {
                const auto& gv = g.value(gamma);
                if (g.requires_grad(a)) {
                  auto& buf = g.grad_buffer(a);
                  std::vector<T> dh(d);
                  for (std::size_t i = 0; i < p; ++i) {
                    T mean_dh = T(0), mean_dh_h = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                      dh[j] = go[i * d + j] * gv[j];
                      mean_dh += dh[j];
                      mean_dh_h += dh[j] * xhat[i * d + j];
                    }
                    mean_dh /= T(d);
                    mean_dh_h /= T(d);
                    for (std::size_t j = 0; j < d; ++j)
                      buf[i * d + j] +=
                          rstd[i] * (dh[j] - mean_dh - xhat[i * d + j] * mean_dh_h);
                  }
                }
                if (g.requires_grad(gamma)) {
                  auto& buf = g.grad_buffer(gamma);
                  for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                      buf[j] += go[i * d + j] * xhat[i * d + j];
                }
                if (g.requires_grad(beta)) {
                  auto& buf = g.grad_buffer(beta);
                  for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < d; ++j) buf[j] += go[i * d + j];
                }
              });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename T>
Var Graph<T>::mean_rows(Var a) {
  const auto& av = value(a);
  const std::size_t p = av.rows(), q = av.cols();
  require(p >= 1, ErrorKind::kDimension, "mean_pool: cannot pool zero rows");
  TensorT out({1, q});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[j] += av[i * q + j];
  for (auto& v : out.data()) v /= T(p);
  return push(std::move(out), requires_grad(a), [a, p, q](Graph& g, const TensorT& go) {
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) buf[i * q + j] += go[j] / T(p);
  });
}

template <typename T>
Var Graph<T>::row_dot(Var a, Var w) {
  const auto& av = value(a);
  const auto& wv = value(w);
  check_same(av, wv, "row_dot");
  const std::size_t p = av.rows(), q = av.cols();
  TensorT out({1, p});
  for (std::size_t i = 0; i < p; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < q; ++j) s += av[i * q + j] * wv[i * q + j];
    out[i] = s;
  }
  const bool rg = requires_grad(a) || requires_grad(w);
  return push(std::move(out), rg, [a, w, p, q](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) {
      const auto& wv = g.value(w);
      auto& buf = g.grad_buffer(a);
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) buf[i * q + j] += go[i] * wv[i * q + j];
    }
    if (g.requires_grad(w)) {
      const auto& av = g.value(a);
      auto& buf = g.grad_buffer(w);
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) buf[i * q + j] += go[i] * av[i * q + j];
    }
  });
}

template <typename T>
Var Graph<T>::sum(Var a) {
  const auto& av = value(a);
  T s = T(0);
  for (T v : av.data()) s += v;
  return push(TensorT({1, 1}, {s}), requires_grad(a), [a](Graph& g, const TensorT& go) {
    auto& buf = g.grad_buffer(a);
    for (auto& v : buf.data()) v += go[0];
  });
}

template <typename T>
Var Graph<T>::add_n(std::span<const Var> terms) {
  require(!terms.empty(), ErrorKind::kDimension, "add_n: no terms");
  TensorT out = value(terms[0]);
  bool rg = requires_grad(terms[0]);
  for (std::size_t k = 1; k < terms.size(); ++k) {
    const auto& tv = value(terms[k]);
    check_same(out, tv, "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i];
    rg = rg || requires_grad(terms[k]);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  return push(std::move(out), rg, [ts = std::move(ts)](Graph& g, const TensorT& go) {
    for (Var t : ts)
      if (g.requires_grad(t)) g.accumulate(t, go);
  });
}

template <typename T>
Var Graph<T>::slice_rows(Var a, std::size_t begin, std::size_t end) {
  const auto& av = value(a);
  require(begin <= end && end <= av.rows(), ErrorKind::kRange,
          "slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") out of " + std::to_string(av.rows()));
  const std::size_t q = av.cols();
  TensorT out({end - begin, q},
              std::vector<T>(av.ptr() + begin * q, av.ptr() + end * q));
  return push(std::move(out), requires_grad(a), [a, begin, end, q](Graph& g, const TensorT& go) {
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < (end - begin) * q; ++i) buf[begin * q + i] += go[i];
  });
}

template <typename T>
Var Graph<T>::slice_cols(Var a, std::size_t begin, std::size_t end) {
  const auto& av = value(a);
  require(begin <= end && end <= av.cols(), ErrorKind::kRange,
          "slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") out of " + std::to_string(av.cols()));
  const std::size_t p = av.rows(), q = av.cols(), w = end - begin;
  TensorT out({p, w});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * q + begin + j];
  return push(std::move(out), requires_grad(a), [a, begin, p, q, w](Graph& g, const TensorT& go) {
    auto& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < w; ++j) buf[i * q + begin + j] += go[i * w + j];
  });
}

template <typename T>
Var Graph<T>::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kDimension, "concat_rows: no parts");
  const std::size_t q = value(parts[0]).cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var v : parts) {
    require(value(v).cols() == q, ErrorKind::kDimension,
            "concat_rows: column counts differ");
    rows += value(v).rows();
    rg = rg || requires_grad(v);
  }
  std::vector<T> data;
  data.reserve(rows * q);
  for (Var v : parts) {
    const auto& pv = value(v);
    data.insert(data.end(), pv.ptr(), pv.ptr() + pv.size());
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(TensorT({rows, q}, std::move(data)), rg,
              [ps = std::move(ps)](Graph& g, const TensorT& go) {
                std::size_t off = 0;
                for (Var v : ps) {
                  const std::size_t n = g.value(v).size();
                  if (g.requires_grad(v)) {
                    auto& buf = g.grad_buffer(v);
                    for (std::size_t i = 0; i < n; ++i) buf[i] += go[off + i];
                  }
                  off += n;
                }
              });
}

template <typename T>
Var Graph<T>::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kDimension, "concat_cols: no parts");
  const std::size_t p = value(parts[0]).rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var v : parts) {
    require(value(v).rows() == p, ErrorKind::kDimension,
            "concat_cols: row counts differ");
    cols += value(v).cols();
    rg = rg || requires_grad(v);
  }
  TensorT out({p, cols});
  std::size_t off = 0;
  for (Var v : parts) {
    const auto& pv = value(v);
    const std::size_t w = pv.cols();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * cols + off + j] = pv[i * w + j];
    off += w;
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(out), rg, [ps = std::move(ps), p, cols](Graph& g, const TensorT& go) {
    std::size_t off = 0;
    for (Var v : ps) {
      const std::size_t w = g.value(v).cols();
      if (g.requires_grad(v)) {
        auto& buf = g.grad_buffer(v);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < w; ++j) buf[i * w + j] += go[i * cols + off + j];
      }
      off += w;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::span<const int> labels) {
  const auto& lv = value(logits);
  const std::size_t b = lv.rows(), c = lv.cols();
  require(labels.size() == b, ErrorKind::kDimension,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(b) + " rows");
  require(b >= 1, ErrorKind::kDimension, "cross_entropy: empty batch");
  TensorT probs(lv.shape());
  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
            ErrorKind::kRange,
            "cross_entropy: label " + std::to_string(labels[i]) +
                " outside [0, " + std::to_string(c) + ")");
    const T* x = lv.ptr() + i * c;
    T m = x[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(x[j] - m);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    total += (m + std::log(s)) - x[labels[i]];
  }
  total /= T(b);
  std::vector<int> ls(labels.begin(), labels.end());
  return push(TensorT({1, 1}, {total}), requires_grad(logits),
              [logits, b, c, probs = std::move(probs), ls = std::move(ls)](
                  Graph& g, const TensorT& go) {
                auto& buf = g.grad_buffer(logits);
                const T s = go[0] / T(b);
                for (std::size_t i = 0; i < b; ++i)
                  for (std::size_t j = 0; j < c; ++j) {
                    const T onehot = static_cast<int>(j) == ls[i] ? T(1) : T(0);
                    buf[i * c + j] += s * (probs[i * c + j] - onehot);
                  }
              });
}

template <typename T>
Var Graph<T>::bce_with_logits(Var logits, const TensorT& targets) {
  const auto& lv = value(logits);
  check_same(lv, targets, "bce_with_logits");
  const std::size_t b = lv.rows();
  require(b >= 1, ErrorKind::kDimension, "bce_with_logits: empty batch");
  T total = T(0);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const T u = lv[i];
    const T t = targets[i];
    require(t == T(0) || t == T(1), ErrorKind::kRange,
            "bce_with_logits: targets must be 0 or 1");
    total += std::max(u, T(0)) - u * t + std::log1p(std::exp(-std::abs(u)));
  }
  total /= T(b);
  return push(TensorT({1, 1}, {total}), requires_grad(logits),
              [logits, b, targets](Graph& g, const TensorT& go) {
                const auto& lv = g.value(logits);
                auto& buf = g.grad_buffer(logits);
                const T s = go[0] / T(b);
                for (std::size_t i = 0; i < lv.size(); ++i)
                  buf[i] += s * (sigmoid(lv[i]) - targets[i]);
              });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace inca
