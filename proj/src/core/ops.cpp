#include "omae/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "omae/core/kernels.hpp"

namespace omae {

namespace kp = kernels::parallel;

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Creates the output node; links parents only when recording is on and some
// input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, const char* op, std::initializer_list<Tensor<T>> inputs) {
  Tensor<T> out(std::move(shape));
  auto& n = out.node();
  n.op = op;
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  n.requires_grad = true;
  for (const auto& t : inputs) n.parents.push_back(t.node_ptr());
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, const char* op, const std::vector<Tensor<T>>& inputs) {
  Tensor<T> out(std::move(shape));
  auto& n = out.node();
  n.op = op;
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  n.requires_grad = true;
  for (const auto& t : inputs) n.parents.push_back(t.node_ptr());
  return out;
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

[[noreturn]] void fail(const std::string& msg) { throw ShapeError(msg); }

}  // namespace

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3)
    fail("bmm expects rank-3 operands, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k)
    fail("bmm shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) +
         (trans_b ? "^T" : ""));
  auto out = make_result<T>({batch, m, n}, "bmm", {a, b});
  kp::gemm_batched(batch, false, trans_b, m, n, k, a.values().data(), b.values().data(),
                   out.values().data(), false);
  if (out.requires_grad()) {
    out.node().backward_fn = [batch, m, n, k, trans_b](Node<T>& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      const T* g = self.grad.data();
      if (A.requires_grad) {
        // dA = g * op(B)^T
        if (!trans_b)
          kp::gemm_batched(batch, false, true, m, k, n, g, B.data.data(), A.grad.data(), true);
        else
          kp::gemm_batched(batch, false, false, m, k, n, g, B.data.data(), A.grad.data(), true);
      }
      if (B.requires_grad) {
        if (!trans_b)  // dB = A^T g
          kp::gemm_batched(batch, true, false, k, n, m, A.data.data(), g, B.grad.data(), true);
        else  // dB = g^T A
          kp::gemm_batched(batch, true, false, n, k, m, g, A.data.data(), B.grad.data(), true);
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail("matmul expects matrices, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    fail("matmul inner dimensions differ: " + shape_str(a.shape()) + " * " +
         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_result<T>({m, n}, "matmul", {a, b});
  kp::gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.values().data(),
           false);
  if (out.requires_grad()) {
    out.node().backward_fn = [m, n, k](Node<T>& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      const T* g = self.grad.data();
      if (A.requires_grad)
        kp::gemm(false, true, m, k, n, g, B.data.data(), A.grad.data(), true);
      if (B.requires_grad)
        kp::gemm(true, false, k, n, m, A.data.data(), g, B.grad.data(), true);
    };
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) fail("linear weight must be [out x in], got " + shape_str(weight.shape()));
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.shape().back() != in_f)
    fail("linear input " + shape_str(x.shape()) + " does not match weight " +
         shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_f))
    fail("linear bias " + shape_str(bias.shape()) + " does not match weight " +
         shape_str(weight.shape()));
  const std::size_t rows = x.numel() / in_f;
  Shape shape = x.shape();
  shape.back() = out_f;
  auto out = has_bias ? make_result<T>(shape, "linear", {x, weight, bias})
                      : make_result<T>(shape, "linear", {x, weight});
  T* y = out.values().data();
  kp::gemm(false, true, rows, out_f, in_f, x.values().data(), weight.values().data(), y, false);
  if (has_bias) {
    const T* bv = bias.values().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_f; ++j) y[r * out_f + j] += bv[j];
  }
  if (out.requires_grad()) {
    out.node().backward_fn = [rows, in_f, out_f, has_bias](Node<T>& self) {
      auto& X = *self.parents[0];
      auto& W = *self.parents[1];
      const T* g = self.grad.data();
      if (X.requires_grad)
        kp::gemm(false, false, rows, in_f, out_f, g, W.data.data(), X.grad.data(), true);
      if (W.requires_grad)
        kp::gemm(true, false, out_f, in_f, rows, g, X.data.data(), W.grad.data(), true);
      if (has_bias && self.parents[2]->requires_grad) {
        T* gb = self.parents[2]->grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix)
    fail("add: " + shape_str(bs) + " is not broadcastable to " + shape_str(as));
  const std::size_t nb = b.numel();
  const std::size_t na = a.numel();
  auto out = make_result<T>(as, "add", {a, b});
  T* y = out.values().data();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < na; ++i) y[i] = av[i] + bv[i % nb];
  if (out.requires_grad()) {
    out.node().backward_fn = [na, nb](Node<T>& self) {
      const T* g = self.grad.data();
      if (wants_grad(self, 0)) {
        T* ga = self.parents[0]->grad.data();
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (wants_grad(self, 1)) {
        T* gb = self.parents[1]->grad.data();
        for (std::size_t i = 0; i < na; ++i) gb[i % nb] += g[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail("sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_result<T>(a.shape(), "sub", {a, b});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
  if (out.requires_grad()) {
    out.node().backward_fn = [n](Node<T>& self) {
      const T* g = self.grad.data();
      if (wants_grad(self, 0))
        for (std::size_t i = 0; i < n; ++i) self.parents[0]->grad[i] += g[i];
      if (wants_grad(self, 1))
        for (std::size_t i = 0; i < n; ++i) self.parents[1]->grad[i] -= g[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_result<T>(a.shape(), "mul", {a, b});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (out.requires_grad()) {
    out.node().backward_fn = [n](Node<T>& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      const T* g = self.grad.data();
      if (A.requires_grad)
        for (std::size_t i = 0; i < n; ++i) A.grad[i] += g[i] * B.data[i];
      if (B.requires_grad)
        for (std::size_t i = 0; i < n; ++i) B.grad[i] += g[i] * A.data[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  auto out = make_result<T>(a.shape(), "scale", {a});
  const std::size_t n = a.numel();
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * st;
  if (out.requires_grad()) {
    out.node().backward_fn = [n, st](Node<T>& self) {
      T* ga = self.parents[0]->grad.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * st;
    };
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = make_result<T>(x.shape(), "gelu", {x});
  const std::size_t n = x.numel();
  kp::gelu(x.values().data(), n, out.values().data());
  if (out.requires_grad()) {
    out.node().backward_fn = [n](Node<T>& self) {
      auto& X = *self.parents[0];
      for (std::size_t i = 0; i < n; ++i)
        X.grad[i] += static_cast<T>(self.grad[i] * kernels::gelu_grad_scalar(X.data[i]));
    };
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  const std::size_t d = x.shape().back();
  if (d == 0) fail("layer_norm over an empty dimension");
  if (gamma.numel() != d || beta.numel() != d)
    fail("layer_norm affine parameters must have " + std::to_string(d) + " entries");
  const std::size_t rows = x.numel() / d;
  auto out = make_result<T>(x.shape(), "layer_norm", {x, gamma, beta});
  std::vector<T> xhat(x.numel()), mean(rows), rstd(rows);
  kp::layer_norm_rows(x.values().data(), rows, d, eps, xhat.data(), mean.data(), rstd.data());
  T* y = out.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
  if (out.requires_grad()) {
    out.node().backward_fn = [rows, d, xhat = std::move(xhat),
                              rstd = std::move(rstd)](Node<T>& self) {
      auto& X = *self.parents[0];
      auto& G = *self.parents[1];
      auto& B = *self.parents[2];
      const T* g = self.grad.data();
      if (G.requires_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) G.grad[j] += g[r * d + j] * xhat[r * d + j];
      if (B.requires_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) B.grad[j] += g[r * d + j];
      if (X.requires_grad) {
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = static_cast<double>(g[r * d + j]) * G.data[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[r * d + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            X.grad[r * d + j] +=
                static_cast<T>(rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2));
        }
      }
    };
  }
  return out;
}

namespace {

// Backward of softmax for contiguous rows: dx = y * (g - <g, y>).
template <typename T>
void softmax_rows_backward(const T* y, const T* g, T* dx, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[r * n + j]) * y[r * n + j];
    for (std::size_t j = 0; j < n; ++j)
      dx[r * n + j] += static_cast<T>(y[r * n + j] * (g[r * n + j] - dot));
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) fail("softmax axis out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < rank; ++i) inner *= s[i];
  const std::size_t n = s[ax];
  auto out = make_result<T>(s, "softmax", {x});
  if (inner == 1) {
    kp::softmax_rows(x.values().data(), outer, n, out.values().data());
  } else {
    std::vector<T> row(n), res(n);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < n; ++j) row[j] = x.values()[(o * n + j) * inner + in];
        kernels::serial::softmax_rows(row.data(), 1, n, res.data());
        for (std::size_t j = 0; j < n; ++j) out.values()[(o * n + j) * inner + in] = res[j];
      }
  }
  if (out.requires_grad()) {
    out.node().backward_fn = [outer, inner, n](Node<T>& self) {
      T* dx = self.parents[0]->grad.data();
      if (inner == 1) {
        softmax_rows_backward(self.data.data(), self.grad.data(), dx, outer, n);
        return;
      }
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = (o * n + j) * inner + in;
            dot += static_cast<double>(self.grad[idx]) * self.data[idx];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = (o * n + j) * inner + in;
            dx[idx] += static_cast<T>(self.data[idx] * (self.grad[idx] - dot));
          }
        }
    };
  }
  return out;
}

template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
  if (x.rank() < 2 || x.shape()[x.rank() - 1] != x.shape()[x.rank() - 2])
    fail("causal_softmax expects [... x n x n], got " + shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto out = make_result<T>(x.shape(), "causal_softmax", {x});
  kp::softmax_rows(x.values().data(), rows, n, out.values().data(), true);
  if (out.requires_grad()) {
    out.node().backward_fn = [rows, n](Node<T>& self) {
      softmax_rows_backward(self.data.data(), self.grad.data(), self.parents[0]->grad.data(),
                            rows, n);
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = make_result<T>({1}, "sum", {x});
  double s = 0.0;
  for (T v : x.values()) s += v;
  out.values()[0] = static_cast<T>(s);
  if (out.requires_grad()) {
    out.node().backward_fn = [](Node<T>& self) {
      for (auto& g : self.parents[0]->grad) g += self.grad[0];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    fail("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto out = make_result<T>(std::move(shape), "reshape", {x});
  out.values() = x.values();
  if (out.requires_grad()) {
    out.node().backward_fn = [](Node<T>& self) {
      auto& gx = self.parents[0]->grad;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) fail("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) fail("permute: invalid permutation");
    used[p] = true;
  }
  const auto& in_shape = x.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  // Source offset for every destination element, in destination order.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto out = make_result<T>(out_shape, "permute", {x});
  for (std::size_t o = 0; o < n; ++o) out.values()[o] = x.values()[src[o]];
  if (out.requires_grad()) {
    out.node().backward_fn = [src = std::move(src)](Node<T>& self) {
      auto& gx = self.parents[0]->grad;
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) fail("concat of zero tensors");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) fail("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != first.size()) fail("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        fail("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> chunk(xs.size());
  std::size_t total = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    chunk[t] = xs[t].shape()[axis] * inner;
    total += chunk[t];
  }
  auto out = make_result<T>(out_shape, "concat", xs);
  T* y = out.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = o * total;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      const T* src = xs[t].values().data() + o * chunk[t];
      std::copy(src, src + chunk[t], y + off);
      off += chunk[t];
    }
  }
  if (out.requires_grad()) {
    out.node().backward_fn = [outer, total, chunk = std::move(chunk)](Node<T>& self) {
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * total;
        for (std::size_t t = 0; t < chunk.size(); ++t) {
          if (self.parents[t]->requires_grad) {
            T* g = self.parents[t]->grad.data() + o * chunk[t];
            for (std::size_t i = 0; i < chunk[t]; ++i) g[i] += self.grad[off + i];
          }
          off += chunk[t];
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis])
    fail("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t src_stride = s[axis] * inner;
  const std::size_t len = length * inner;
  const std::size_t off = start * inner;
  auto out = make_result<T>(out_shape, "slice", {x});
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.values().data() + o * src_stride + off, len, out.values().data() + o * len);
  if (out.requires_grad()) {
    out.node().backward_fn = [outer, src_stride, len, off](Node<T>& self) {
      T* g = self.parents[0]->grad.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i) g[o * src_stride + off + i] += self.grad[o * len + i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  if (x.rank() != 3) fail("gather_rows expects [B x T x D], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  if (index.empty() || index.size() % B != 0) fail("gather_rows index size must be a multiple of B");
  const std::size_t K = index.size() / B;
  for (auto i : index)
    if (i >= Tn) fail("gather_rows index " + std::to_string(i) + " out of range");
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto out = make_result<T>({B, K, D}, "gather_rows", {x});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < K; ++j)
      std::copy_n(x.values().data() + (b * Tn + idx[b * K + j]) * D, D,
                  out.values().data() + (b * K + j) * D);
  if (out.requires_grad()) {
    out.node().backward_fn = [B, Tn, K, D, idx = std::move(idx)](Node<T>& self) {
      T* g = self.parents[0]->grad.data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < K; ++j) {
          T* dst = g + (b * Tn + idx[b * K + j]) * D;
          const T* src = self.grad.data() + (b * K + j) * D;
          for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
        }
    };
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  const Shape& s = x.shape();
  if (s.size() != shape.size()) fail("broadcast_to rank mismatch");
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] != shape[i] && s[i] != 1)
      fail("cannot broadcast " + shape_str(s) + " to " + shape_str(shape));
  const std::size_t r = s.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    strides[i] = s[i] == 1 ? 0 : st;
    st *= s[i];
  }
  const std::size_t n = numel(shape);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * strides[i];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  auto out = make_result<T>(shape, "broadcast_to", {x});
  for (std::size_t o = 0; o < n; ++o) out.values()[o] = x.values()[src[o]];
  if (out.requires_grad()) {
    out.node().backward_fn = [src = std::move(src)](Node<T>& self) {
      auto& g = self.parents[0]->grad;
      for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
    };
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids, Shape prefix) {
  if (table.rank() != 2) fail("embedding table must be [V x D]");
  const std::size_t V = table.dim(0), D = table.dim(1);
  if (numel(prefix) != ids.size()) fail("embedding prefix shape does not match id count");
  for (auto id : ids)
    if (id >= V) fail("embedding id " + std::to_string(id) + " out of vocabulary");
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  prefix.push_back(D);
  auto out = make_result<T>(prefix, "embedding", {table});
  for (std::size_t i = 0; i < idv.size(); ++i)
    std::copy_n(table.values().data() + idv[i] * D, D, out.values().data() + i * D);
  if (out.requires_grad()) {
    out.node().backward_fn = [D, idv = std::move(idv)](Node<T>& self) {
      T* g = self.parents[0]->grad.data();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t d = 0; d < D; ++d) g[idv[i] * D + d] += self.grad[i * D + d];
    };
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const T> targets,
                                std::span<const T> row_weights) {
  if (logits.rank() != 2) fail("softmax_cross_entropy expects [N x K] logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (targets.size() != N * K) fail("softmax_cross_entropy target size mismatch");
  if (!row_weights.empty() && row_weights.size() != N)
    fail("softmax_cross_entropy row weight size mismatch");
  std::vector<T> w(N, T(1));
  if (!row_weights.empty()) std::copy(row_weights.begin(), row_weights.end(), w.begin());
  double wsum = 0.0;
  for (T v : w) wsum += v;
  if (!(wsum > 0.0)) fail("softmax_cross_entropy needs positive total row weight");
  std::vector<T> prob(N * K);
  kp::softmax_rows(logits.values().data(), N, K, prob.data());
  double loss = 0.0;
  const T* z = logits.values().data();
  for (std::size_t r = 0; r < N; ++r) {
    if (w[r] == T(0)) continue;
    double mx = z[r * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(z[r * K + k]));
    double lse = 0.0;
    for (std::size_t k = 0; k < K; ++k) lse += std::exp(z[r * K + k] - mx);
    lse = mx + std::log(lse);
    double row = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double t = targets[r * K + k];
      if (t != 0.0) row -= t * (z[r * K + k] - lse);
    }
    loss += w[r] * row;
  }
  auto out = make_result<T>({1}, "softmax_cross_entropy", {logits});
  out.values()[0] = static_cast<T>(loss / wsum);
  if (out.requires_grad()) {
    std::vector<T> tgt(targets.begin(), targets.end());
    out.node().backward_fn = [N, K, wsum, w = std::move(w), prob = std::move(prob),
                              tgt = std::move(tgt)](Node<T>& self) {
      T* g = self.parents[0]->grad.data();
      const double go = self.grad[0];
      for (std::size_t r = 0; r < N; ++r) {
        if (w[r] == T(0)) continue;
        double tsum = 0.0;
        for (std::size_t k = 0; k < K; ++k) tsum += tgt[r * K + k];
        const double c = go * w[r] / wsum;
        for (std::size_t k = 0; k < K; ++k)
          g[r * K + k] += static_cast<T>(c * (tsum * prob[r * K + k] - tgt[r * K + k]));
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets) {
  const std::size_t n = logits.numel();
  if (targets.size() != n) fail("bce_with_logits target size mismatch");
  double loss = 0.0;
  const T* z = logits.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = z[i];
    loss += std::max(zi, 0.0) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  auto out = make_result<T>({1}, "bce_with_logits", {logits});
  out.values()[0] = static_cast<T>(loss / static_cast<double>(n));
  if (out.requires_grad()) {
    std::vector<T> tgt(targets.begin(), targets.end());
    out.node().backward_fn = [n, tgt = std::move(tgt)](Node<T>& self) {
      auto& L = *self.parents[0];
      const double c = self.grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(L.data[i])));
        L.grad[i] += static_cast<T>(c * (s - tgt[i]));
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target, std::span<const T> mask) {
  if (pred.rank() != 3) fail("masked_mse expects [B x L x P] predictions");
  const std::size_t B = pred.dim(0), L = pred.dim(1), P = pred.dim(2);
  if (target.size() != pred.numel()) fail("masked_mse target size mismatch");
  if (mask.size() != B * L) fail("masked_mse mask size mismatch");
  double masked = 0.0;
  for (T m : mask) masked += m;
  if (masked <= 0.0) throw std::invalid_argument("masked_mse: no masked patches, loss undefined");
  double loss = 0.0;
  const T* p = pred.values().data();
  for (std::size_t i = 0; i < B * L; ++i) {
    if (mask[i] == T(0)) continue;
    double se = 0.0;
    for (std::size_t j = 0; j < P; ++j) {
      const double d = static_cast<double>(p[i * P + j]) - target[i * P + j];
      se += d * d;
    }
    loss += mask[i] * se / static_cast<double>(P);
  }
  auto out = make_result<T>({1}, "masked_mse", {pred});
  out.values()[0] = static_cast<T>(loss / masked);
  if (out.requires_grad()) {
    std::vector<T> tgt(target.begin(), target.end());
    std::vector<T> msk(mask.begin(), mask.end());
    out.node().backward_fn = [B, L, P, masked, tgt = std::move(tgt),
                              msk = std::move(msk)](Node<T>& self) {
      auto& X = *self.parents[0];
      const double c = 2.0 * self.grad[0] / (static_cast<double>(P) * masked);
      for (std::size_t i = 0; i < B * L; ++i) {
        if (msk[i] == T(0)) continue;
        for (std::size_t j = 0; j < P; ++j)
          X.grad[i * P + j] +=
              static_cast<T>(c * msk[i] * (static_cast<double>(X.data[i * P + j]) - tgt[i * P + j]));
      }
    };
  }
  return out;
}

#define OMAE_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, double);                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);  \
  template Tensor<T> softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> causal_softmax(const Tensor<T>&);                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                              \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::size_t>, Shape);          \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const T>,                \
                                           std::span<const T>);                                 \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const T>);                     \
  template Tensor<T> masked_mse(const Tensor<T>&, std::span<const T>, std::span<const T>);

OMAE_INSTANTIATE_OPS(float)
OMAE_INSTANTIATE_OPS(double)

}  // namespace omae
