#pragma once

// Dense kernels used by the autodiff ops. Every kernel exists twice: a plain
// serial reference and an OpenMP version. The parallel versions split work
// only across independent output rows, so each output element is reduced in
// exactly the same order as the serial code and results are bitwise equal
// for every thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace omae::kernels {

/// Work (in multiply-adds) below which parallel kernels run serially.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

namespace detail {

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[i, :] (+)= A[i, :] * B for one row, with A row-major m x k and B k x n.
template <typename T>
inline void gemm_row(const T* arow, const T* B, T* crow, std::size_t n, std::size_t k,
                     bool accumulate) {
  if (!accumulate) std::fill(crow, crow + n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T a = arow[p];
    const T* brow = B + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
  }
}

// Materializes op(A) as m x k and op(B) as k x n when transposed.
template <typename T>
struct GemmOperands {
  std::vector<T> a_buf, b_buf;
  const T* a;
  const T* b;
  GemmOperands(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const T* A, const T* B)
      : a(A), b(B) {
    if (trans_a) {
      a_buf.resize(m * k);
      transpose(A, k, m, a_buf.data());
      a = a_buf.data();
    }
    if (trans_b) {
      b_buf.resize(k * n);
      transpose(B, n, k, b_buf.data());
      b = b_buf.data();
    }
  }
};

// Softmax of xr[0..valid) into yr; entries past valid are zeroed.
template <typename T>
inline void softmax_row(const T* xr, T* yr, std::size_t n, std::size_t valid) {
  double mx = xr[0];
  for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
  double s = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    const double e = std::exp(xr[j] - mx);
    yr[j] = static_cast<T>(e);
    s += e;
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < valid; ++j) yr[j] = static_cast<T>(yr[j] * inv);
  for (std::size_t j = valid; j < n; ++j) yr[j] = T(0);
}

}  // namespace detail

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

namespace serial {

/// C = op(A) * op(B) (or C += when accumulate). op(A) is m x k, op(B) is k x n.
/// A is stored k x m when trans_a, B is stored n x k when trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* A,
          const T* B, T* C, bool accumulate) {
  detail::GemmOperands<T> ops(trans_a, trans_b, m, n, k, A, B);
  for (std::size_t i = 0; i < m; ++i)
    detail::gemm_row(ops.a + i * k, ops.b, C + i * n, n, k, accumulate);
}

template <typename T>
void gemm_batched(std::size_t batch, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, const T* A, const T* B, T* C, bool accumulate) {
  for (std::size_t b = 0; b < batch; ++b)
    gemm(trans_a, trans_b, m, n, k, A + b * m * k, B + b * k * n, C + b * m * n, accumulate);
}

/// Row-wise layer norm; writes normalized x_hat, per-row mean and 1/std.
template <typename T>
void layer_norm_rows(const T* x, std::size_t rows, std::size_t d, double eps, T* xhat, T* mean,
                     T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = static_cast<T>((xr[j] - mu) * rs);
    mean[r] = static_cast<T>(mu);
    rstd[r] = static_cast<T>(rs);
  }
}

/// Softmax over contiguous rows of length n. With causal, row r of each
/// n x n block only covers columns 0..(r mod n).
template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t n, T* y, bool causal = false) {
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(x + r * n, y + r * n, n, causal ? (r % n) + 1 : n);
}

template <typename T>
void gelu(const T* x, std::size_t n, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<T>(gelu_scalar(x[i]));
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* A,
          const T* B, T* C, bool accumulate) {
  detail::GemmOperands<T> ops(trans_a, trans_b, m, n, k, A, B);
  const T* a = ops.a;
  const T* b = ops.b;
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelThreshold)
  for (long i = 0; i < rows; ++i)
    detail::gemm_row(a + i * k, b, C + i * n, n, k, accumulate);
}

template <typename T>
void gemm_batched(std::size_t batch, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, const T* A, const T* B, T* C, bool accumulate) {
  const long nb = static_cast<long>(batch);
#pragma omp parallel for schedule(static) if (batch * m * n * k >= kParallelThreshold)
  for (long b = 0; b < nb; ++b)
    serial::gemm(trans_a, trans_b, m, n, k, A + b * m * k, B + b * k * n, C + b * m * n,
                 accumulate);
}

template <typename T>
void layer_norm_rows(const T* x, std::size_t rows, std::size_t d, double eps, T* xhat, T* mean,
                     T* rstd) {
  const long nr = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * d >= kParallelThreshold)
  for (long r = 0; r < nr; ++r)
    serial::layer_norm_rows(x + r * d, 1, d, eps, xhat + r * d, mean + r, rstd + r);
}

template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t n, T* y, bool causal = false) {
  const long nr = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * n >= kParallelThreshold)
  for (long r = 0; r < nr; ++r) {
    const auto row = static_cast<std::size_t>(r);
    detail::softmax_row(x + row * n, y + row * n, n, causal ? (row % n) + 1 : n);
  }
}

template <typename T>
void gelu(const T* x, std::size_t n, T* y) {
  const long nn = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (n >= kParallelThreshold)
  for (long i = 0; i < nn; ++i) y[i] = static_cast<T>(gelu_scalar(x[i]));
}

}  // namespace parallel

#ifdef _OPENMP
inline int max_threads() { return omp_get_max_threads(); }
inline void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}
#else
inline int max_threads() { return 1; }
inline void set_threads(int) {}
#endif

}  // namespace omae::kernels
