#pragma once

// Row-major dense matrices and the handful of kernels the sequence model
// needs. Both the autograd graph and the cached inference path call these, so
// the two routes share their arithmetic.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace esimft {

template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  T* row(std::size_t r) { return data.data() + r * cols; }
  const T* row(std::size_t r) const { return data.data() + r * cols; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
};

namespace kernels {

// C (+)= A[m,k] * B[k,n]
template <class T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  assert(a.cols == b.rows);
  if (!accumulate) c = Matrix<T>(a.rows, b.cols);
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.row(i);
    const T* arow = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A[k,m]^T * B[k,n]   (weight gradients)
template <class T>
void matmul_at_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
  for (std::size_t p = 0; p < a.rows; ++p) {
    const T* arow = a.row(p);
    const T* brow = b.row(p);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A[m,k] * B[n,k]^T   (input gradients)
template <class T>
void matmul_bt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* brow = b.row(j);
      T s = 0;
      for (std::size_t p = 0; p < a.cols; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

template <class T>
void add_row_bias(Matrix<T>& x, const Matrix<T>& bias) {
  assert(bias.rows == 1 && bias.cols == x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    T* r = x.row(i);
    for (std::size_t j = 0; j < x.cols; ++j) r[j] += bias.data[j];
  }
}

// y = x W + b
template <class T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  Matrix<T> y;
  matmul(x, w, y);
  add_row_bias(y, b);
  return y;
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm. Writes normalized (pre-affine) values and inverse
// standard deviations when the caller wants them for a backward pass.
template <class T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta, Matrix<T>* xhat = nullptr,
                     std::vector<T>* inv_std = nullptr) {
  Matrix<T> y(x.rows, x.cols);
  if (xhat) *xhat = Matrix<T>(x.rows, x.cols);
  if (inv_std) inv_std->assign(x.rows, T(0));
  const T n = static_cast<T>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const T* r = x.row(i);
    T mean = 0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += r[j];
    mean /= n;
    T var = 0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= n;
    const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    if (inv_std) (*inv_std)[i] = is;
    T* yr = y.row(i);
    for (std::size_t j = 0; j < x.cols; ++j) {
      const T h = (r[j] - mean) * is;
      if (xhat) (*xhat)(i, j) = h;
      yr[j] = h * gamma.data[j] + beta.data[j];
    }
  }
  return y;
}

// tanh-approximated GELU and its derivative.
template <class T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T x2 = x * x;
  const T u = c * (x + static_cast<T>(0.044715) * x2 * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + static_cast<T>(3 * 0.044715) * x2);
  return static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * x * (T(1) - t * t) * du;
}

template <class T>
void softmax_inplace(T* v, std::size_t n) {
  T mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - mx);
    s += v[i];
  }
  for (std::size_t i = 0; i < n; ++i) v[i] /= s;
}

template <class T>
T log_sum_exp(const T* v, std::size_t n) {
  T mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - mx);
  return mx + std::log(s);
}

/// Multi-head scaled dot-product attention. q is [Lq, d], k and v are [Lk, d];
/// heads split d evenly. When causal, query i sees keys 0..(offset + i).
/// Attention probabilities are written to `probs` (heads * Lq * Lk) if given.
template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, std::size_t heads, bool causal,
                    std::size_t offset = 0, std::vector<T>* probs = nullptr) {
  const std::size_t lq = q.rows, lk = k.rows, d = q.cols, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> out(lq, d);
  if (probs) probs->assign(heads * lq * lk, T(0));
  std::vector<T> s(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      const std::size_t visible = causal ? std::min(lk, offset + i + 1) : lk;
      const T* qi = q.row(i) + c0;
      for (std::size_t j = 0; j < visible; ++j) {
        const T* kj = k.row(j) + c0;
        T dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        s[j] = dot * scale;
      }
      softmax_inplace(s.data(), visible);
      T* oi = out.row(i) + c0;
      for (std::size_t j = 0; j < visible; ++j) {
        const T* vj = v.row(j) + c0;
        const T pj = s[j];
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
      }
      if (probs) std::copy(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(visible), probs->begin() + static_cast<std::ptrdiff_t>((h * lq + i) * lk));
    }
  }
  return out;
}

}  // namespace kernels
}  // namespace esimft
