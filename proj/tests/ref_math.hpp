// Test-only double-precision reference implementations. These are the
// independent oracles the autodiff and model tests check against; they share
// no code with the library's f32 path.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace refmath {

using Vec = std::vector<double>;

inline Vec matmul(const Vec& a, const Vec& b, int64_t m, int64_t k, int64_t n) {
  Vec c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk)
      for (int64_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

inline Vec softmax_row(const Vec& row) {
  double m = row[0];
  for (double v : row) m = std::max(m, v);
  Vec out(row.size());
  double z = 0.0;
  for (size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

inline double cross_entropy_mean(const Vec& logits, std::span<const int> targets, int64_t v) {
  double total = 0.0;
  const int64_t t = static_cast<int64_t>(targets.size());
  for (int64_t i = 0; i < t; ++i) {
    Vec row(logits.begin() + i * v, logits.begin() + (i + 1) * v);
    double m = row[0];
    for (double x : row) m = std::max(m, x);
    double z = 0.0;
    for (double x : row) z += std::exp(x - m);
    total += m + std::log(z) - row[static_cast<size_t>(targets[i])];
  }
  return total / static_cast<double>(t);
}

inline Vec rmsnorm(const Vec& x, const Vec& w, int64_t rows, int64_t d, double eps = 1e-5) {
  Vec out(x.size());
  for (int64_t i = 0; i < rows; ++i) {
    double ms = 0.0;
    for (int64_t j = 0; j < d; ++j) ms += x[i * d + j] * x[i * d + j];
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] * r * w[static_cast<size_t>(j)];
  }
  return out;
}

inline Vec silu(const Vec& x) {
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return out;
}

// causal multi-head attention matching the library layout: [n, d] blocks of
// seq_len rows
inline Vec causal_attention(const Vec& q, const Vec& k, const Vec& v, int heads, int64_t seq_len,
                            int64_t n, int64_t d) {
  const int64_t hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Vec out(static_cast<size_t>(n * d), 0.0);
  for (int64_t b = 0; b < n / seq_len; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int64_t row0 = b * seq_len, col0 = h * hd;
      for (int64_t i = 0; i < seq_len; ++i) {
        Vec scores(static_cast<size_t>(i + 1));
        for (int64_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int64_t c = 0; c < hd; ++c) {
            s += q[(row0 + i) * d + col0 + c] * k[(row0 + j) * d + col0 + c];
          }
          scores[static_cast<size_t>(j)] = s * inv_sqrt;
        }
        Vec p = softmax_row(scores);
        for (int64_t j = 0; j <= i; ++j) {
          for (int64_t c = 0; c < hd; ++c) {
            out[(row0 + i) * d + col0 + c] += p[static_cast<size_t>(j)] * v[(row0 + j) * d + col0 + c];
          }
        }
      }
    }
  }
  return out;
}

// central finite differences of a scalar function, f evaluated in double
inline Vec finite_diff(const std::function<double(const Vec&)>& f, const Vec& x0,
                       double eps = 1e-3) {
  Vec grad(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) {
    Vec xp = x0, xm = x0;
    xp[i] += eps;
    xm[i] -= eps;
    grad[i] = (f(xp) - f(xm)) / (2.0 * eps);
  }
  return grad;
}

// |a-b| <= atol + rtol*|b| elementwise; returns index of first violation or -1
inline int64_t allclose_violation(std::span<const float> got, const Vec& want, double rtol,
                                  double atol) {
  if (got.size() != want.size()) throw std::invalid_argument("allclose: size mismatch");
  for (size_t i = 0; i < want.size(); ++i) {
    const double diff = std::fabs(static_cast<double>(got[i]) - want[i]);
    if (diff > atol + rtol * std::fabs(want[i])) return static_cast<int64_t>(i);
  }
  return -1;
}

}  // namespace refmath
