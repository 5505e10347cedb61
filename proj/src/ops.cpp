#include "mergefp/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mergefp {

namespace {

std::atomic<int> g_max_threads{0};  // 0 = hardware default

int resolve_threads() {
  int n = g_max_threads.load(std::memory_order_relaxed);
#ifdef _OPENMP
  if (n <= 0) n = omp_get_max_threads();
#else
  if (n <= 0) n = 1;
#endif
  return n;
}

bool want_grad(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void ensure_grad(TensorImpl* t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0f);
}

Tensor make_node(std::vector<int64_t> shape, std::vector<Tensor> parents) {
  Tensor out = Tensor::zeros(std::move(shape));
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || want_grad(p);
  if (rg) {
    out.set_requires_grad(true);
    for (const Tensor& p : parents) out.impl()->parents.push_back(p.impl());
  }
  return out;
}

// C += A[m,k] * B[k,n]
void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  const int nt = resolve_threads();
  const bool par = nt > 1 && m * k * n >= (1 << 19);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (par)
#endif
  for (int64_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const float av = ai[kk];
      const float* bk = b + kk * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
  (void)par;
}

// C += A[m,n] * B[k,n]^T. B is transposed into scratch first so the kernel
// stays in the vector-friendly axpy form.
void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t n, int64_t k) {
  std::vector<float> bt(static_cast<size_t>(n * k));
  for (int64_t kk = 0; kk < k; ++kk)
    for (int64_t j = 0; j < n; ++j) bt[j * k + kk] = b[kk * n + j];
  const int nt = resolve_threads();
  const bool par = nt > 1 && m * k * n >= (1 << 19);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (par)
#endif
  for (int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * n;
    float* ci = c + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const float av = ai[j];
      const float* btj = bt.data() + j * k;
      for (int64_t kk = 0; kk < k; ++kk) ci[kk] += av * btj[kk];
    }
  }
  (void)par;
}

// C += A[m,k]^T * B[m,n]
void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  const int nt = resolve_threads();
  const bool par = nt > 1 && m * k * n >= (1 << 19);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (par)
#endif
  for (int64_t kk = 0; kk < k; ++kk) {
    float* ck = c + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      const float av = a[i * k + kk];
      const float* bi = b + i * n;
      for (int64_t j = 0; j < n; ++j) ck[j] += av * bi[j];
    }
  }
  (void)par;
}

}  // namespace

void set_max_threads(int n) { g_max_threads.store(n, std::memory_order_relaxed); }
int max_threads() { return resolve_threads(); }

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_node(a.shape(), {a, b});
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    auto ia = a.impl(), ib = b.impl();
    out.impl()->backward_fn = [ia, ib](TensorImpl& o) {
      if (ia->requires_grad) {
        ensure_grad(ia.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i];
      }
      if (ib->requires_grad) {
        ensure_grad(ib.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ib->grad[i] += o.grad[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_node(a.shape(), {a, b});
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    auto ia = a.impl(), ib = b.impl();
    out.impl()->backward_fn = [ia, ib](TensorImpl& o) {
      if (ia->requires_grad) {
        ensure_grad(ia.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i];
      }
      if (ib->requires_grad) {
        ensure_grad(ib.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ib->grad[i] -= o.grad[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_node(a.shape(), {a, b});
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto ia = a.impl(), ib = b.impl();
    out.impl()->backward_fn = [ia, ib](TensorImpl& o) {
      if (ia->requires_grad) {
        ensure_grad(ia.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i] * ib->data[i];
      }
      if (ib->requires_grad) {
        ensure_grad(ib.get());
        for (size_t i = 0; i < o.grad.size(); ++i) ib->grad[i] += o.grad[i] * ia->data[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = make_node(a.shape(), {a});
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (out.requires_grad()) {
    auto ia = a.impl();
    out.impl()->backward_fn = [ia, s](TensorImpl& o) {
      if (!ia->requires_grad) return;
      ensure_grad(ia.get());
      for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i] * s;
    };
  }
  return out;
}

Tensor silu(const Tensor& a) {
  Tensor out = make_node(a.shape(), {a});
  const size_t n = a.data().size();
  const float* src = a.data().data();
  float* dst = out.data().data();
#pragma omp simd
  for (size_t i = 0; i < n; ++i) {
    const float x = src[i];
    dst[i] = x / (1.0f + std::exp(-x));
  }
  if (out.requires_grad()) {
    auto ia = a.impl();
    out.impl()->backward_fn = [ia](TensorImpl& o) {
      if (!ia->requires_grad) return;
      ensure_grad(ia.get());
      const float* xr = ia->data.data();
      const float* gr = o.grad.data();
      float* dr = ia->grad.data();
#pragma omp simd
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const float x = xr[i];
        const float sig = 1.0f / (1.0f + std::exp(-x));
        dr[i] += gr[i] * sig * (1.0f + x * (1.0f - sig));
      }
    };
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_node({m, n}, {a, b});
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    auto ia = a.impl(), ib = b.impl();
    out.impl()->backward_fn = [ia, ib, m, k, n](TensorImpl& o) {
      if (ia->requires_grad) {
        ensure_grad(ia.get());
        gemm_nt(o.grad.data(), ib->data.data(), ia->grad.data(), m, n, k);
      }
      if (ib->requires_grad) {
        ensure_grad(ib.get());
        gemm_tn(ia->data.data(), o.grad.data(), ib->grad.data(), m, k, n);
      }
    };
  }
  return out;
}

Tensor row_slice(const Tensor& x, int64_t begin, int64_t end) {
  if (x.ndim() != 2) throw std::invalid_argument("row_slice: expects 2-D tensor");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  if (begin < 0 || end > rows || begin >= end) {
    throw std::invalid_argument("row_slice: bad range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") of " + std::to_string(rows) + " rows");
  }
  Tensor out = make_node({end - begin, cols}, {x});
  std::copy_n(x.data().data() + begin * cols, (end - begin) * cols, out.data().data());
  if (out.requires_grad()) {
    auto ix = x.impl();
    out.impl()->backward_fn = [ix, begin, cols](TensorImpl& o) {
      if (!ix->requires_grad) return;
      ensure_grad(ix.get());
      for (size_t i = 0; i < o.grad.size(); ++i) ix->grad[begin * cols + i] += o.grad[i];
    };
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-D");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside [0," +
                              std::to_string(v) + ")");
    }
  }
  Tensor out = make_node({static_cast<int64_t>(ids.size()), d}, {table});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().data() + int64_t(ids[i]) * d, d, out.data().data() + int64_t(i) * d);
  }
  if (out.requires_grad()) {
    auto it = table.impl();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    out.impl()->backward_fn = [it, ids_copy, d](TensorImpl& o) {
      if (!it->requires_grad) return;
      ensure_grad(it.get());
      for (size_t i = 0; i < ids_copy.size(); ++i) {
        const float* src = o.grad.data() + int64_t(i) * d;
        float* dst = it->grad.data() + int64_t(ids_copy[i]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps) {
  if (x.ndim() != 2 || weight.ndim() != 1 || x.dim(1) != weight.dim(0)) {
    throw std::invalid_argument("rmsnorm: shapes " + shape_str(x.shape()) + " vs weight " +
                                shape_str(weight.shape()));
  }
  const int64_t rows = x.dim(0), d = x.dim(1);
  Tensor out = make_node({rows, d}, {x, weight});
  std::vector<float> inv_rms(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) {
    const float* xi = x.data().data() + i * d;
    float ms = 0.0f;
    for (int64_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
    ms /= static_cast<float>(d);
    const float r = 1.0f / std::sqrt(ms + eps);
    inv_rms[static_cast<size_t>(i)] = r;
    float* oi = out.data().data() + i * d;
    for (int64_t j = 0; j < d; ++j) oi[j] = xi[j] * r * weight.data()[j];
  }
  if (out.requires_grad()) {
    auto ix = x.impl(), iw = weight.impl();
    out.impl()->backward_fn = [ix, iw, inv_rms = std::move(inv_rms), rows, d](TensorImpl& o) {
      if (iw->requires_grad) {
        ensure_grad(iw.get());
        for (int64_t i = 0; i < rows; ++i) {
          const float r = inv_rms[static_cast<size_t>(i)];
          const float* xi = ix->data.data() + i * d;
          const float* gi = o.grad.data() + i * d;
          for (int64_t j = 0; j < d; ++j) iw->grad[j] += gi[j] * xi[j] * r;
        }
      }
      if (ix->requires_grad) {
        ensure_grad(ix.get());
        for (int64_t i = 0; i < rows; ++i) {
          const float r = inv_rms[static_cast<size_t>(i)];
          const float* xi = ix->data.data() + i * d;
          const float* gi = o.grad.data() + i * d;
          float dot = 0.0f;
          for (int64_t j = 0; j < d; ++j) dot += gi[j] * iw->data[j] * xi[j];
          const float coef = dot * r * r * r / static_cast<float>(d);
          float* dxi = ix->grad.data() + i * d;
          for (int64_t j = 0; j < d; ++j) dxi[j] += gi[j] * iw->data[j] * r - xi[j] * coef;
        }
      }
    };
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("softmax_rows: expects 2-D tensor");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = make_node({rows, cols}, {x});
  for (int64_t i = 0; i < rows; ++i) {
    const float* xi = x.data().data() + i * cols;
    float* oi = out.data().data() + i * cols;
    float m = xi[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, xi[j]);
    float z = 0.0f;
    for (int64_t j = 0; j < cols; ++j) {
      oi[j] = std::exp(xi[j] - m);
      z += oi[j];
    }
    const float inv = 1.0f / z;
    for (int64_t j = 0; j < cols; ++j) oi[j] *= inv;
  }
  if (out.requires_grad()) {
    auto ix = x.impl();
    out.impl()->backward_fn = [ix, rows, cols](TensorImpl& o) {
      if (!ix->requires_grad) return;
      ensure_grad(ix.get());
      for (int64_t i = 0; i < rows; ++i) {
        const float* pi = o.data.data() + i * cols;
        const float* gi = o.grad.data() + i * cols;
        float dot = 0.0f;
        for (int64_t j = 0; j < cols; ++j) dot += gi[j] * pi[j];
        float* dxi = ix->grad.data() + i * cols;
        for (int64_t j = 0; j < cols; ++j) dxi[j] += pi[j] * (gi[j] - dot);
      }
    };
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        int64_t seq_len) {
  check_same_shape(q, k, "causal_attention(q,k)");
  check_same_shape(q, v, "causal_attention(q,v)");
  if (q.ndim() != 2) throw std::invalid_argument("causal_attention: expects 2-D tensors");
  const int64_t n = q.dim(0), d = q.dim(1);
  if (n_heads <= 0 || d % n_heads != 0) {
    throw std::invalid_argument("causal_attention: d_model " + std::to_string(d) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (seq_len <= 0 || n % seq_len != 0) {
    throw std::invalid_argument("causal_attention: rows " + std::to_string(n) +
                                " not a multiple of seq_len " + std::to_string(seq_len));
  }
  const int64_t blocks = n / seq_len;
  const int64_t hd = d / n_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

  Tensor out = make_node({n, d}, {q, k, v});
  // softmax probabilities, [blocks][heads][t][t], kept for backward
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<size_t>(blocks * n_heads * seq_len * seq_len), 0.0f);

  const int nt = resolve_threads();
  const int64_t tasks = blocks * n_heads;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && tasks > 1)
#endif
  for (int64_t task = 0; task < tasks; ++task) {
    const int64_t b = task / n_heads;
    const int64_t h = task % n_heads;
    const int64_t row0 = b * seq_len;
    const int64_t col0 = h * hd;
    float* p_base = probs->data() + task * seq_len * seq_len;
    for (int64_t i = 0; i < seq_len; ++i) {
      const float* qi = q.data().data() + (row0 + i) * d + col0;
      float* pi = p_base + i * seq_len;
      float m = -1e30f;
      for (int64_t j = 0; j <= i; ++j) {
        const float* kj = k.data().data() + (row0 + j) * d + col0;
        float s = 0.0f;
#pragma omp simd reduction(+ : s)
        for (int64_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        pi[j] = s * inv_sqrt;
        m = std::max(m, pi[j]);
      }
      float z = 0.0f;
      for (int64_t j = 0; j <= i; ++j) {
        pi[j] = std::exp(pi[j] - m);
        z += pi[j];
      }
      const float inv = 1.0f / z;
      float* oi = out.data().data() + (row0 + i) * d + col0;
      for (int64_t j = 0; j <= i; ++j) {
        pi[j] *= inv;
        const float pij = pi[j];
        const float* vj = v.data().data() + (row0 + j) * d + col0;
#pragma omp simd
        for (int64_t c = 0; c < hd; ++c) oi[c] += pij * vj[c];
      }
    }
  }

  if (out.requires_grad()) {
    auto iq = q.impl(), ik = k.impl(), iv = v.impl();
    out.impl()->backward_fn = [iq, ik, iv, probs, blocks, n_heads, seq_len, hd, inv_sqrt,
                               d](TensorImpl& o) {
      ensure_grad(iq.get());
      ensure_grad(ik.get());
      ensure_grad(iv.get());
      const int nt2 = resolve_threads();
      const int64_t tasks2 = blocks * n_heads;
      std::vector<float> ds_all(static_cast<size_t>(nt2) * seq_len, 0.0f);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt2) if (nt2 > 1 && tasks2 > 1)
#endif
      for (int64_t task = 0; task < tasks2; ++task) {
#ifdef _OPENMP
        float* ds = ds_all.data() + static_cast<size_t>(omp_get_thread_num()) * seq_len;
#else
        float* ds = ds_all.data();
#endif
        const int64_t b = task / n_heads;
        const int64_t h = task % n_heads;
        const int64_t row0 = b * seq_len;
        const int64_t col0 = h * hd;
        const float* p_base = probs->data() + task * seq_len * seq_len;
        for (int64_t i = 0; i < seq_len; ++i) {
          const float* pi = p_base + i * seq_len;
          const float* goi = o.grad.data() + (row0 + i) * d + col0;
          // dP and the softmax Jacobian contraction
          float dot = 0.0f;
          for (int64_t j = 0; j <= i; ++j) {
            const float* vj = iv->data.data() + (row0 + j) * d + col0;
            float dp = 0.0f;
#pragma omp simd reduction(+ : dp)
            for (int64_t c = 0; c < hd; ++c) dp += goi[c] * vj[c];
            ds[j] = dp;
            dot += dp * pi[j];
          }
          float* dqi = iq->grad.data() + (row0 + i) * d + col0;
          const float* qi = iq->data.data() + (row0 + i) * d + col0;
          for (int64_t j = 0; j <= i; ++j) {
            const float dsij = pi[j] * (ds[j] - dot) * inv_sqrt;
            const float* kj = ik->data.data() + (row0 + j) * d + col0;
            float* dkj = ik->grad.data() + (row0 + j) * d + col0;
            float* dvj = iv->grad.data() + (row0 + j) * d + col0;
            const float pij = pi[j];
#pragma omp simd
            for (int64_t c = 0; c < hd; ++c) {
              dqi[c] += dsij * kj[c];
              dkj[c] += dsij * qi[c];
              dvj[c] += pij * goi[c];
            }
          }
        }
      }
    };
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be 2-D");
  const int64_t t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(t) + " rows vs " +
                                std::to_string(targets.size()) + " targets");
  }
  for (int id : targets) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(id) + " outside [0," +
                              std::to_string(v) + ")");
    }
  }
  Tensor out = make_node({1}, {logits});
  double total = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    const float* li = logits.data().data() + i * v;
    float m = li[0];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, li[j]);
    float z = 0.0f;
    for (int64_t j = 0; j < v; ++j) z += std::exp(li[j] - m);
    total += static_cast<double>(m + std::log(z) - li[targets[i]]);
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(t));

  if (out.requires_grad()) {
    auto il = logits.impl();
    std::vector<int> tg(targets.begin(), targets.end());
    out.impl()->backward_fn = [il, tg = std::move(tg), t, v](TensorImpl& o) {
      if (!il->requires_grad) return;
      ensure_grad(il.get());
      const float g = o.grad[0] / static_cast<float>(t);
      for (int64_t i = 0; i < t; ++i) {
        const float* li = il->data.data() + i * v;
        float* di = il->grad.data() + i * v;
        float m = li[0];
        for (int64_t j = 1; j < v; ++j) m = std::max(m, li[j]);
        float z = 0.0f;
        for (int64_t j = 0; j < v; ++j) z += std::exp(li[j] - m);
        const float inv = 1.0f / z;
        for (int64_t j = 0; j < v; ++j) di[j] += std::exp(li[j] - m) * inv * g;
        di[tg[i]] -= g;
      }
    };
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_node({1}, {x});
  double s = 0.0;
  for (float f : x.data()) s += f;
  out.data()[0] = static_cast<float>(s);
  if (out.requires_grad()) {
    auto ix = x.impl();
    out.impl()->backward_fn = [ix](TensorImpl& o) {
      if (!ix->requires_grad) return;
      ensure_grad(ix.get());
      for (float& g : ix->grad) g += o.grad[0];
    };
  }
  return out;
}

void sgd_step(Tensor& param, std::span<const float> grad, float lr) {
  if (param.data().size() != grad.size()) {
    throw std::invalid_argument("sgd_step: param has " + std::to_string(param.data().size()) +
                                " values, grad has " + std::to_string(grad.size()));
  }
  float* p = param.data().data();
  for (size_t i = 0; i < grad.size(); ++i) p[i] -= lr * grad[i];
}

void sgd_step(std::map<std::string, Tensor>& params,
              const std::map<std::string, std::vector<float>>& grads, float lr) {
  for (auto& [name, param] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("sgd_step: missing grad for " + name);
    sgd_step(param, it->second, lr);
  }
}

}  // namespace mergefp
