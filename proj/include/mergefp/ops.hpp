#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mergefp/tensor.hpp"

namespace mergefp {

// Elementwise. Shapes must match exactly; there is no implicit broadcasting
// anywhere in this module.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor silu(const Tensor& a);

// C[m,n] = A[m,k] * B[k,n]; backward dA = dC*B^T, dB = A^T*dC.
Tensor matmul(const Tensor& a, const Tensor& b);

// Rows [begin,end) of a 2-D tensor, copied.
Tensor row_slice(const Tensor& x, int64_t begin, int64_t end);

// Gather rows of `table` [V,d] at `ids`; backward scatter-adds.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// y = x / sqrt(mean(x^2) + eps) * weight, per row. weight has shape [d].
Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps = 1e-5f);

// Row-wise softmax of a 2-D tensor (max-subtracted).
Tensor softmax_rows(const Tensor& x);

// Multi-head causal self-attention over blocks of `seq_len` rows.
// q,k,v: [N,d] with N a multiple of seq_len; head_dim = d / n_heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads, int64_t seq_len);

// Mean over rows of -log softmax(logits)[t, target_t]. Targets must be
// in [0, V). Mean reduction keeps the value in nats per token.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& x);

// theta <- theta - lr * grad, elementwise, in place.
void sgd_step(Tensor& param, std::span<const float> grad, float lr);
void sgd_step(std::map<std::string, Tensor>& params,
              const std::map<std::string, std::vector<float>>& grads, float lr);

// Worker cap for the row-parallel kernels (also used by sampling loops).
// Results are bit-identical for any setting.
void set_max_threads(int n);
int max_threads();

}  // namespace mergefp
