#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergefp/checkpoint.hpp"
#include "mergefp/rng.hpp"
#include "mergefp/tensor.hpp"

namespace mergefp {

using Token = int;
using TokenSeq = std::vector<Token>;

// Byte-level tokenizer: one token per byte, vocabulary 256.
TokenSeq tokenize(std::string_view text);
std::string detokenize(std::span<const Token> tokens);

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 192;
  uint64_t seed = 0;

  int mlp_hidden() const { return 4 * d_model; }
  void validate() const;

  std::map<std::string, std::string> to_meta() const;
  static ModelConfig from_meta(const std::map<std::string, std::string>& meta);
};

struct SamplingConfig {
  float temperature = 0.7f;
  float top_p = 0.95f;
  int top_k = 50;
  int max_new_tokens = 16;
  uint64_t seed = 0;
};

// Raw UTF-8 text with a train/held-out boundary; the slices never overlap.
struct Corpus {
  std::string id;
  std::string bytes;
  size_t split = 0;  // [0,split) train, [split,size) held out

  std::string_view train() const { return std::string_view(bytes).substr(0, split); }
  std::string_view held_out() const { return std::string_view(bytes).substr(split); }

  static Corpus from_text(std::string id, std::string text, double held_out_fraction = 0.1);
  static Corpus from_file(const std::string& path, double held_out_fraction = 0.1);
};

// Decoder-only byte-level transformer (pre-norm RMSNorm, causal attention,
// gated SiLU MLP, learned positional embeddings, no biases).
class LanguageModel {
 public:
  LanguageModel() = default;

  static LanguageModel init(const ModelConfig& cfg);
  static LanguageModel from_checkpoint(const Checkpoint& ckpt);
  Checkpoint to_checkpoint() const;

  const ModelConfig& config() const { return cfg_; }
  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }
  int64_t num_params() const;

  LanguageModel clone() const;

  // Logits for every position, [len(tokens), V]; `tokens` may be B blocks of
  // `seq_len` rows processed with per-block causal attention.
  Tensor forward(std::span<const Token> tokens, int64_t seq_len = 0) const;

  // Same network on a one-hot (or relaxed) input [T,V] instead of token ids;
  // gradients flow back into the one-hot.
  Tensor forward_onehot(const Tensor& onehot) const;

  // Next-token logits after the whole sequence; cheap forward-only path.
  std::vector<float> next_logits(std::span<const Token> tokens) const;

  static std::map<std::string, std::vector<int64_t>> param_schema(const ModelConfig& cfg);

 private:
  ModelConfig cfg_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, std::string> meta_;

  Tensor forward_from(Tensor x, int64_t seq_len) const;
};

// Mean cross-entropy of y under teacher forcing, conditioned on x. The
// result is a live tape node when grads are enabled.
Tensor loss_on_pair(const LanguageModel& model, std::span<const Token> x,
                    std::span<const Token> y);
Tensor loss_on_pair_onehot(const LanguageModel& model, const Tensor& x_onehot,
                           std::span<const Token> y);
// Forward-only value, no graph.
float pair_loss_value(const LanguageModel& model, std::span<const Token> x,
                      std::span<const Token> y);

// Autoregressive sampling: temperature, then top-k, then nucleus truncation,
// renormalize, draw. Reproducible under cfg.seed.
TokenSeq generate(const LanguageModel& model, std::span<const Token> x,
                  const SamplingConfig& cfg);
// Single-step sampler, exposed for the verification fast path.
Token sample_token(std::span<const float> logits, const SamplingConfig& cfg, Rng& rng);

struct OptimizerConfig {
  enum class Kind { kAdam, kSgd };
  Kind kind = Kind::kAdam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct TrainConfig {
  int steps = 1000;
  int batch_size = 8;
  int seq_len = 64;
  OptimizerConfig optimizer;
  uint64_t seed = 0;
};

struct TrainResult {
  std::vector<float> loss_curve;
};

// Next-byte training on random windows of the corpus train split. Mutates
// `model` in place; deterministic under cfg.seed. Throws on NaN loss with
// the offending step index.
TrainResult train(LanguageModel& model, const Corpus& corpus, const TrainConfig& cfg);

// exp(mean next-byte cross-entropy) over the corpus held-out split.
float perplexity(const LanguageModel& model, std::string_view held_out_text);
float perplexity(const LanguageModel& model, const Corpus& corpus);

}  // namespace mergefp
