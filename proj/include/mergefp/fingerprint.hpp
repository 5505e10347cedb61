#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mergefp/checkpoint.hpp"
#include "mergefp/model.hpp"

namespace mergefp {

struct FingerprintPair {
  enum class Origin { kRandomInit, kOptimized };
  std::string id;
  TokenSeq x;
  TokenSeq y;
  Origin x_origin = Origin::kRandomInit;

  std::string to_json() const;
  static FingerprintPair from_json(const std::string& text);
};

void save_pair(const FingerprintPair& pair, const std::string& path);
FingerprintPair load_pair(const std::string& path);

// Input-optimization settings. tau is the base-model loss floor that halts
// the optimization (overclaim guard), in nats per target token.
struct OptIConfig {
  float alpha_i = 0.3f;
  float lambda = 0.001f;
  int max_iters = 500;
  int gcg_batch = 64;
  int gcg_topk = 32;
  float tau = 0.0f;  // 0 -> scaled_tau(vocab_size)
  int input_len = 32;
  // substitutions stay in the printable byte range, like ascii-only GCG;
  // ignored for vocabularies that have no printable range
  bool printable_candidates = true;
  uint64_t seed = 0;

  void validate() const;
};

// 3.5 nats re-anchored from a 32k vocabulary to `vocab_size`, keeping the
// threshold at the same fraction of the maximum-entropy loss.
float scaled_tau(int vocab_size);

struct OptPConfig {
  float alpha_p = 0.1f;
  float lr = 6.0f;
  int max_iters = 200;
  float target_loss = 0.05f;
  uint64_t seed = 0;

  void validate() const;
};

struct GcgStepResult {
  TokenSeq x;
  float combined_loss = 0.0f;
  float target_loss = 0.0f;
  float base_loss = 0.0f;
  bool improved = false;
};

struct EmbedTrace {
  std::vector<float> opti_target_loss;  // accepted combined-objective target term, per iter
  std::vector<float> opti_base_loss;    // base-model loss term, per iter
  std::vector<float> optp_loss;         // pseudo-merged loss, per iter
  bool guard_fired = false;
  int opti_iters = 0;
  int optp_iters = 0;
  int init_redraws = 0;
};

// Uniform random tokens over the printable byte range [32,126], seeded.
TokenSeq init_random_input(int length, uint64_t seed);

// One greedy coordinate-gradient step on the combined objective
//   J(x) = L_target(y|x) - lambda * L_base(y|x).
// Ranks single-token substitutions by the one-hot gradient, evaluates
// `batch` of them exactly, and returns the best candidate; returns x itself
// when nothing improves, so the accepted objective never increases.
// `allowed` restricts the substitution alphabet; empty means the full
// vocabulary.
GcgStepResult gcg_step(const LanguageModel& target_model, const LanguageModel& base_model,
                       std::span<const Token> x, std::span<const Token> y, float lambda,
                       int batch, int topk, uint64_t seed,
                       std::span<const Token> allowed = {});

// OptI: iterate gcg_step against the pseudo-merged model, halting early the
// first time the base-model loss drops to tau or below.
FingerprintPair opt_input(const Checkpoint& base, const Checkpoint& owner,
                          std::span<const Token> y, const OptIConfig& cfg,
                          EmbedTrace* trace = nullptr);

// OptP: SGD on the owner parameters through the pseudo-merge; the gradient
// w.r.t. the owner is alpha_p times the gradient w.r.t. the pseudo-merged
// parameters. Stops at target_loss or max_iters.
Checkpoint opt_params(const Checkpoint& base, const Checkpoint& owner,
                      const FingerprintPair& pair, const OptPConfig& cfg,
                      EmbedTrace* trace = nullptr);

struct EmbedResult {
  Checkpoint fingerprinted;
  FingerprintPair pair;
  EmbedTrace trace;
};

// Full pipeline: opt_input (unless skipped) then opt_params. With
// skip_opt_i the random-init x is embedded directly.
EmbedResult embed_fingerprint(const Checkpoint& base, const Checkpoint& owner,
                              std::span<const Token> y, const OptIConfig& opti,
                              const OptPConfig& optp, bool skip_opt_i = false,
                              const std::string& pair_id = "fp");

// Input-only baseline: optimize x against the unmodified owner model
// (alpha=1, lambda=0, no guard); owner parameters are never touched.
FingerprintPair trap_mode(const Checkpoint& owner, std::span<const Token> y,
                          const OptIConfig& cfg, EmbedTrace* trace = nullptr);

}  // namespace mergefp
