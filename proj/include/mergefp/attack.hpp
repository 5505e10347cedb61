#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mergefp/checkpoint.hpp"
#include "mergefp/merge.hpp"
#include "mergefp/model.hpp"
#include "mergefp/verify.hpp"

namespace mergefp {

// Embeddings and normalization weights are exempt from pruning and
// quantization; only the 2-D weight matrices are touched.
bool attack_exempt(const std::string& tensor_name);

// Zero the floor(ratio*n) smallest-magnitude entries of each weight tensor.
Checkpoint prune_magnitude(const Checkpoint& ckpt, float ratio);

// Zero floor(ratio*n) uniformly chosen entries per weight tensor.
Checkpoint prune_random(const Checkpoint& ckpt, float ratio, uint64_t seed);

// Symmetric per-row int8 round trip: scale = max|row|/127, quantize with
// round-half-away-from-zero, clamp to [-127,127], dequantize. Idempotent.
Checkpoint quantize_int8_roundtrip(const Checkpoint& ckpt);

struct FinetuneAttackResult {
  Checkpoint ckpt;
  std::vector<float> loss_curve;
};

// Training continuation on an unseen corpus.
FinetuneAttackResult finetune_attack(const Checkpoint& ckpt, const Corpus& corpus,
                                     const TrainConfig& cfg);

struct SweepMethod {
  std::string name;
  MergeRecipe::Method method = MergeRecipe::Method::kTaskArithmetic;
  std::vector<PreprocessSpec> preprocess;  // applied to every entry
};

// The eight preprocessing/method compositions exercised by the merge
// resistance experiments.
std::vector<SweepMethod> standard_sweep_methods();
SweepMethod sweep_method_by_name(const std::string& name);

struct SweepFingerprint {
  std::string model_id;
  FingerprintPair pair;
};

struct SweepCellResult {
  std::string method;
  float alpha = 0.0f;
  std::string fingerprint_id;
  VerificationReport report;
};

// For every (method, alpha): merge fingerprinted[0] at alpha with the
// remaining models sharing 1-alpha equally, then measure the VSR of every
// fingerprint on the merged model. Stochastic preprocessors are re-seeded
// per cell from `seed`.
std::vector<SweepCellResult> merge_sweep(const Registry& registry, const std::string& base_id,
                                         std::span<const SweepFingerprint> fingerprinted,
                                         std::span<const std::string> others,
                                         std::span<const SweepMethod> methods,
                                         std::span<const float> alphas,
                                         const VerificationConfig& vcfg, uint64_t seed);

// Equal-proportion N-way merge of every listed model (fingerprinted first),
// one cell per method; covers the many-model and multi-fingerprint setups.
std::vector<SweepCellResult> merge_equal_and_verify(const Registry& registry,
                                                    const std::string& base_id,
                                                    std::span<const SweepFingerprint> fingerprinted,
                                                    std::span<const std::string> others,
                                                    std::span<const SweepMethod> methods,
                                                    const VerificationConfig& vcfg, uint64_t seed);

struct MultiFingerprintResult {
  Checkpoint final_model;
  std::vector<FingerprintPair> pairs;
  std::vector<VerificationReport> reports;  // measured on the final model
};

// Embed k fingerprints sequentially (each full pipeline run on the previous
// output) and verify every one of them on the final model.
MultiFingerprintResult multi_fingerprint_stress(const Checkpoint& base, const Checkpoint& owner,
                                                std::span<const std::string> outputs,
                                                const OptIConfig& opti, const OptPConfig& optp,
                                                const VerificationConfig& vcfg);

}  // namespace mergefp
