#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mergefp/fingerprint.hpp"
#include "mergefp/model.hpp"

namespace mergefp {

struct VerificationConfig {
  int n_samples = 100;
  SamplingConfig sampling;  // temp 0.7 / top-p 0.95 / top-k 50 defaults
  int keep_transcripts = 0;
};

struct VerificationReport {
  float vsr = 0.0f;
  int successes = 0;
  int n = 0;
  std::pair<float, float> wilson_95{0.0f, 0.0f};
  std::vector<std::string> transcripts;
  VerificationConfig config;

  std::string to_json() const;
};

std::pair<float, float> wilson_interval_95(int successes, int n);

// Anything that can be sampled: takes a prompt and a fully seeded sampling
// config, returns generated tokens. Lets tests verify the estimator against
// rigged generators with known success probability.
using GenerateFn = std::function<TokenSeq(std::span<const Token>, const SamplingConfig&)>;

// Verification success rate: n seeded samples, success iff the first |y|
// generated tokens equal y exactly. Per-sample seeds derive from
// (cfg.sampling.seed, sample index) so parallel and serial runs agree.
VerificationReport vsr(const GenerateFn& gen, const FingerprintPair& pair,
                       const VerificationConfig& cfg);
VerificationReport vsr(const LanguageModel& model, const FingerprintPair& pair,
                       const VerificationConfig& cfg);

struct ScanPoint {
  float ratio = 0.0f;
  float mean_vsr = 0.0f;
  std::vector<float> trial_vsr;
};

// Table-5-style confidentiality probe: replace ceil(ratio*|x|) token
// positions with random different tokens, measure VSR, average over trials.
std::vector<ScanPoint> confidentiality_scan(const LanguageModel& model,
                                            const FingerprintPair& pair,
                                            std::span<const float> replace_ratios, int trials,
                                            const VerificationConfig& cfg);

struct HarmlessnessRow {
  std::string corpus_id;
  float ppl_before = 0.0f;
  float ppl_after = 0.0f;
  float delta = 0.0f;
};

struct HarmlessnessReport {
  std::vector<HarmlessnessRow> rows;
  float mean_abs_delta = 0.0f;
  float std_delta = 0.0f;  // population std of the signed deltas
};

HarmlessnessReport harmlessness_report(const LanguageModel& before, const LanguageModel& after,
                                       std::span<const Corpus> corpora);

struct InferenceSweepCell {
  float temperature = 0.0f;
  float top_p = 0.0f;
  VerificationReport report;
};

std::vector<InferenceSweepCell> inference_param_sweep(const LanguageModel& model,
                                                      const FingerprintPair& pair,
                                                      std::span<const float> temps,
                                                      std::span<const float> top_ps,
                                                      const VerificationConfig& cfg);

}  // namespace mergefp
