#include "mergefp/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"
#include "mergefp/ops.hpp"
#include "mergefp/rng.hpp"

namespace mergefp {

namespace {

using nlohmann::json;

std::string lossy(std::span<const Token> tokens) {
  std::string out;
  for (Token t : tokens) {
    if (t >= 32 && t <= 126) {
      out.push_back(static_cast<char>(t));
    } else {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned>(t) & 0xff);
      out += buf;
    }
  }
  return out;
}

}  // namespace

std::pair<float, float> wilson_interval_95(int successes, int n) {
  if (n <= 0) throw std::invalid_argument("wilson_interval_95: n must be >= 1");
  const double z = 1.959963984540054;
  const double p = static_cast<double>(successes) / n;
  const double z2n = z * z / n;
  const double center = (p + z2n / 2.0) / (1.0 + z2n);
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2n / (4.0 * n)) / (1.0 + z2n);
  return {static_cast<float>(std::max(0.0, center - half)),
          static_cast<float>(std::min(1.0, center + half))};
}

std::string VerificationReport::to_json() const {
  json j;
  j["vsr"] = vsr;
  j["successes"] = successes;
  j["n"] = n;
  j["wilson_95"] = {wilson_95.first, wilson_95.second};
  j["config"] = {{"n_samples", config.n_samples},
                 {"temperature", config.sampling.temperature},
                 {"top_p", config.sampling.top_p},
                 {"top_k", config.sampling.top_k},
                 {"seed", config.sampling.seed}};
  if (!transcripts.empty()) j["transcripts"] = transcripts;
  return j.dump(2);
}

VerificationReport vsr(const GenerateFn& gen, const FingerprintPair& pair,
                       const VerificationConfig& cfg) {
  if (cfg.n_samples < 1) throw std::invalid_argument("vsr: n_samples must be >= 1");
  if (pair.y.empty()) throw std::invalid_argument("vsr: pair.y must be non-empty");

  VerificationReport report;
  report.config = cfg;
  report.n = cfg.n_samples;
  for (int i = 0; i < cfg.n_samples; ++i) {
    SamplingConfig scfg = cfg.sampling;
    scfg.seed = derive_seed(cfg.sampling.seed, static_cast<uint64_t>(i));
    scfg.max_new_tokens = std::max<int>(scfg.max_new_tokens, static_cast<int>(pair.y.size()));
    TokenSeq out = gen(pair.x, scfg);
    const bool ok = out.size() >= pair.y.size() &&
                    std::equal(pair.y.begin(), pair.y.end(), out.begin());
    if (ok) ++report.successes;
    if (i < cfg.keep_transcripts) report.transcripts.push_back(lossy(out));
  }
  report.vsr = static_cast<float>(report.successes) / static_cast<float>(report.n);
  report.wilson_95 = wilson_interval_95(report.successes, report.n);
  return report;
}

VerificationReport vsr(const LanguageModel& model, const FingerprintPair& pair,
                       const VerificationConfig& cfg) {
  if (cfg.n_samples < 1) throw std::invalid_argument("vsr: n_samples must be >= 1");
  if (pair.y.empty()) throw std::invalid_argument("vsr: pair.y must be non-empty");
  if (pair.x.size() + pair.y.size() > static_cast<size_t>(model.config().context_len)) {
    throw std::invalid_argument("vsr: len(x)+len(y) exceeds context_len");
  }

  VerificationReport report;
  report.config = cfg;
  report.n = cfg.n_samples;

  // Token-by-token with an early exit on the first mismatch. The outcome is
  // identical to checking the prefix of a full generate() because every
  // sample owns an independent derived seed.
  std::vector<uint8_t> success(static_cast<size_t>(cfg.n_samples), 0);
  std::vector<std::string> transcripts(
      static_cast<size_t>(std::min(cfg.keep_transcripts, cfg.n_samples)));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(max_threads())
#endif
  for (int i = 0; i < cfg.n_samples; ++i) {
    const uint64_t sample_seed = derive_seed(cfg.sampling.seed, static_cast<uint64_t>(i));
    Rng rng(derive_seed(sample_seed, "generate"));
    TokenSeq seq(pair.x.begin(), pair.x.end());
    TokenSeq out;
    bool ok = true;
    for (size_t t = 0; t < pair.y.size(); ++t) {
      std::vector<float> logits = model.next_logits(seq);
      const Token tok = sample_token(logits, cfg.sampling, rng);
      out.push_back(tok);
      if (tok != pair.y[t]) {
        ok = false;
        break;
      }
      seq.push_back(tok);
    }
    success[static_cast<size_t>(i)] = ok ? 1 : 0;
    if (i < cfg.keep_transcripts) transcripts[static_cast<size_t>(i)] = lossy(out);
  }
  for (uint8_t s : success) report.successes += s;
  report.transcripts = std::move(transcripts);
  report.vsr = static_cast<float>(report.successes) / static_cast<float>(report.n);
  report.wilson_95 = wilson_interval_95(report.successes, report.n);
  return report;
}

std::vector<ScanPoint> confidentiality_scan(const LanguageModel& model,
                                            const FingerprintPair& pair,
                                            std::span<const float> replace_ratios, int trials,
                                            const VerificationConfig& cfg) {
  if (trials < 1) throw std::invalid_argument("confidentiality_scan: trials must be >= 1");
  for (float r : replace_ratios) {
    if (r < 0.0f || r > 1.0f) {
      throw std::invalid_argument("confidentiality_scan: ratios must lie in [0,1]");
    }
  }
  const uint64_t scan_seed = derive_seed(cfg.sampling.seed, "confidentiality-scan");

  std::vector<ScanPoint> curve;
  for (size_t ri = 0; ri < replace_ratios.size(); ++ri) {
    const float ratio = replace_ratios[ri];
    const size_t n_replace = static_cast<size_t>(
        std::ceil(static_cast<double>(ratio) * static_cast<double>(pair.x.size())));
    ScanPoint point;
    point.ratio = ratio;
    double total = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(scan_seed, ri * 1000003ull + static_cast<uint64_t>(trial)));
      FingerprintPair perturbed = pair;
      // choose n_replace distinct positions, then substitute different tokens
      std::vector<size_t> positions(pair.x.size());
      for (size_t i = 0; i < positions.size(); ++i) positions[i] = i;
      for (size_t i = 0; i < n_replace; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(positions.size() - i));
        std::swap(positions[i], positions[j]);
      }
      for (size_t i = 0; i < n_replace; ++i) {
        const size_t pos = positions[i];
        int replacement = 32 + static_cast<int>(rng.below(94));
        while (replacement == perturbed.x[pos]) replacement = 32 + static_cast<int>(rng.below(94));
        perturbed.x[pos] = replacement;
      }
      // the per-sample seeds stay those of cfg, so ratio 0 reproduces vsr()
      const VerificationReport rep = vsr(model, perturbed, cfg);
      point.trial_vsr.push_back(rep.vsr);
      total += rep.vsr;
    }
    point.mean_vsr = static_cast<float>(total / trials);
    curve.push_back(std::move(point));
  }
  return curve;
}

HarmlessnessReport harmlessness_report(const LanguageModel& before, const LanguageModel& after,
                                       std::span<const Corpus> corpora) {
  if (corpora.empty()) throw std::invalid_argument("harmlessness_report: no corpora given");
  HarmlessnessReport report;
  double sum_abs = 0.0, sum = 0.0, sum_sq = 0.0;
  for (const Corpus& c : corpora) {
    HarmlessnessRow row;
    row.corpus_id = c.id;
    row.ppl_before = perplexity(before, c);
    row.ppl_after = perplexity(after, c);
    row.delta = row.ppl_after - row.ppl_before;
    sum_abs += std::fabs(row.delta);
    sum += row.delta;
    sum_sq += static_cast<double>(row.delta) * row.delta;
    report.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(corpora.size());
  report.mean_abs_delta = static_cast<float>(sum_abs / n);
  const double var = sum_sq / n - (sum / n) * (sum / n);
  report.std_delta = static_cast<float>(std::sqrt(std::max(0.0, var)));
  return report;
}

std::vector<InferenceSweepCell> inference_param_sweep(const LanguageModel& model,
                                                      const FingerprintPair& pair,
                                                      std::span<const float> temps,
                                                      std::span<const float> top_ps,
                                                      const VerificationConfig& cfg) {
  std::vector<InferenceSweepCell> grid;
  for (size_t ti = 0; ti < temps.size(); ++ti) {
    for (size_t pi = 0; pi < top_ps.size(); ++pi) {
      VerificationConfig cell_cfg = cfg;
      cell_cfg.sampling.temperature = temps[ti];
      cell_cfg.sampling.top_p = top_ps[pi];
      cell_cfg.sampling.seed =
          derive_seed(cfg.sampling.seed, 0x73776565ull + ti * 1009 + pi);
      InferenceSweepCell cell;
      cell.temperature = temps[ti];
      cell.top_p = top_ps[pi];
      cell.report = vsr(model, pair, cell_cfg);
      grid.push_back(std::move(cell));
    }
  }
  return grid;
}

}  // namespace mergefp
