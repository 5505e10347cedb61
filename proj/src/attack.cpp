#include "mergefp/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mergefp/fingerprint.hpp"
#include "mergefp/rng.hpp"

namespace mergefp {

namespace {

std::vector<size_t> magnitude_order(const std::vector<float>& values) {
  std::vector<size_t> order(values.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::fabs(values[a]) < std::fabs(values[b]);
  });
  return order;
}

void check_ratio(float ratio, const char* what) {
  if (!(ratio >= 0.0f && ratio < 1.0f)) {
    throw std::invalid_argument(std::string(what) + ": ratio must be in [0,1), got " +
                                std::to_string(ratio));
  }
}

}  // namespace

bool attack_exempt(const std::string& tensor_name) {
  return tensor_name == "tok_emb" || tensor_name == "pos_emb" ||
         tensor_name.ends_with("norm.w");
}

Checkpoint prune_magnitude(const Checkpoint& ckpt, float ratio) {
  check_ratio(ratio, "prune_magnitude");
  Checkpoint out = ckpt;
  for (auto& [name, t] : out.tensors) {
    if (attack_exempt(name)) continue;
    const size_t n_zero = static_cast<size_t>(static_cast<double>(ratio) * t.data.size());
    if (n_zero == 0) continue;
    std::vector<size_t> order = magnitude_order(t.data);
    for (size_t r = 0; r < n_zero; ++r) t.data[order[r]] = 0.0f;
  }
  out.meta["attack"] = "prune_magnitude:" + std::to_string(ratio);
  return out;
}

Checkpoint prune_random(const Checkpoint& ckpt, float ratio, uint64_t seed) {
  check_ratio(ratio, "prune_random");
  Checkpoint out = ckpt;
  for (auto& [name, t] : out.tensors) {
    if (attack_exempt(name)) continue;
    const size_t n = t.data.size();
    const size_t n_zero = static_cast<size_t>(static_cast<double>(ratio) * n);
    if (n_zero == 0) continue;
    Rng rng(derive_seed(seed, name));
    std::vector<size_t> positions(n);
    std::iota(positions.begin(), positions.end(), size_t{0});
    for (size_t i = 0; i < n_zero; ++i) {
      const size_t j = i + static_cast<size_t>(rng.below(n - i));
      std::swap(positions[i], positions[j]);
      t.data[positions[i]] = 0.0f;
    }
  }
  out.meta["attack"] = "prune_random:" + std::to_string(ratio);
  return out;
}

Checkpoint quantize_int8_roundtrip(const Checkpoint& ckpt) {
  Checkpoint out = ckpt;
  for (auto& [name, t] : out.tensors) {
    if (attack_exempt(name)) continue;
    const int64_t rows = t.shape.size() >= 2 ? t.shape[0] : 1;
    const int64_t cols = t.numel() / rows;
    for (int64_t r = 0; r < rows; ++r) {
      float* row = t.data.data() + r * cols;
      float amax = 0.0f;
      for (int64_t j = 0; j < cols; ++j) amax = std::max(amax, std::fabs(row[j]));
      if (amax == 0.0f) continue;  // all-zero row passes through
      // double-precision scale keeps the round trip a fixed point
      const double scale = static_cast<double>(amax) / 127.0;
      for (int64_t j = 0; j < cols; ++j) {
        double q = std::round(static_cast<double>(row[j]) / scale);
        q = std::clamp(q, -127.0, 127.0);
        row[j] = static_cast<float>(q * scale);
      }
    }
  }
  out.meta["attack"] = "quantize_int8";
  return out;
}

FinetuneAttackResult finetune_attack(const Checkpoint& ckpt, const Corpus& corpus,
                                     const TrainConfig& cfg) {
  LanguageModel model = LanguageModel::from_checkpoint(ckpt);
  FinetuneAttackResult result;
  try {
    result.loss_curve = train(model, corpus, cfg).loss_curve;
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("finetune_attack: ") + e.what());
  }
  result.ckpt = model.to_checkpoint();
  result.ckpt.meta["attack"] = "finetune:" + corpus.id + ":" + std::to_string(cfg.steps);
  return result;
}

std::vector<SweepMethod> standard_sweep_methods() {
  // dare/della seeds are placeholders; merge_sweep re-seeds per cell
  return {
      {"ta", MergeRecipe::Method::kTaskArithmetic, {}},
      {"ties", MergeRecipe::Method::kTies, {PreprocessSpec::ties_trim(0.2f)}},
      {"della", MergeRecipe::Method::kTies, {PreprocessSpec::della(0.5f, 0.4f, 0)}},
      {"breadcrumbs", MergeRecipe::Method::kTaskArithmetic,
       {PreprocessSpec::breadcrumbs(0.85f, 0.01f)}},
      {"dare_ta", MergeRecipe::Method::kTaskArithmetic, {PreprocessSpec::dare(0.9f, 0)}},
      {"dare_ties", MergeRecipe::Method::kTies, {PreprocessSpec::dare(0.9f, 0)}},
      {"della_ta", MergeRecipe::Method::kTaskArithmetic, {PreprocessSpec::della(0.5f, 0.4f, 0)}},
      {"breadcrumbs_ties", MergeRecipe::Method::kTies,
       {PreprocessSpec::breadcrumbs(0.85f, 0.01f)}},
  };
}

SweepMethod sweep_method_by_name(const std::string& name) {
  for (SweepMethod& m : standard_sweep_methods()) {
    if (m.name == name) return m;
  }
  throw std::invalid_argument("unknown sweep method: " + name);
}

namespace {

std::vector<SweepCellResult> run_cells(const Registry& registry, const std::string& base_id,
                                       std::span<const SweepFingerprint> fingerprinted,
                                       std::span<const std::string> others,
                                       std::span<const SweepMethod> methods,
                                       std::span<const float> alphas, bool equal_proportions,
                                       const VerificationConfig& vcfg, uint64_t seed) {
  if (fingerprinted.empty()) {
    throw std::invalid_argument("merge_sweep: needs at least one fingerprinted model");
  }
  std::vector<SweepCellResult> results;
  for (const SweepMethod& method : methods) {
    std::vector<float> cell_alphas(alphas.begin(), alphas.end());
    if (equal_proportions) cell_alphas = {0.0f};  // single dummy cell
    for (size_t ai = 0; ai < cell_alphas.size(); ++ai) {
      const size_t n_models = fingerprinted.size() + others.size();
      std::vector<float> weights(n_models);
      float alpha = cell_alphas[ai];
      if (equal_proportions) {
        alpha = 1.0f / static_cast<float>(n_models);
        std::fill(weights.begin(), weights.end(), alpha);
      } else {
        weights[0] = alpha;
        const float rest = n_models > 1 ? (1.0f - alpha) / static_cast<float>(n_models - 1) : 0.0f;
        for (size_t i = 1; i < n_models; ++i) weights[i] = rest;
      }

      MergeRecipe recipe;
      recipe.base_id = base_id;
      recipe.method = method.method;
      size_t slot = 0;
      auto add_entry = [&](const std::string& id) {
        MergeEntry e;
        e.source_id = id;
        e.alpha = weights[slot];
        e.preprocess = method.preprocess;
        for (PreprocessSpec& s : e.preprocess) {
          s.seed = derive_seed(seed, method.name + ":" + std::to_string(ai) + ":" + id);
        }
        recipe.entries.push_back(std::move(e));
        ++slot;
      };
      for (const SweepFingerprint& f : fingerprinted) add_entry(f.model_id);
      for (const std::string& id : others) add_entry(id);

      const Checkpoint merged = merge(recipe, registry);
      const LanguageModel merged_lm = LanguageModel::from_checkpoint(merged);
      for (const SweepFingerprint& f : fingerprinted) {
        SweepCellResult cell;
        cell.method = method.name;
        cell.alpha = alpha;
        cell.fingerprint_id = f.pair.id;
        cell.report = vsr(merged_lm, f.pair, vcfg);
        results.push_back(std::move(cell));
      }
    }
  }
  return results;
}

}  // namespace

std::vector<SweepCellResult> merge_sweep(const Registry& registry, const std::string& base_id,
                                         std::span<const SweepFingerprint> fingerprinted,
                                         std::span<const std::string> others,
                                         std::span<const SweepMethod> methods,
                                         std::span<const float> alphas,
                                         const VerificationConfig& vcfg, uint64_t seed) {
  return run_cells(registry, base_id, fingerprinted, others, methods, alphas,
                   /*equal_proportions=*/false, vcfg, seed);
}

std::vector<SweepCellResult> merge_equal_and_verify(const Registry& registry,
                                                    const std::string& base_id,
                                                    std::span<const SweepFingerprint> fingerprinted,
                                                    std::span<const std::string> others,
                                                    std::span<const SweepMethod> methods,
                                                    const VerificationConfig& vcfg, uint64_t seed) {
  return run_cells(registry, base_id, fingerprinted, others, methods, {},
                   /*equal_proportions=*/true, vcfg, seed);
}

MultiFingerprintResult multi_fingerprint_stress(const Checkpoint& base, const Checkpoint& owner,
                                                std::span<const std::string> outputs,
                                                const OptIConfig& opti, const OptPConfig& optp,
                                                const VerificationConfig& vcfg) {
  if (outputs.empty()) throw std::invalid_argument("multi_fingerprint_stress: needs outputs");
  for (size_t i = 0; i < outputs.size(); ++i) {
    for (size_t j = i + 1; j < outputs.size(); ++j) {
      if (outputs[i] == outputs[j]) {
        throw std::invalid_argument("multi_fingerprint_stress: outputs must be distinct");
      }
    }
  }
  MultiFingerprintResult result;
  Checkpoint current = owner;
  for (size_t i = 0; i < outputs.size(); ++i) {
    OptIConfig oi = opti;
    oi.seed = derive_seed(opti.seed, 1000 + i);
    OptPConfig op = optp;
    op.seed = derive_seed(optp.seed, 2000 + i);
    const TokenSeq y = tokenize(outputs[i]);
    EmbedResult embedded = embed_fingerprint(base, current, y, oi, op, /*skip_opt_i=*/false,
                                             "fp" + std::to_string(i));
    current = std::move(embedded.fingerprinted);
    result.pairs.push_back(std::move(embedded.pair));
  }
  const LanguageModel final_lm = LanguageModel::from_checkpoint(current);
  for (const FingerprintPair& pair : result.pairs) {
    result.reports.push_back(vsr(final_lm, pair, vcfg));
  }
  result.final_model = std::move(current);
  return result;
}

}  // namespace mergefp
