#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mergefp/attack.hpp"
#include "mergefp/experiment.hpp"
#include "mergefp/fingerprint.hpp"
#include "mergefp/merge.hpp"
#include "mergefp/model.hpp"
#include "mergefp/ops.hpp"
#include "mergefp/rng.hpp"
#include "mergefp/verify.hpp"

namespace {

using namespace mergefp;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitThreshold = 4;

Registry load_registry(const std::vector<std::string>& entries) {
  Registry reg;
  for (const std::string& e : entries) {
    const size_t eq = e.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--model expects id=path, got '" + e + "'");
    }
    reg[e.substr(0, eq)] = load_checkpoint(e.substr(eq + 1));
  }
  return reg;
}

int cmd_train(const std::string& corpus_path, const std::string& out, int steps, int batch_size,
              int seq_len, float lr, const std::string& optimizer, ModelConfig mc, uint64_t seed,
              double held_out_fraction) {
  Corpus corpus = Corpus::from_file(corpus_path, held_out_fraction);
  mc.seed = derive_seed(seed, "init");
  LanguageModel model = LanguageModel::init(mc);
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch_size;
  tc.seq_len = seq_len;
  tc.optimizer.lr = lr;
  tc.optimizer.kind =
      optimizer == "sgd" ? OptimizerConfig::Kind::kSgd : OptimizerConfig::Kind::kAdam;
  tc.seed = derive_seed(seed, "train");
  TrainResult result = train(model, corpus, tc);
  Checkpoint ckpt = model.to_checkpoint();
  ckpt.meta["model_id"] = std::filesystem::path(out).stem().string();
  save_checkpoint(ckpt, out);
  std::cout << "trained " << model.num_params() << " params, final loss "
            << (result.loss_curve.empty() ? 0.0f : result.loss_curve.back()) << ", wrote " << out
            << "\n";
  return kExitOk;
}

int cmd_finetune(const std::string& model_path, const std::string& corpus_path,
                 const std::string& out, int steps, int batch_size, int seq_len, float lr,
                 const std::string& optimizer, uint64_t seed, double held_out_fraction) {
  Corpus corpus = Corpus::from_file(corpus_path, held_out_fraction);
  LanguageModel model = LanguageModel::from_checkpoint(load_checkpoint(model_path));
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch_size;
  tc.seq_len = seq_len;
  tc.optimizer.lr = lr;
  tc.optimizer.kind =
      optimizer == "sgd" ? OptimizerConfig::Kind::kSgd : OptimizerConfig::Kind::kAdam;
  tc.seed = derive_seed(seed, "finetune");
  TrainResult result = train(model, corpus, tc);
  Checkpoint ckpt = model.to_checkpoint();
  if (auto it = ckpt.meta.find("model_id"); it != ckpt.meta.end()) {
    ckpt.meta["parent_id"] = it->second;
  }
  ckpt.meta["model_id"] = std::filesystem::path(out).stem().string();
  save_checkpoint(ckpt, out);
  std::cout << "finetuned, final loss "
            << (result.loss_curve.empty() ? 0.0f : result.loss_curve.back()) << ", wrote " << out
            << "\n";
  return kExitOk;
}

int cmd_embed(const std::string& base_path, const std::string& owner_path, const std::string& y,
              const std::string& out, const std::string& pair_out, bool skip_opt_i,
              const OptIConfig& opti, const OptPConfig& optp) {
  const Checkpoint base = load_checkpoint(base_path);
  const Checkpoint owner = load_checkpoint(owner_path);
  EmbedResult result = embed_fingerprint(base, owner, tokenize(y), opti, optp, skip_opt_i,
                                         std::filesystem::path(pair_out).stem().string());
  save_checkpoint(result.fingerprinted, out);
  save_pair(result.pair, pair_out);
  std::cout << "embedded fingerprint (" << result.trace.opti_iters << " input iters, "
            << result.trace.optp_iters << " param steps"
            << (result.trace.guard_fired ? ", guard fired" : "") << "), wrote " << out << " and "
            << pair_out << "\n";
  return kExitOk;
}

int cmd_merge(const std::string& recipe_path, const std::vector<std::string>& models,
              const std::string& out) {
  std::ifstream in(recipe_path);
  if (!in) throw ConfigError("cannot open recipe " + recipe_path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const MergeRecipe recipe = MergeRecipe::from_json(text);
  Registry reg = load_registry(models);
  Checkpoint merged = merge(recipe, reg);
  merged.meta["model_id"] = std::filesystem::path(out).stem().string();
  save_checkpoint(merged, out);
  std::cout << "merged " << recipe.entries.size() << " models, wrote " << out << "\n";
  return kExitOk;
}

int cmd_verify(const std::string& model_path, const std::string& pair_path, int n,
               const SamplingConfig& sampling, float min_vsr, const std::string& json_out) {
  const LanguageModel model = LanguageModel::from_checkpoint(load_checkpoint(model_path));
  const FingerprintPair pair = load_pair(pair_path);
  VerificationConfig cfg;
  cfg.n_samples = n;
  cfg.sampling = sampling;
  const VerificationReport report = vsr(model, pair, cfg);
  if (!json_out.empty()) {
    std::ofstream out(json_out, std::ios::trunc);
    out << report.to_json() << "\n";
  }
  std::cout << "vsr " << report.vsr << " (" << report.successes << "/" << report.n << ", 95% ["
            << report.wilson_95.first << "," << report.wilson_95.second << "])\n";
  if (min_vsr >= 0.0f && report.vsr < min_vsr) {
    std::cerr << "vsr below threshold " << min_vsr << "\n";
    return kExitThreshold;
  }
  return kExitOk;
}

int cmd_attack(const std::string& model_path, const std::string& kind, float ratio, uint64_t seed,
               const std::string& out, const std::string& corpus_path, int steps, float lr) {
  const Checkpoint target = load_checkpoint(model_path);
  Checkpoint attacked;
  if (kind == "prune_magnitude") {
    attacked = prune_magnitude(target, ratio);
  } else if (kind == "prune_random") {
    attacked = prune_random(target, ratio, seed);
  } else if (kind == "quantize_int8") {
    attacked = quantize_int8_roundtrip(target);
  } else if (kind == "finetune") {
    if (corpus_path.empty()) throw ConfigError("attack finetune needs --corpus");
    Corpus corpus = Corpus::from_file(corpus_path);
    TrainConfig tc;
    tc.steps = steps;
    tc.optimizer.lr = lr;
    tc.seed = derive_seed(seed, "attack");
    attacked = finetune_attack(target, corpus, tc).ckpt;
  } else {
    throw ConfigError("unknown attack kind '" + kind + "'");
  }
  attacked.meta["model_id"] = std::filesystem::path(out).stem().string();
  save_checkpoint(attacked, out);
  std::cout << "applied " << kind << ", wrote " << out << "\n";
  return kExitOk;
}

int cmd_sweep(const std::string& base_path, const std::vector<std::string>& fp_models,
              const std::vector<std::string>& fp_pairs, const std::vector<std::string>& others,
              const std::vector<std::string>& method_names, const std::vector<float>& alphas,
              bool equal_proportions, int n, const SamplingConfig& sampling, uint64_t seed,
              const std::string& out, float min_vsr) {
  if (fp_models.size() != fp_pairs.size() || fp_models.empty()) {
    throw ConfigError("sweep needs matching --fp-model/--fp-pair lists");
  }
  Registry reg;
  reg["base"] = load_checkpoint(base_path);
  std::vector<SweepFingerprint> fingerprinted;
  for (size_t i = 0; i < fp_models.size(); ++i) {
    const std::string id = "fp" + std::to_string(i);
    reg[id] = load_checkpoint(fp_models[i]);
    fingerprinted.push_back({id, load_pair(fp_pairs[i])});
  }
  std::vector<std::string> other_ids;
  for (size_t i = 0; i < others.size(); ++i) {
    const std::string id = "other" + std::to_string(i);
    reg[id] = load_checkpoint(others[i]);
    other_ids.push_back(id);
  }
  std::vector<SweepMethod> methods;
  for (const std::string& m : method_names) methods.push_back(sweep_method_by_name(m));

  VerificationConfig vcfg;
  vcfg.n_samples = n;
  vcfg.sampling = sampling;

  std::vector<SweepCellResult> cells;
  if (equal_proportions) {
    cells = merge_equal_and_verify(reg, "base", fingerprinted, other_ids, methods, vcfg, seed);
  } else {
    if (alphas.empty()) throw ConfigError("sweep needs --alphas");
    cells = merge_sweep(reg, "base", fingerprinted, other_ids, methods, alphas, vcfg, seed);
  }

  std::ofstream csv(out, std::ios::trunc);
  csv << "method,alpha,fingerprint_id,n,successes,vsr,wilson_lo,wilson_hi\n";
  float min_seen = 1.0f;
  for (const SweepCellResult& c : cells) {
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%.6f,%s,%d,%d,%.6f,%.6f,%.6f\n", c.method.c_str(),
                  static_cast<double>(c.alpha), c.fingerprint_id.c_str(), c.report.n,
                  c.report.successes, static_cast<double>(c.report.vsr),
                  static_cast<double>(c.report.wilson_95.first),
                  static_cast<double>(c.report.wilson_95.second));
    csv << row;
    min_seen = std::min(min_seen, c.report.vsr);
  }
  std::cout << "swept " << cells.size() << " cells, wrote " << out << "\n";
  if (min_vsr >= 0.0f && min_seen < min_vsr) {
    std::cerr << "sweep min vsr " << min_seen << " below threshold " << min_vsr << "\n";
    return kExitThreshold;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"merge-resistant fingerprinting lab for tiny byte-level language models"};
  app.require_subcommand(1);
  int jobs = 0;
  app.add_option("--jobs", jobs, "cap worker threads (0 = hardware)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
  std::string corpus_path, out_path = "model.safetensors", optimizer = "adam";
  int steps = 1000, batch_size = 8, seq_len = 64;
  float lr = 1e-3f;
  double held_out_fraction = 0.1;
  uint64_t seed = 0;
  ModelConfig mc;
  train_cmd->add_option("--corpus", corpus_path)->required();
  train_cmd->add_option("--out", out_path);
  train_cmd->add_option("--steps", steps);
  train_cmd->add_option("--batch-size", batch_size);
  train_cmd->add_option("--seq-len", seq_len);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--held-out-fraction", held_out_fraction);
  train_cmd->add_option("--vocab-size", mc.vocab_size);
  train_cmd->add_option("--d-model", mc.d_model);
  train_cmd->add_option("--n-layers", mc.n_layers);
  train_cmd->add_option("--n-heads", mc.n_heads);
  train_cmd->add_option("--context-len", mc.context_len);

  // finetune
  auto* ft_cmd = app.add_subcommand("finetune", "continue training an existing model");
  std::string ft_model;
  ft_cmd->add_option("--model", ft_model)->required();
  ft_cmd->add_option("--corpus", corpus_path)->required();
  ft_cmd->add_option("--out", out_path);
  ft_cmd->add_option("--steps", steps);
  ft_cmd->add_option("--batch-size", batch_size);
  ft_cmd->add_option("--seq-len", seq_len);
  ft_cmd->add_option("--lr", lr);
  ft_cmd->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  ft_cmd->add_option("--seed", seed);
  ft_cmd->add_option("--held-out-fraction", held_out_fraction);

  // embed
  auto* embed_cmd = app.add_subcommand("embed", "embed a fingerprint into an owner model");
  std::string base_path, owner_path, y_text, pair_out = "pair.json";
  bool skip_opt_i = false;
  OptIConfig opti;
  OptPConfig optp;
  embed_cmd->add_option("--base", base_path)->required();
  embed_cmd->add_option("--owner", owner_path)->required();
  embed_cmd->add_option("--y", y_text)->required();
  embed_cmd->add_option("--out", out_path);
  embed_cmd->add_option("--pair", pair_out);
  embed_cmd->add_flag("--skip-opt-i", skip_opt_i, "embed the random init directly");
  embed_cmd->add_option("--alpha-i", opti.alpha_i);
  embed_cmd->add_option("--lambda", opti.lambda);
  embed_cmd->add_option("--opti-iters", opti.max_iters);
  embed_cmd->add_option("--gcg-batch", opti.gcg_batch);
  embed_cmd->add_option("--gcg-topk", opti.gcg_topk);
  embed_cmd->add_option("--tau", opti.tau);
  embed_cmd->add_option("--input-len", opti.input_len);
  embed_cmd->add_option("--alpha-p", optp.alpha_p);
  embed_cmd->add_option("--optp-lr", optp.lr);
  embed_cmd->add_option("--optp-iters", optp.max_iters);
  embed_cmd->add_option("--target-loss", optp.target_loss);
  embed_cmd->add_option("--seed", seed);

  // merge
  auto* merge_cmd = app.add_subcommand("merge", "merge models per a recipe JSON");
  std::string recipe_path;
  std::vector<std::string> model_entries;
  merge_cmd->add_option("--recipe", recipe_path)->required();
  merge_cmd->add_option("--model", model_entries, "id=path (repeatable)")->required();
  merge_cmd->add_option("--out", out_path);

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "estimate the verification success rate");
  std::string verify_model, verify_pair, verify_json;
  int n_samples = 100;
  SamplingConfig sampling;
  float min_vsr = -1.0f;
  verify_cmd->add_option("--model", verify_model)->required();
  verify_cmd->add_option("--pair", verify_pair)->required();
  verify_cmd->add_option("--n", n_samples);
  verify_cmd->add_option("--temperature", sampling.temperature);
  verify_cmd->add_option("--top-p", sampling.top_p);
  verify_cmd->add_option("--top-k", sampling.top_k);
  verify_cmd->add_option("--seed", sampling.seed);
  verify_cmd->add_option("--min-vsr", min_vsr, "exit 4 if the estimate falls below");
  verify_cmd->add_option("--json", verify_json, "write the full report here");

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "apply a parameter modification");
  std::string attack_model, attack_kind;
  float ratio = 0.0f;
  attack_cmd->add_option("--model", attack_model)->required();
  attack_cmd->add_option("--kind", attack_kind)
      ->required()
      ->check(CLI::IsMember({"prune_magnitude", "prune_random", "quantize_int8", "finetune"}));
  attack_cmd->add_option("--ratio", ratio);
  attack_cmd->add_option("--seed", seed);
  attack_cmd->add_option("--out", out_path);
  attack_cmd->add_option("--corpus", corpus_path);
  attack_cmd->add_option("--steps", steps);
  attack_cmd->add_option("--lr", lr);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "merge-and-verify grid");
  std::string sweep_base, sweep_out = "sweep.csv";
  std::vector<std::string> fp_models, fp_pairs, sweep_others, sweep_methods;
  std::vector<float> sweep_alphas;
  bool equal_proportions = false;
  sweep_cmd->add_option("--base", sweep_base)->required();
  sweep_cmd->add_option("--fp-model", fp_models, "fingerprinted model path (repeatable)")->required();
  sweep_cmd->add_option("--fp-pair", fp_pairs, "matching pair JSON (repeatable)")->required();
  sweep_cmd->add_option("--other", sweep_others, "additional expert model path (repeatable)");
  sweep_cmd->add_option("--methods", sweep_methods)->required();
  sweep_cmd->add_option("--alphas", sweep_alphas);
  sweep_cmd->add_flag("--equal-proportions", equal_proportions);
  sweep_cmd->add_option("--n", n_samples);
  sweep_cmd->add_option("--temperature", sampling.temperature);
  sweep_cmd->add_option("--top-p", sampling.top_p);
  sweep_cmd->add_option("--top-k", sampling.top_k);
  sweep_cmd->add_option("--seed", seed);
  sweep_cmd->add_option("--out", sweep_out);
  sweep_cmd->add_option("--min-vsr", min_vsr);

  // run / report
  auto* run_cmd = app.add_subcommand("run", "execute a declarative experiment config");
  std::string config_path, run_root = default_run_root();
  run_cmd->add_option("config", config_path)->required();
  run_cmd->add_option("--run-root", run_root);

  auto* report_cmd = app.add_subcommand("report", "rebuild consolidated CSVs for a run dir");
  std::string report_dir;
  report_cmd->add_option("run_dir", report_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (jobs > 0) set_max_threads(jobs);

  try {
    if (*train_cmd) {
      return cmd_train(corpus_path, out_path, steps, batch_size, seq_len, lr, optimizer, mc, seed,
                       held_out_fraction);
    }
    if (*ft_cmd) {
      return cmd_finetune(ft_model, corpus_path, out_path, steps, batch_size, seq_len, lr,
                          optimizer, seed, held_out_fraction);
    }
    if (*embed_cmd) {
      opti.seed = derive_seed(seed, "opt_i");
      optp.seed = derive_seed(seed, "opt_p");
      return cmd_embed(base_path, owner_path, y_text, out_path, pair_out, skip_opt_i, opti, optp);
    }
    if (*merge_cmd) return cmd_merge(recipe_path, model_entries, out_path);
    if (*verify_cmd) {
      return cmd_verify(verify_model, verify_pair, n_samples, sampling, min_vsr, verify_json);
    }
    if (*attack_cmd) {
      return cmd_attack(attack_model, attack_kind, ratio, seed, out_path, corpus_path, steps, lr);
    }
    if (*sweep_cmd) {
      return cmd_sweep(sweep_base, fp_models, fp_pairs, sweep_others, sweep_methods, sweep_alphas,
                       equal_proportions, n_samples, sampling, seed, sweep_out, min_vsr);
    }
    if (*run_cmd) {
      RunManifest manifest = run_experiment(config_path, run_root);
      std::cout << "run complete: " << manifest.run_dir << " (" << manifest.stages.size()
                << " stages)\n";
      return kExitOk;
    }
    if (*report_cmd) {
      for (const std::string& p : write_report(report_dir)) std::cout << "wrote " << p << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ThresholdError& e) {
    std::cerr << "threshold failure: " << e.what() << "\n";
    return kExitThreshold;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitOk;
}
