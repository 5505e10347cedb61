#include "mergefp/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mergefp/attack.hpp"
#include "mergefp/fingerprint.hpp"
#include "mergefp/merge.hpp"
#include "mergefp/model.hpp"
#include "mergefp/rng.hpp"
#include "mergefp/verify.hpp"

namespace mergefp {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "0.1.0";

std::string fmt(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(v));
  return buf;
}

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

struct StageCtx {
  std::string experiment_id;
  uint64_t master_seed = 0;
  fs::path config_dir;
  fs::path run_dir;
  Registry registry;
  std::map<std::string, FingerprintPair> pairs;
  std::map<std::string, Corpus> corpora;
  // accumulated CSV rows for the report stage
  std::vector<std::string> verify_rows;
  std::vector<std::string> sweep_rows;
};

Corpus& resolve_corpus(StageCtx& ctx, const std::string& rel_path, double held_out_fraction) {
  auto it = ctx.corpora.find(rel_path);
  if (it != ctx.corpora.end()) return it->second;
  fs::path p = rel_path;
  if (p.is_relative()) p = ctx.config_dir / p;
  Corpus c = Corpus::from_file(p.string(), held_out_fraction);
  c.id = rel_path;
  return ctx.corpora.emplace(rel_path, std::move(c)).first->second;
}

const Checkpoint& resolve_model(const StageCtx& ctx, const std::string& id,
                                const std::string& stage_id) {
  auto it = ctx.registry.find(id);
  if (it == ctx.registry.end()) {
    throw StageError("stage " + stage_id + ": unresolved model id '" + id + "'");
  }
  return it->second;
}

const FingerprintPair& resolve_pair(const StageCtx& ctx, const std::string& id,
                                    const std::string& stage_id) {
  auto it = ctx.pairs.find(id);
  if (it == ctx.pairs.end()) {
    throw StageError("stage " + stage_id + ": unresolved pair id '" + id + "'");
  }
  return it->second;
}

std::string save_model_artifact(StageCtx& ctx, const std::string& stage_id,
                                const std::string& model_id, Checkpoint ckpt) {
  ckpt.meta["model_id"] = model_id;
  const fs::path dir = ctx.run_dir / stage_id;
  fs::create_directories(dir);
  const fs::path path = dir / (model_id + ".safetensors");
  save_checkpoint(ckpt, path.string());
  ctx.registry[model_id] = std::move(ckpt);
  return path.string();
}

TrainConfig train_config_from(const json& stage, uint64_t stage_seed) {
  TrainConfig cfg;
  cfg.steps = stage.value("steps", 1000);
  cfg.batch_size = stage.value("batch_size", 8);
  cfg.seq_len = stage.value("seq_len", 64);
  cfg.optimizer.lr = stage.value("lr", 1e-3f);
  const std::string opt = stage.value("optimizer", std::string("adam"));
  if (opt == "adam") cfg.optimizer.kind = OptimizerConfig::Kind::kAdam;
  else if (opt == "sgd") cfg.optimizer.kind = OptimizerConfig::Kind::kSgd;
  else throw ConfigError("optimizer must be 'adam' or 'sgd', got '" + opt + "'");
  cfg.seed = stage_seed;
  return cfg;
}

SamplingConfig sampling_from(const json& stage) {
  SamplingConfig s;
  if (!stage.contains("sampling")) return s;
  const json& j = stage.at("sampling");
  check_keys(j, {"temperature", "top_p", "top_k"}, "sampling");
  s.temperature = j.value("temperature", s.temperature);
  s.top_p = j.value("top_p", s.top_p);
  s.top_k = j.value("top_k", s.top_k);
  return s;
}

OptIConfig opti_from(const json& stage, uint64_t stage_seed) {
  OptIConfig cfg;
  if (stage.contains("opt_i")) {
    const json& j = stage.at("opt_i");
    check_keys(j, {"alpha_i", "lambda", "max_iters", "gcg_batch", "gcg_topk", "tau", "input_len"},
               "opt_i");
    cfg.alpha_i = j.value("alpha_i", cfg.alpha_i);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.max_iters = j.value("max_iters", cfg.max_iters);
    cfg.gcg_batch = j.value("gcg_batch", cfg.gcg_batch);
    cfg.gcg_topk = j.value("gcg_topk", cfg.gcg_topk);
    cfg.tau = j.value("tau", cfg.tau);
    cfg.input_len = j.value("input_len", cfg.input_len);
  }
  cfg.seed = derive_seed(stage_seed, "opt_i");
  return cfg;
}

OptPConfig optp_from(const json& stage, uint64_t stage_seed) {
  OptPConfig cfg;
  if (stage.contains("opt_p")) {
    const json& j = stage.at("opt_p");
    check_keys(j, {"alpha_p", "lr", "max_iters", "target_loss"}, "opt_p");
    cfg.alpha_p = j.value("alpha_p", cfg.alpha_p);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.max_iters = j.value("max_iters", cfg.max_iters);
    cfg.target_loss = j.value("target_loss", cfg.target_loss);
  }
  cfg.seed = derive_seed(stage_seed, "opt_p");
  return cfg;
}

constexpr const char* kVerifyHeader =
    "experiment_id,stage_id,model_id,fingerprint_id,temperature,top_p,top_k,n,successes,vsr,"
    "wilson_lo,wilson_hi\n";
constexpr const char* kSweepHeader =
    "experiment_id,stage_id,method,alpha,fingerprint_id,n,successes,vsr,wilson_lo,wilson_hi\n";

std::string verify_row(const StageCtx& ctx, const std::string& stage_id,
                       const std::string& model_id, const std::string& pair_id,
                       const VerificationReport& r) {
  std::ostringstream os;
  os << ctx.experiment_id << "," << stage_id << "," << model_id << "," << pair_id << ","
     << fmt(r.config.sampling.temperature) << "," << fmt(r.config.sampling.top_p) << ","
     << r.config.sampling.top_k << "," << r.n << "," << r.successes << "," << fmt(r.vsr) << ","
     << fmt(r.wilson_95.first) << "," << fmt(r.wilson_95.second) << "\n";
  return os.str();
}

std::string sweep_row(const StageCtx& ctx, const std::string& stage_id,
                      const SweepCellResult& cell) {
  std::ostringstream os;
  os << ctx.experiment_id << "," << stage_id << "," << cell.method << "," << fmt(cell.alpha) << ","
     << cell.fingerprint_id << "," << cell.report.n << "," << cell.report.successes << ","
     << fmt(cell.report.vsr) << "," << fmt(cell.report.wilson_95.first) << ","
     << fmt(cell.report.wilson_95.second) << "\n";
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw StageError("cannot write " + path.string());
  out << text;
}

// ---- stage executors ----------------------------------------------------

void run_train_like(StageCtx& ctx, const json& stage, StageRecord& rec, bool finetune) {
  const std::string id = stage.at("id").get<std::string>();
  const uint64_t stage_seed = derive_seed(ctx.master_seed, id);
  const std::string out_id = stage.at("out").get<std::string>();
  Corpus& corpus = resolve_corpus(ctx, stage.at("corpus").get<std::string>(),
                                  stage.value("held_out_fraction", 0.1));
  LanguageModel model;
  if (finetune) {
    model = LanguageModel::from_checkpoint(resolve_model(ctx, stage.at("model").get<std::string>(), id));
  } else {
    ModelConfig mc;
    if (stage.contains("model")) {
      const json& j = stage.at("model");
      check_keys(j, {"vocab_size", "d_model", "n_layers", "n_heads", "context_len"}, "model");
      mc.vocab_size = j.value("vocab_size", mc.vocab_size);
      mc.d_model = j.value("d_model", mc.d_model);
      mc.n_layers = j.value("n_layers", mc.n_layers);
      mc.n_heads = j.value("n_heads", mc.n_heads);
      mc.context_len = j.value("context_len", mc.context_len);
    }
    mc.seed = derive_seed(stage_seed, "init");
    model = LanguageModel::init(mc);
  }
  TrainConfig tc = train_config_from(stage, derive_seed(stage_seed, "train"));
  TrainResult tr = train(model, corpus, tc);
  Checkpoint ckpt = model.to_checkpoint();
  if (finetune) ckpt.meta["parent_id"] = stage.at("model").get<std::string>();
  rec.artifacts.push_back(save_model_artifact(ctx, id, out_id, std::move(ckpt)));

  std::ostringstream curve;
  curve << "step,loss\n";
  for (size_t i = 0; i < tr.loss_curve.size(); ++i) curve << i << "," << fmt(tr.loss_curve[i]) << "\n";
  const fs::path curve_path = ctx.run_dir / id / "loss_curve.csv";
  write_text(curve_path, curve.str());
  rec.artifacts.push_back(curve_path.string());
}

void run_embed(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const uint64_t stage_seed = derive_seed(ctx.master_seed, id);
  const Checkpoint& base = resolve_model(ctx, stage.at("base").get<std::string>(), id);
  const Checkpoint& owner = resolve_model(ctx, stage.at("owner").get<std::string>(), id);
  const std::string out_id = stage.at("out").get<std::string>();
  const std::string pair_id = stage.value("pair_out", out_id + "_pair");
  const TokenSeq y = tokenize(stage.at("y_text").get<std::string>());

  EmbedResult embedded = embed_fingerprint(base, owner, y, opti_from(stage, stage_seed),
                                           optp_from(stage, stage_seed),
                                           stage.value("skip_opt_i", false), pair_id);
  rec.artifacts.push_back(save_model_artifact(ctx, id, out_id, std::move(embedded.fingerprinted)));
  const fs::path pair_path = ctx.run_dir / id / (pair_id + ".json");
  save_pair(embedded.pair, pair_path.string());
  ctx.pairs[pair_id] = std::move(embedded.pair);
  rec.artifacts.push_back(pair_path.string());

  std::ostringstream trace;
  trace << "phase,iter,loss\n";
  for (size_t i = 0; i < embedded.trace.opti_target_loss.size(); ++i) {
    trace << "opti_target," << i << "," << fmt(embedded.trace.opti_target_loss[i]) << "\n";
  }
  for (size_t i = 0; i < embedded.trace.opti_base_loss.size(); ++i) {
    trace << "opti_base," << i << "," << fmt(embedded.trace.opti_base_loss[i]) << "\n";
  }
  for (size_t i = 0; i < embedded.trace.optp_loss.size(); ++i) {
    trace << "optp," << i << "," << fmt(embedded.trace.optp_loss[i]) << "\n";
  }
  const fs::path trace_path = ctx.run_dir / id / "trace.csv";
  write_text(trace_path, trace.str());
  rec.artifacts.push_back(trace_path.string());
}

void run_merge(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const std::string out_id = stage.at("out").get<std::string>();
  MergeRecipe recipe = MergeRecipe::from_json(stage.at("recipe").dump());
  Checkpoint merged = merge(recipe, ctx.registry);
  rec.artifacts.push_back(save_model_artifact(ctx, id, out_id, std::move(merged)));
}

void run_verify(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const uint64_t stage_seed = derive_seed(ctx.master_seed, id);
  const std::string model_id = stage.at("model").get<std::string>();
  const std::string pair_id = stage.at("pair").get<std::string>();
  const LanguageModel model = LanguageModel::from_checkpoint(resolve_model(ctx, model_id, id));
  const FingerprintPair& pair = resolve_pair(ctx, pair_id, id);

  VerificationConfig vcfg;
  vcfg.n_samples = stage.value("n", 100);
  vcfg.sampling = sampling_from(stage);
  vcfg.sampling.seed = derive_seed(stage_seed, "vsr");
  const VerificationReport report = vsr(model, pair, vcfg);

  const fs::path json_path = ctx.run_dir / id / "verify.json";
  write_text(json_path, report.to_json() + "\n");
  rec.artifacts.push_back(json_path.string());
  const std::string row = verify_row(ctx, id, model_id, pair_id, report);
  const fs::path csv_path = ctx.run_dir / id / "verify.csv";
  write_text(csv_path, std::string(kVerifyHeader) + row);
  rec.artifacts.push_back(csv_path.string());
  ctx.verify_rows.push_back(row);

  if (stage.contains("min_vsr") && report.vsr < stage.at("min_vsr").get<float>()) {
    throw ThresholdError("stage " + id + ": vsr " + fmt(report.vsr) + " below min_vsr " +
                         fmt(stage.at("min_vsr").get<float>()));
  }
}

void run_attack(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const uint64_t stage_seed = derive_seed(ctx.master_seed, id);
  const std::string out_id = stage.at("out").get<std::string>();
  const Checkpoint& target = resolve_model(ctx, stage.at("model").get<std::string>(), id);
  const std::string kind = stage.at("attack").get<std::string>();

  Checkpoint attacked;
  if (kind == "prune_magnitude") {
    attacked = prune_magnitude(target, stage.at("ratio").get<float>());
  } else if (kind == "prune_random") {
    attacked = prune_random(target, stage.at("ratio").get<float>(), derive_seed(stage_seed, "prune"));
  } else if (kind == "quantize_int8") {
    attacked = quantize_int8_roundtrip(target);
  } else if (kind == "finetune") {
    Corpus& corpus = resolve_corpus(ctx, stage.at("corpus").get<std::string>(),
                                    stage.value("held_out_fraction", 0.1));
    TrainConfig tc = train_config_from(stage, derive_seed(stage_seed, "attack"));
    attacked = finetune_attack(target, corpus, tc).ckpt;
  } else {
    throw ConfigError("stage " + id + ": unknown attack '" + kind + "'");
  }
  rec.artifacts.push_back(save_model_artifact(ctx, id, out_id, std::move(attacked)));
}

void run_sweep(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const uint64_t stage_seed = derive_seed(ctx.master_seed, id);
  std::vector<SweepFingerprint> fingerprinted;
  for (const json& f : stage.at("fingerprinted")) {
    check_keys(f, {"model", "pair"}, "sweep.fingerprinted");
    fingerprinted.push_back(
        {f.at("model").get<std::string>(), resolve_pair(ctx, f.at("pair").get<std::string>(), id)});
    resolve_model(ctx, fingerprinted.back().model_id, id);
  }
  std::vector<std::string> others;
  if (stage.contains("others")) others = stage.at("others").get<std::vector<std::string>>();
  for (const std::string& o : others) resolve_model(ctx, o, id);
  std::vector<SweepMethod> methods;
  for (const std::string& m : stage.at("methods").get<std::vector<std::string>>()) {
    methods.push_back(sweep_method_by_name(m));
  }
  std::vector<float> alphas;
  if (stage.contains("alphas")) alphas = stage.at("alphas").get<std::vector<float>>();

  VerificationConfig vcfg;
  vcfg.n_samples = stage.value("n", 100);
  vcfg.sampling = sampling_from(stage);
  vcfg.sampling.seed = derive_seed(stage_seed, "vsr");

  const std::string base_id = stage.at("base").get<std::string>();
  resolve_model(ctx, base_id, id);
  std::vector<SweepCellResult> cells;
  if (stage.value("equal_proportions", false)) {
    cells = merge_equal_and_verify(ctx.registry, base_id, fingerprinted, others, methods, vcfg,
                                   derive_seed(stage_seed, "cells"));
  } else {
    if (alphas.empty()) throw ConfigError("stage " + id + ": sweep needs alphas");
    cells = merge_sweep(ctx.registry, base_id, fingerprinted, others, methods, alphas, vcfg,
                        derive_seed(stage_seed, "cells"));
  }

  std::string csv(kSweepHeader);
  float min_vsr_seen = 1.0f;
  for (const SweepCellResult& cell : cells) {
    const std::string row = sweep_row(ctx, id, cell);
    csv += row;
    ctx.sweep_rows.push_back(row);
    min_vsr_seen = std::min(min_vsr_seen, cell.report.vsr);
  }
  const fs::path csv_path = ctx.run_dir / id / "sweep.csv";
  write_text(csv_path, csv);
  rec.artifacts.push_back(csv_path.string());

  if (stage.contains("min_vsr") && min_vsr_seen < stage.at("min_vsr").get<float>()) {
    throw ThresholdError("stage " + id + ": sweep min vsr " + fmt(min_vsr_seen) +
                         " below min_vsr " + fmt(stage.at("min_vsr").get<float>()));
  }
}

void run_report(StageCtx& ctx, const json& stage, StageRecord& rec) {
  const std::string id = stage.at("id").get<std::string>();
  const fs::path dir = ctx.run_dir / "report";
  std::string verify_csv(kVerifyHeader);
  for (const std::string& row : ctx.verify_rows) verify_csv += row;
  std::string sweep_csv(kSweepHeader);
  for (const std::string& row : ctx.sweep_rows) sweep_csv += row;
  write_text(dir / "all_verify.csv", verify_csv);
  write_text(dir / "all_sweep.csv", sweep_csv);
  rec.artifacts.push_back((dir / "all_verify.csv").string());
  rec.artifacts.push_back((dir / "all_sweep.csv").string());
  (void)stage;
  (void)id;
}

const std::map<std::string, std::vector<std::string>>& stage_schemas() {
  static const std::map<std::string, std::vector<std::string>> schemas = {
      {"train",
       {"id", "kind", "corpus", "out", "steps", "batch_size", "seq_len", "lr", "optimizer",
        "model", "held_out_fraction"}},
      {"finetune",
       {"id", "kind", "corpus", "model", "out", "steps", "batch_size", "seq_len", "lr",
        "optimizer", "held_out_fraction"}},
      {"embed",
       {"id", "kind", "base", "owner", "y_text", "out", "pair_out", "skip_opt_i", "opt_i",
        "opt_p"}},
      {"merge", {"id", "kind", "recipe", "out"}},
      {"verify", {"id", "kind", "model", "pair", "n", "sampling", "min_vsr"}},
      {"attack",
       {"id", "kind", "model", "attack", "ratio", "out", "corpus", "steps", "batch_size",
        "seq_len", "lr", "optimizer", "held_out_fraction"}},
      {"sweep",
       {"id", "kind", "base", "fingerprinted", "others", "methods", "alphas",
        "equal_proportions", "n", "sampling", "min_vsr"}},
      {"report", {"id", "kind"}},
  };
  return schemas;
}

json load_and_validate(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config " + config_path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  check_keys(cfg, {"schema_version", "experiment_id", "master_seed", "registry", "stages"},
             "config");
  if (cfg.value("schema_version", 0) != 1) {
    throw ConfigError("config: schema_version must be 1");
  }
  if (!cfg.contains("experiment_id") || !cfg.contains("master_seed") || !cfg.contains("stages")) {
    throw ConfigError("config: experiment_id, master_seed and stages are required");
  }

  // reference checking: every stage input must resolve to an earlier output
  // or a registry entry
  std::vector<std::string> model_ids, pair_ids;
  if (cfg.contains("registry")) {
    for (const json& r : cfg.at("registry")) {
      check_keys(r, {"id", "path"}, "registry");
      model_ids.push_back(r.at("id").get<std::string>());
    }
  }
  auto known_model = [&](const std::string& m) {
    return std::find(model_ids.begin(), model_ids.end(), m) != model_ids.end();
  };
  auto known_pair = [&](const std::string& p) {
    return std::find(pair_ids.begin(), pair_ids.end(), p) != pair_ids.end();
  };

  std::vector<std::string> stage_ids;
  for (const json& stage : cfg.at("stages")) {
    if (!stage.contains("id") || !stage.contains("kind")) {
      throw ConfigError("config: every stage needs id and kind");
    }
    const std::string id = stage.at("id").get<std::string>();
    const std::string kind = stage.at("kind").get<std::string>();
    if (std::find(stage_ids.begin(), stage_ids.end(), id) != stage_ids.end()) {
      throw ConfigError("config: duplicate stage id '" + id + "'");
    }
    stage_ids.push_back(id);
    auto schema = stage_schemas().find(kind);
    if (schema == stage_schemas().end()) {
      throw ConfigError("stage " + id + ": unknown kind '" + kind + "'");
    }
    check_keys(stage, schema->second, "stage " + id);

    auto need_model = [&](const char* key) {
      if (!stage.contains(key)) throw ConfigError("stage " + id + ": missing '" + key + "'");
      const std::string m = stage.at(key).get<std::string>();
      if (!known_model(m)) {
        throw ConfigError("stage " + id + ": reference '" + m + "' does not resolve to an earlier output or registry entry");
      }
    };
    if (kind == "train") {
      model_ids.push_back(stage.at("out").get<std::string>());
    } else if (kind == "finetune") {
      need_model("model");
      model_ids.push_back(stage.at("out").get<std::string>());
    } else if (kind == "embed") {
      need_model("base");
      need_model("owner");
      model_ids.push_back(stage.at("out").get<std::string>());
      pair_ids.push_back(stage.value("pair_out", stage.at("out").get<std::string>() + "_pair"));
    } else if (kind == "merge") {
      if (!stage.contains("recipe")) throw ConfigError("stage " + id + ": missing recipe");
      MergeRecipe recipe = MergeRecipe::from_json(stage.at("recipe").dump());
      if (!known_model(recipe.base_id)) {
        throw ConfigError("stage " + id + ": recipe base '" + recipe.base_id + "' unresolved");
      }
      for (const MergeEntry& e : recipe.entries) {
        if (!known_model(e.source_id)) {
          throw ConfigError("stage " + id + ": recipe source '" + e.source_id + "' unresolved");
        }
      }
      model_ids.push_back(stage.at("out").get<std::string>());
    } else if (kind == "verify") {
      need_model("model");
      if (!known_pair(stage.at("pair").get<std::string>())) {
        throw ConfigError("stage " + id + ": pair '" + stage.at("pair").get<std::string>() +
                          "' unresolved");
      }
    } else if (kind == "attack") {
      need_model("model");
      model_ids.push_back(stage.at("out").get<std::string>());
    } else if (kind == "sweep") {
      need_model("base");
      for (const json& f : stage.at("fingerprinted")) {
        const std::string m = f.at("model").get<std::string>();
        const std::string p = f.at("pair").get<std::string>();
        if (!known_model(m)) throw ConfigError("stage " + id + ": model '" + m + "' unresolved");
        if (!known_pair(p)) throw ConfigError("stage " + id + ": pair '" + p + "' unresolved");
      }
      if (stage.contains("others")) {
        for (const std::string& o : stage.at("others").get<std::vector<std::string>>()) {
          if (!known_model(o)) throw ConfigError("stage " + id + ": model '" + o + "' unresolved");
        }
      }
      for (const std::string& m : stage.at("methods").get<std::vector<std::string>>()) {
        sweep_method_by_name(m);  // throws on typos
      }
    }
  }
  return cfg;
}

}  // namespace

std::string RunManifest::to_json() const {
  json j;
  j["experiment_id"] = experiment_id;
  j["config_hash"] = config_hash;
  j["master_seed"] = master_seed;
  j["run_dir"] = run_dir;
  j["version"] = version;
  j["stages"] = json::array();
  for (const StageRecord& s : stages) {
    j["stages"].push_back({{"id", s.id},
                           {"kind", s.kind},
                           {"artifacts", s.artifacts},
                           {"artifact_hashes", s.artifact_hashes},
                           {"wall_ms", s.wall_ms}});
  }
  return j.dump(2);
}

void validate_experiment_config(const std::string& config_path) {
  load_and_validate(config_path);
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("fnv1a64_file: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  return h;
}

std::string default_run_root() {
  const char* env = std::getenv("MERGEFP_RUN_ROOT");
  return env && *env ? env : "runs";
}

RunManifest run_experiment(const std::string& config_path, const std::string& run_root) {
  const json cfg = load_and_validate(config_path);

  StageCtx ctx;
  ctx.experiment_id = cfg.at("experiment_id").get<std::string>();
  ctx.master_seed = cfg.at("master_seed").get<uint64_t>();
  ctx.config_dir = fs::absolute(fs::path(config_path)).parent_path();
  ctx.run_dir = fs::path(run_root) / ctx.experiment_id;
  fs::create_directories(ctx.run_dir);

  RunManifest manifest;
  manifest.experiment_id = ctx.experiment_id;
  manifest.config_hash = fnv1a64_file(config_path);
  manifest.master_seed = ctx.master_seed;
  manifest.run_dir = ctx.run_dir.string();
  manifest.version = kVersion;

  if (cfg.contains("registry")) {
    for (const json& r : cfg.at("registry")) {
      fs::path p = r.at("path").get<std::string>();
      if (p.is_relative()) p = ctx.config_dir / p;
      try {
        ctx.registry[r.at("id").get<std::string>()] = load_checkpoint(p.string());
      } catch (const std::exception& e) {
        throw ConfigError("registry entry '" + r.at("id").get<std::string>() + "': " + e.what());
      }
    }
  }

  for (const json& stage : cfg.at("stages")) {
    const std::string id = stage.at("id").get<std::string>();
    const std::string kind = stage.at("kind").get<std::string>();
    StageRecord rec;
    rec.id = id;
    rec.kind = kind;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (kind == "train") run_train_like(ctx, stage, rec, /*finetune=*/false);
      else if (kind == "finetune") run_train_like(ctx, stage, rec, /*finetune=*/true);
      else if (kind == "embed") run_embed(ctx, stage, rec);
      else if (kind == "merge") run_merge(ctx, stage, rec);
      else if (kind == "verify") run_verify(ctx, stage, rec);
      else if (kind == "attack") run_attack(ctx, stage, rec);
      else if (kind == "sweep") run_sweep(ctx, stage, rec);
      else if (kind == "report") run_report(ctx, stage, rec);
    } catch (const ThresholdError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("stage " + id + " (" + kind + ") failed: " + e.what());
    }
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    for (const std::string& a : rec.artifacts) rec.artifact_hashes.push_back(fnv1a64_file(a));
    manifest.stages.push_back(std::move(rec));
  }

  write_text(ctx.run_dir / "manifest.json", manifest.to_json() + "\n");
  return manifest;
}

std::vector<std::string> write_report(const std::string& run_dir) {
  // gather the per-stage CSVs already on disk, in stage order per manifest
  const fs::path dir(run_dir);
  std::ifstream in(dir / "manifest.json");
  if (!in) throw StageError("write_report: no manifest.json under " + run_dir);
  json manifest = json::parse(in);

  std::string verify_csv(kVerifyHeader);
  std::string sweep_csv(kSweepHeader);
  auto append_rows = [](std::string& dst, const fs::path& src) {
    std::ifstream f(src);
    if (!f) return;
    std::string line;
    std::getline(f, line);  // drop header
    while (std::getline(f, line)) dst += line + "\n";
  };
  for (const json& s : manifest.at("stages")) {
    const std::string kind = s.at("kind").get<std::string>();
    const std::string id = s.at("id").get<std::string>();
    if (kind == "verify") append_rows(verify_csv, dir / id / "verify.csv");
    if (kind == "sweep") append_rows(sweep_csv, dir / id / "sweep.csv");
  }
  write_text(dir / "report" / "all_verify.csv", verify_csv);
  write_text(dir / "report" / "all_sweep.csv", sweep_csv);
  return {(dir / "report" / "all_verify.csv").string(),
          (dir / "report" / "all_sweep.csv").string()};
}

}  // namespace mergefp
