#include "mergefp/fingerprint.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mergefp/merge.hpp"
#include "mergefp/ops.hpp"
#include "mergefp/rng.hpp"
#include "mergefp/tensor.hpp"

namespace mergefp {

namespace {

using nlohmann::json;

constexpr int kPrintableLo = 32;
constexpr int kPrintableHi = 126;  // inclusive

std::string printable_lossy(std::span<const Token> tokens) {
  std::string out;
  for (Token t : tokens) {
    if (t >= kPrintableLo && t <= kPrintableHi) {
      out.push_back(static_cast<char>(t));
    } else {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned>(t) & 0xff);
      out += buf;
    }
  }
  return out;
}

float base_loss_of(const LanguageModel& base_lm, std::span<const Token> x,
                   std::span<const Token> y) {
  return pair_loss_value(base_lm, x, y);
}

}  // namespace

std::string FingerprintPair::to_json() const {
  json j;
  j["id"] = id;
  j["x_tokens"] = x;
  j["x_text_lossy"] = printable_lossy(x);
  j["y_tokens"] = y;
  j["y_text"] = printable_lossy(y);
  j["origin"] = x_origin == Origin::kOptimized ? "optimized" : "random_init";
  return j.dump(2);
}

FingerprintPair FingerprintPair::from_json(const std::string& text) {
  json j = json::parse(text);
  FingerprintPair p;
  p.id = j.at("id").get<std::string>();
  p.x = j.at("x_tokens").get<TokenSeq>();
  p.y = j.at("y_tokens").get<TokenSeq>();
  const std::string origin = j.at("origin").get<std::string>();
  if (origin == "optimized") p.x_origin = Origin::kOptimized;
  else if (origin == "random_init") p.x_origin = Origin::kRandomInit;
  else throw std::invalid_argument("FingerprintPair: unknown origin " + origin);
  return p;
}

void save_pair(const FingerprintPair& pair, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_pair: cannot open " + path);
  out << pair.to_json() << "\n";
}

FingerprintPair load_pair(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_pair: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return FingerprintPair::from_json(ss.str());
}

float scaled_tau(int vocab_size) {
  return 3.5f * std::log(static_cast<float>(vocab_size)) / std::log(32000.0f);
}

void OptIConfig::validate() const {
  if (lambda < 0.0f) throw std::invalid_argument("OptIConfig: lambda must be >= 0");
  if (tau < 0.0f) throw std::invalid_argument("OptIConfig: tau must be > 0 (or 0 for scaled default)");
  if (!(alpha_i > 0.0f && alpha_i <= 1.0f)) {
    throw std::invalid_argument("OptIConfig: alpha_i must be in (0,1]");
  }
  if (max_iters < 0 || gcg_batch < 1 || gcg_topk < 1 || input_len < 1) {
    throw std::invalid_argument("OptIConfig: max_iters >= 0, gcg_batch/topk/input_len >= 1");
  }
}

void OptPConfig::validate() const {
  if (!(alpha_p > 0.0f && alpha_p <= 1.0f)) {
    throw std::invalid_argument("OptPConfig: alpha_p must be in (0,1]");
  }
  if (!(lr > 0.0f)) throw std::invalid_argument("OptPConfig: lr must be > 0");
  if (max_iters < 0 || target_loss < 0.0f) {
    throw std::invalid_argument("OptPConfig: max_iters >= 0 and target_loss >= 0");
  }
}

TokenSeq init_random_input(int length, uint64_t seed) {
  if (length < 1) throw std::invalid_argument("init_random_input: length must be >= 1");
  Rng rng(derive_seed(seed, "random-input"));
  TokenSeq x(static_cast<size_t>(length));
  for (Token& t : x) {
    t = kPrintableLo + static_cast<int>(rng.below(kPrintableHi - kPrintableLo + 1));
  }
  return x;
}

GcgStepResult gcg_step(const LanguageModel& target_model, const LanguageModel& base_model,
                       std::span<const Token> x, std::span<const Token> y, float lambda,
                       int batch, int topk, uint64_t seed, std::span<const Token> allowed) {
  if (x.empty()) throw std::invalid_argument("gcg_step: x must be non-empty");
  const int v = target_model.config().vocab_size;
  const int t = static_cast<int>(x.size());

  std::vector<Token> alphabet;
  if (allowed.empty()) {
    alphabet.resize(static_cast<size_t>(v));
    std::iota(alphabet.begin(), alphabet.end(), 0);
  } else {
    alphabet.assign(allowed.begin(), allowed.end());
    for (Token a : alphabet) {
      if (a < 0 || a >= v) throw std::invalid_argument("gcg_step: allowed token outside vocab");
    }
  }
  topk = std::min<int>(topk, static_cast<int>(alphabet.size()));

  // gradient of the combined objective w.r.t. the one-hot input
  Tensor onehot = Tensor::zeros({t, v}, /*requires_grad=*/true);
  for (int i = 0; i < t; ++i) onehot.data()[static_cast<size_t>(i) * v + x[i]] = 1.0f;
  Tensor target_term = loss_on_pair_onehot(target_model, onehot, y);
  Tensor objective = lambda != 0.0f
                         ? sub(target_term, scale(loss_on_pair_onehot(base_model, onehot, y), lambda))
                         : target_term;
  backward(objective);
  std::span<const float> grad = onehot.grad();

  // per position: topk allowed tokens with the most negative gradient
  std::vector<int> candidates(static_cast<size_t>(t) * topk);
  {
    std::vector<Token> order;
    for (int pos = 0; pos < t; ++pos) {
      order = alphabet;
      const float* g = grad.data() + static_cast<size_t>(pos) * v;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return g[a] < g[b]; });
      for (int r = 0; r < topk; ++r) candidates[static_cast<size_t>(pos) * topk + r] = order[static_cast<size_t>(r)];
    }
  }

  // choose which (position, candidate) pairs to evaluate
  const int64_t space = static_cast<int64_t>(t) * topk;
  std::vector<int64_t> picks;
  if (batch >= space) {
    picks.resize(static_cast<size_t>(space));
    std::iota(picks.begin(), picks.end(), int64_t{0});
  } else {
    // sample `batch` distinct pairs (partial Fisher-Yates), then order them
    // canonically so the accepted-candidate tie-break is scheduling-free
    std::vector<int64_t> pool(static_cast<size_t>(space));
    std::iota(pool.begin(), pool.end(), int64_t{0});
    Rng rng(derive_seed(seed, "gcg-batch"));
    for (int i = 0; i < batch; ++i) {
      const size_t j = static_cast<size_t>(i) + static_cast<size_t>(rng.below(static_cast<uint64_t>(space - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[j]);
    }
    picks.assign(pool.begin(), pool.begin() + batch);
    std::sort(picks.begin(), picks.end());
  }

  // exact loss for every picked substitution
  struct Eval {
    float combined, target, base;
  };
  std::vector<Eval> evals(picks.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(max_threads())
#endif
  for (int64_t pi = 0; pi < static_cast<int64_t>(picks.size()); ++pi) {
    const int64_t flat = picks[static_cast<size_t>(pi)];
    const int pos = static_cast<int>(flat / topk);
    const int cand = candidates[static_cast<size_t>(flat)];
    TokenSeq xc(x.begin(), x.end());
    xc[static_cast<size_t>(pos)] = cand;
    const float lt = pair_loss_value(target_model, xc, y);
    const float lb = lambda != 0.0f || true ? pair_loss_value(base_model, xc, y) : 0.0f;
    evals[static_cast<size_t>(pi)] = {lt - lambda * lb, lt, lb};
  }

  GcgStepResult result;
  result.x.assign(x.begin(), x.end());
  result.combined_loss = objective.item();
  result.target_loss = target_term.item();
  result.base_loss = lambda != 0.0f
                         ? (target_term.item() - objective.item()) / lambda
                         : base_loss_of(base_model, x, y);
  result.improved = false;

  int64_t best = -1;
  float best_loss = result.combined_loss;
  for (size_t i = 0; i < evals.size(); ++i) {
    if (evals[i].combined < best_loss) {
      best_loss = evals[i].combined;
      best = static_cast<int64_t>(i);
    }
  }
  if (best >= 0) {
    const int64_t flat = picks[static_cast<size_t>(best)];
    result.x[static_cast<size_t>(flat / topk)] = candidates[static_cast<size_t>(flat)];
    result.combined_loss = evals[static_cast<size_t>(best)].combined;
    result.target_loss = evals[static_cast<size_t>(best)].target;
    result.base_loss = evals[static_cast<size_t>(best)].base;
    result.improved = true;
  }
  return result;
}

namespace {

FingerprintPair opt_input_impl(const Checkpoint& base, const Checkpoint& owner,
                               std::span<const Token> y, const OptIConfig& cfg, bool guard_enabled,
                               EmbedTrace* trace, const std::string& pair_id) {
  cfg.validate();
  if (y.empty()) throw std::invalid_argument("opt_input: y must be non-empty");
  base.check_schema(owner, "opt_input");

  const LanguageModel base_lm = LanguageModel::from_checkpoint(base);
  const float tau = cfg.tau > 0.0f ? cfg.tau : scaled_tau(base_lm.config().vocab_size);

  Checkpoint pseudo = pseudo_merge(base, owner, PseudoMergeSpec{cfg.alpha_i});
  const LanguageModel target_lm = LanguageModel::from_checkpoint(pseudo);

  EmbedTrace local;
  EmbedTrace& tr = trace ? *trace : local;

  // random init; if it already trips the guard the input is degenerate
  TokenSeq x;
  float base_loss = 0.0f;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 10) {
      throw std::runtime_error(
          "opt_input: 10 random inits in a row already score at or below tau on the base model");
    }
    x = init_random_input(cfg.input_len, derive_seed(cfg.seed, static_cast<uint64_t>(attempt)));
    base_loss = base_loss_of(base_lm, x, y);
    if (!guard_enabled || base_loss > tau) break;
    tr.init_redraws += 1;
  }

  std::vector<Token> allowed;
  if (cfg.printable_candidates && base_lm.config().vocab_size > kPrintableHi) {
    for (Token tkn = kPrintableLo; tkn <= kPrintableHi; ++tkn) allowed.push_back(tkn);
  }

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    if (guard_enabled && base_loss <= tau) {
      tr.guard_fired = true;
      break;
    }
    GcgStepResult step =
        gcg_step(target_lm, base_lm, x, y, cfg.lambda, cfg.gcg_batch, cfg.gcg_topk,
                 derive_seed(cfg.seed, 0x6763674000ull + static_cast<uint64_t>(iter)), allowed);
    x = std::move(step.x);
    base_loss = step.base_loss;
    tr.opti_target_loss.push_back(step.target_loss);
    tr.opti_base_loss.push_back(step.base_loss);
    tr.opti_iters = iter + 1;
  }

  FingerprintPair pair;
  pair.id = pair_id;
  pair.x = std::move(x);
  pair.y.assign(y.begin(), y.end());
  pair.x_origin = cfg.max_iters > 0 ? FingerprintPair::Origin::kOptimized
                                    : FingerprintPair::Origin::kRandomInit;
  return pair;
}

}  // namespace

FingerprintPair opt_input(const Checkpoint& base, const Checkpoint& owner,
                          std::span<const Token> y, const OptIConfig& cfg, EmbedTrace* trace) {
  return opt_input_impl(base, owner, y, cfg, /*guard_enabled=*/true, trace, "fp");
}

Checkpoint opt_params(const Checkpoint& base, const Checkpoint& owner,
                      const FingerprintPair& pair, const OptPConfig& cfg, EmbedTrace* trace) {
  cfg.validate();
  if (pair.x.empty()) throw std::invalid_argument("opt_params: pair.x must be non-empty");
  base.check_schema(owner, "opt_params");

  EmbedTrace local;
  EmbedTrace& tr = trace ? *trace : local;

  // working copy of the owner; `base` is never touched
  LanguageModel owner_lm = LanguageModel::from_checkpoint(owner);
  LanguageModel pseudo_lm = LanguageModel::from_checkpoint(owner);  // storage reused per iter

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    // rebuild the pseudo-merged parameters in place
    for (auto& [name, p] : pseudo_lm.params()) {
      const std::span<const float> b = std::span<const float>(base.tensors.at(name).data);
      const std::span<const float> o = owner_lm.params().at(name).data();
      std::span<float> d = p.data();
      for (size_t i = 0; i < d.size(); ++i) d[i] = b[i] + cfg.alpha_p * (o[i] - b[i]);
      p.zero_grad();
    }
    Tensor loss = loss_on_pair(pseudo_lm, pair.x, pair.y);
    const float loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      throw std::runtime_error("opt_params: non-finite loss at iteration " + std::to_string(iter));
    }
    tr.optp_loss.push_back(loss_val);
    if (loss_val <= cfg.target_loss) break;
    tr.optp_iters = iter + 1;

    backward(loss);
    // chain rule through the merge: d loss / d theta_o = alpha_p * d loss / d pseudo
    for (auto& [name, p] : pseudo_lm.params()) {
      if (p.grad().empty()) continue;
      sgd_step(owner_lm.params().at(name), p.grad(), cfg.lr * cfg.alpha_p);
    }
  }

  Checkpoint out = owner_lm.to_checkpoint();
  out.meta["fingerprint_id"] = pair.id;
  out.meta["optp.alpha_p"] = std::to_string(cfg.alpha_p);
  out.meta["optp.lr"] = std::to_string(cfg.lr);
  out.meta["optp.iters"] = std::to_string(tr.optp_iters);
  auto parent = owner.meta.find("model_id");
  if (parent != owner.meta.end()) out.meta["parent_id"] = parent->second;
  return out;
}

EmbedResult embed_fingerprint(const Checkpoint& base, const Checkpoint& owner,
                              std::span<const Token> y, const OptIConfig& opti,
                              const OptPConfig& optp, bool skip_opt_i,
                              const std::string& pair_id) {
  EmbedResult result;
  if (skip_opt_i) {
    result.pair.id = pair_id;
    result.pair.x = init_random_input(opti.input_len, derive_seed(opti.seed, uint64_t{0}));
    result.pair.y.assign(y.begin(), y.end());
    result.pair.x_origin = FingerprintPair::Origin::kRandomInit;
  } else {
    result.pair = opt_input_impl(base, owner, y, opti, /*guard_enabled=*/true, &result.trace,
                                 pair_id);
  }
  result.fingerprinted = opt_params(base, owner, result.pair, optp, &result.trace);
  return result;
}

FingerprintPair trap_mode(const Checkpoint& owner, std::span<const Token> y,
                          const OptIConfig& cfg, EmbedTrace* trace) {
  OptIConfig trap_cfg = cfg;
  trap_cfg.alpha_i = 1.0f;  // optimize against the owner itself
  trap_cfg.lambda = 0.0f;
  return opt_input_impl(owner, owner, y, trap_cfg, /*guard_enabled=*/false, trace, "trap");
}

}  // namespace mergefp
