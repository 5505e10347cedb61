#include "mergefp/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mergefp/ops.hpp"

namespace mergefp {

TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<int>(static_cast<uint8_t>(c)));
  return out;
}

std::string detokenize(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t > 255) throw std::out_of_range("detokenize: token " + std::to_string(t));
    out.push_back(static_cast<char>(static_cast<uint8_t>(t)));
  }
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context_len <= 0) {
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::map<std::string, std::string> ModelConfig::to_meta() const {
  return {{"config.vocab_size", std::to_string(vocab_size)},
          {"config.d_model", std::to_string(d_model)},
          {"config.n_layers", std::to_string(n_layers)},
          {"config.n_heads", std::to_string(n_heads)},
          {"config.context_len", std::to_string(context_len)},
          {"config.seed", std::to_string(seed)}};
}

ModelConfig ModelConfig::from_meta(const std::map<std::string, std::string>& meta) {
  auto fetch = [&](const char* key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::invalid_argument(std::string("checkpoint meta missing ") + key);
    return it->second;
  };
  ModelConfig cfg;
  cfg.vocab_size = std::stoi(fetch("config.vocab_size"));
  cfg.d_model = std::stoi(fetch("config.d_model"));
  cfg.n_layers = std::stoi(fetch("config.n_layers"));
  cfg.n_heads = std::stoi(fetch("config.n_heads"));
  cfg.context_len = std::stoi(fetch("config.context_len"));
  cfg.seed = std::stoull(fetch("config.seed"));
  cfg.validate();
  return cfg;
}

Corpus Corpus::from_text(std::string id, std::string text, double held_out_fraction) {
  if (held_out_fraction < 0.0 || held_out_fraction >= 1.0) {
    throw std::invalid_argument("Corpus: held_out_fraction must be in [0,1)");
  }
  Corpus c;
  c.id = std::move(id);
  c.bytes = std::move(text);
  c.split = c.bytes.size() - static_cast<size_t>(held_out_fraction * c.bytes.size());
  return c;
}

Corpus Corpus::from_file(const std::string& path, double held_out_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Corpus: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(path, ss.str(), held_out_fraction);
}

std::map<std::string, std::vector<int64_t>> LanguageModel::param_schema(const ModelConfig& cfg) {
  const int64_t v = cfg.vocab_size, d = cfg.d_model, h = cfg.mlp_hidden(), ctx = cfg.context_len;
  std::map<std::string, std::vector<int64_t>> schema;
  schema["tok_emb"] = {v, d};
  schema["pos_emb"] = {ctx, d};
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    schema[p + "attn_norm.w"] = {d};
    schema[p + "attn.wq"] = {d, d};
    schema[p + "attn.wk"] = {d, d};
    schema[p + "attn.wv"] = {d, d};
    schema[p + "attn.wo"] = {d, d};
    schema[p + "mlp_norm.w"] = {d};
    schema[p + "mlp.w_gate"] = {d, h};
    schema[p + "mlp.w_up"] = {d, h};
    schema[p + "mlp.w_down"] = {h, d};
  }
  schema["final_norm.w"] = {d};
  schema["lm_head"] = {d, v};
  return schema;
}

LanguageModel LanguageModel::init(const ModelConfig& cfg) {
  cfg.validate();
  LanguageModel m;
  m.cfg_ = cfg;
  Rng rng(derive_seed(cfg.seed, "model-init"));
  const float std_dev = 0.02f;
  for (const auto& [name, shape] : param_schema(cfg)) {
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    if (name.ends_with("norm.w")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else {
      for (float& x : t.data()) x = rng.normal() * std_dev;
    }
    m.params_.emplace(name, std::move(t));
  }
  return m;
}

LanguageModel LanguageModel::from_checkpoint(const Checkpoint& ckpt) {
  LanguageModel m;
  m.cfg_ = ModelConfig::from_meta(ckpt.meta);
  m.meta_ = ckpt.meta;
  auto schema = param_schema(m.cfg_);
  if (ckpt.tensors.size() != schema.size()) {
    throw std::invalid_argument("from_checkpoint: expected " + std::to_string(schema.size()) +
                                " tensors, got " + std::to_string(ckpt.tensors.size()));
  }
  for (const auto& [name, shape] : schema) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw std::invalid_argument("from_checkpoint: missing tensor " + name);
    }
    if (it->second.shape != shape) {
      throw std::invalid_argument("from_checkpoint: tensor " + name + " has shape " +
                                  shape_str(it->second.shape) + ", schema wants " +
                                  shape_str(shape));
    }
    m.params_.emplace(name, Tensor::from_data(shape, it->second.data, /*requires_grad=*/true));
  }
  return m;
}

Checkpoint LanguageModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta = meta_;
  for (const auto& [k, v] : cfg_.to_meta()) ckpt.meta[k] = v;
  for (const auto& [name, t] : params_) {
    TensorData td;
    td.shape = t.shape();
    td.data.assign(t.data().begin(), t.data().end());
    ckpt.tensors.emplace(name, std::move(td));
  }
  return ckpt;
}

int64_t LanguageModel::num_params() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

LanguageModel LanguageModel::clone() const {
  LanguageModel m;
  m.cfg_ = cfg_;
  m.meta_ = meta_;
  for (const auto& [name, t] : params_) m.params_.emplace(name, t.clone());
  return m;
}

Tensor LanguageModel::forward_from(Tensor x, int64_t seq_len) const {
  const auto& p = params_;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Tensor h = rmsnorm(x, p.at(pre + "attn_norm.w"));
    Tensor q = matmul(h, p.at(pre + "attn.wq"));
    Tensor k = matmul(h, p.at(pre + "attn.wk"));
    Tensor v = matmul(h, p.at(pre + "attn.wv"));
    Tensor a = causal_attention(q, k, v, cfg_.n_heads, seq_len);
    x = add(x, matmul(a, p.at(pre + "attn.wo")));
    Tensor h2 = rmsnorm(x, p.at(pre + "mlp_norm.w"));
    Tensor gated = mul(silu(matmul(h2, p.at(pre + "mlp.w_gate"))), matmul(h2, p.at(pre + "mlp.w_up")));
    x = add(x, matmul(gated, p.at(pre + "mlp.w_down")));
  }
  x = rmsnorm(x, p.at("final_norm.w"));
  return matmul(x, p.at("lm_head"));
}

Tensor LanguageModel::forward(std::span<const Token> tokens, int64_t seq_len) const {
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n == 0) throw std::invalid_argument("forward: empty token sequence");
  if (seq_len <= 0) seq_len = n;
  if (seq_len > cfg_.context_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(seq_len) +
                                " exceeds context_len " + std::to_string(cfg_.context_len));
  }
  std::vector<int> pos(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = static_cast<int>(i % seq_len);
  Tensor x = add(embedding(params_.at("tok_emb"), tokens),
                 embedding(params_.at("pos_emb"), pos));
  return forward_from(std::move(x), seq_len);
}

Tensor LanguageModel::forward_onehot(const Tensor& onehot) const {
  if (onehot.ndim() != 2 || onehot.dim(1) != cfg_.vocab_size) {
    throw std::invalid_argument("forward_onehot: expected [T," + std::to_string(cfg_.vocab_size) +
                                "], got " + shape_str(onehot.shape()));
  }
  const int64_t t = onehot.dim(0);
  if (t > cfg_.context_len) {
    throw std::invalid_argument("forward_onehot: length exceeds context_len");
  }
  std::vector<int> pos(static_cast<size_t>(t));
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = add(matmul(onehot, params_.at("tok_emb")),
                 embedding(params_.at("pos_emb"), pos));
  return forward_from(std::move(x), t);
}

std::vector<float> LanguageModel::next_logits(std::span<const Token> tokens) const {
  NoGradGuard ng;
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n == 0 || n > cfg_.context_len) {
    throw std::invalid_argument("next_logits: sequence length " + std::to_string(n) +
                                " outside [1," + std::to_string(cfg_.context_len) + "]");
  }
  std::vector<int> pos(static_cast<size_t>(n));
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = add(embedding(params_.at("tok_emb"), tokens),
                 embedding(params_.at("pos_emb"), pos));
  // run the blocks, then a single head row for the last position
  const auto& p = params_;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Tensor h = rmsnorm(x, p.at(pre + "attn_norm.w"));
    Tensor q = matmul(h, p.at(pre + "attn.wq"));
    Tensor k = matmul(h, p.at(pre + "attn.wk"));
    Tensor v = matmul(h, p.at(pre + "attn.wv"));
    Tensor a = causal_attention(q, k, v, cfg_.n_heads, n);
    x = add(x, matmul(a, p.at(pre + "attn.wo")));
    Tensor h2 = rmsnorm(x, p.at(pre + "mlp_norm.w"));
    Tensor gated = mul(silu(matmul(h2, p.at(pre + "mlp.w_gate"))), matmul(h2, p.at(pre + "mlp.w_up")));
    x = add(x, matmul(gated, p.at(pre + "mlp.w_down")));
  }
  Tensor last = row_slice(x, n - 1, n);
  last = rmsnorm(last, p.at("final_norm.w"));
  Tensor logits = matmul(last, p.at("lm_head"));
  return std::vector<float>(logits.data().begin(), logits.data().end());
}

namespace {

void check_pair_fits(const ModelConfig& cfg, size_t xlen, size_t ylen) {
  if (ylen < 1) throw std::invalid_argument("loss_on_pair: y must be non-empty");
  if (xlen < 1) throw std::invalid_argument("loss_on_pair: x must be non-empty");
  if (xlen + ylen > static_cast<size_t>(cfg.context_len)) {
    throw std::invalid_argument("loss_on_pair: len(x)+len(y) = " + std::to_string(xlen + ylen) +
                                " exceeds context_len " + std::to_string(cfg.context_len));
  }
}

}  // namespace

Tensor loss_on_pair(const LanguageModel& model, std::span<const Token> x,
                    std::span<const Token> y) {
  check_pair_fits(model.config(), x.size(), y.size());
  TokenSeq seq(x.begin(), x.end());
  seq.insert(seq.end(), y.begin(), y.end());
  Tensor logits = model.forward(seq);
  const int64_t xs = static_cast<int64_t>(x.size());
  const int64_t ys = static_cast<int64_t>(y.size());
  Tensor y_logits = row_slice(logits, xs - 1, xs + ys - 1);
  return softmax_cross_entropy(y_logits, y);
}

Tensor loss_on_pair_onehot(const LanguageModel& model, const Tensor& x_onehot,
                           std::span<const Token> y) {
  check_pair_fits(model.config(), static_cast<size_t>(x_onehot.dim(0)), y.size());
  const int64_t xs = x_onehot.dim(0);
  const int64_t ys = static_cast<int64_t>(y.size());
  const int64_t v = model.config().vocab_size;
  // extend the one-hot block with the (hard) y tokens
  Tensor full = Tensor::zeros({xs + ys, v});
  std::copy(x_onehot.data().begin(), x_onehot.data().end(), full.data().begin());
  for (int64_t i = 0; i < ys; ++i) full.data()[(xs + i) * v + y[i]] = 1.0f;
  if (grad_enabled() && x_onehot.requires_grad()) {
    full.set_requires_grad(true);
    full.impl()->parents.push_back(x_onehot.impl());
    auto ix = x_onehot.impl();
    const int64_t head = xs * v;
    full.impl()->backward_fn = [ix, head](TensorImpl& o) {
      if (!ix->requires_grad) return;
      if (ix->grad.empty()) ix->grad.assign(ix->data.size(), 0.0f);
      for (int64_t i = 0; i < head; ++i) ix->grad[i] += o.grad[i];
    };
  }
  Tensor logits = model.forward_onehot(full);
  Tensor y_logits = row_slice(logits, xs - 1, xs + ys - 1);
  return softmax_cross_entropy(y_logits, y);
}

float pair_loss_value(const LanguageModel& model, std::span<const Token> x,
                      std::span<const Token> y) {
  NoGradGuard ng;
  return loss_on_pair(model, x, y).item();
}

Token sample_token(std::span<const float> logits, const SamplingConfig& cfg, Rng& rng) {
  if (cfg.temperature <= 0.0f) throw std::invalid_argument("sample_token: temperature must be > 0");
  if (cfg.top_k < 1) throw std::invalid_argument("sample_token: top_k must be >= 1");
  if (cfg.top_p <= 0.0f || cfg.top_p > 1.0f) {
    throw std::invalid_argument("sample_token: top_p must be in (0,1]");
  }
  const int v = static_cast<int>(logits.size());
  float m = logits[0];
  for (int i = 1; i < v; ++i) m = std::max(m, logits[i]);

  // order token ids by probability descending, id ascending on ties
  std::vector<int> order(static_cast<size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });

  const int k = std::min(cfg.top_k, v);
  std::vector<double> probs(static_cast<size_t>(k));
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    probs[static_cast<size_t>(i)] =
        std::exp(static_cast<double>(logits[order[static_cast<size_t>(i)]] - m) /
                 static_cast<double>(cfg.temperature));
    total += probs[static_cast<size_t>(i)];
  }
  // nucleus: smallest prefix of the sorted list with cumulative mass >= top_p
  int keep = k;
  double cum = 0.0;
  for (int i = 0; i < k; ++i) {
    cum += probs[static_cast<size_t>(i)];
    if (cum >= static_cast<double>(cfg.top_p) * total) {
      keep = i + 1;
      break;
    }
  }
  double kept_total = 0.0;
  for (int i = 0; i < keep; ++i) kept_total += probs[static_cast<size_t>(i)];
  const double u = rng.next_double() * kept_total;
  double acc = 0.0;
  for (int i = 0; i < keep; ++i) {
    acc += probs[static_cast<size_t>(i)];
    if (u < acc) return order[static_cast<size_t>(i)];
  }
  return order[static_cast<size_t>(keep - 1)];
}

TokenSeq generate(const LanguageModel& model, std::span<const Token> x,
                  const SamplingConfig& cfg) {
  NoGradGuard ng;
  if (static_cast<int>(x.size()) > model.config().context_len) {
    throw std::invalid_argument("generate: prompt exceeds context_len");
  }
  Rng rng(derive_seed(cfg.seed, "generate"));
  TokenSeq seq(x.begin(), x.end());
  TokenSeq out;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    if (static_cast<int>(seq.size()) >= model.config().context_len) break;
    std::vector<float> logits = model.next_logits(seq);
    Token t = sample_token(logits, cfg, rng);
    out.push_back(t);
    seq.push_back(t);
  }
  return out;
}

namespace {

struct AdamState {
  std::map<std::string, std::vector<float>> m, v;
  int64_t t = 0;
};

}  // namespace

TrainResult train(LanguageModel& model, const Corpus& corpus, const TrainConfig& cfg) {
  const auto train_text = corpus.train();
  if (train_text.empty()) throw std::invalid_argument("train: corpus train split is empty");
  const int64_t seq_len = cfg.seq_len;
  if (seq_len < 2 || seq_len > model.config().context_len) {
    throw std::invalid_argument("train: seq_len outside [2, context_len]");
  }
  if (train_text.size() < static_cast<size_t>(seq_len) + 1) {
    throw std::invalid_argument("train: corpus train split shorter than seq_len+1");
  }

  Rng rng(derive_seed(cfg.seed, "train"));
  AdamState adam;
  TrainResult result;
  result.loss_curve.reserve(static_cast<size_t>(cfg.steps));

  const size_t max_start = train_text.size() - static_cast<size_t>(seq_len) - 1;
  std::vector<Token> inputs(static_cast<size_t>(cfg.batch_size) * seq_len);
  std::vector<int> targets(static_cast<size_t>(cfg.batch_size) * seq_len);

  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b) {
      const size_t start = static_cast<size_t>(rng.below(max_start + 1));
      for (int64_t i = 0; i < seq_len; ++i) {
        inputs[static_cast<size_t>(b) * seq_len + i] =
            static_cast<uint8_t>(train_text[start + static_cast<size_t>(i)]);
        targets[static_cast<size_t>(b) * seq_len + i] =
            static_cast<uint8_t>(train_text[start + static_cast<size_t>(i) + 1]);
      }
    }
    Tensor logits = model.forward(inputs, seq_len);
    Tensor loss = softmax_cross_entropy(logits, targets);
    const float loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      throw std::runtime_error("train: loss diverged (non-finite) at step " + std::to_string(step));
    }
    result.loss_curve.push_back(loss_val);

    for (auto& [_, p] : model.params()) p.zero_grad();
    backward(loss);

    if (cfg.optimizer.kind == OptimizerConfig::Kind::kSgd) {
      for (auto& [name, p] : model.params()) {
        if (p.grad().empty()) continue;
        sgd_step(p, p.grad(), cfg.optimizer.lr);
      }
    } else {
      adam.t += 1;
      const float b1 = cfg.optimizer.beta1, b2 = cfg.optimizer.beta2;
      const float corr1 = 1.0f - std::pow(b1, static_cast<float>(adam.t));
      const float corr2 = 1.0f - std::pow(b2, static_cast<float>(adam.t));
      for (auto& [name, p] : model.params()) {
        if (p.grad().empty()) continue;
        auto& m = adam.m[name];
        auto& v = adam.v[name];
        if (m.empty()) m.assign(p.data().size(), 0.0f);
        if (v.empty()) v.assign(p.data().size(), 0.0f);
        std::span<const float> g = p.grad();
        float* data = p.data().data();
        for (size_t i = 0; i < g.size(); ++i) {
          m[i] = b1 * m[i] + (1.0f - b1) * g[i];
          v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
          const float mhat = m[i] / corr1;
          const float vhat = v[i] / corr2;
          data[i] -= cfg.optimizer.lr * mhat / (std::sqrt(vhat) + cfg.optimizer.eps);
        }
      }
    }
  }
  return result;
}

float perplexity(const LanguageModel& model, std::string_view held_out_text) {
  if (held_out_text.size() < 2) {
    throw std::invalid_argument("perplexity: held-out split needs at least 2 bytes");
  }
  NoGradGuard ng;
  const int64_t window = std::min<int64_t>(128, model.config().context_len);
  double total_nats = 0.0;
  int64_t total_tokens = 0;
  size_t pos = 0;
  while (pos + 1 < held_out_text.size()) {
    const size_t len = std::min(static_cast<size_t>(window) + 1, held_out_text.size() - pos);
    if (len < 2) break;
    TokenSeq in(len - 1);
    std::vector<int> tg(len - 1);
    for (size_t i = 0; i + 1 < len; ++i) {
      in[i] = static_cast<uint8_t>(held_out_text[pos + i]);
      tg[i] = static_cast<uint8_t>(held_out_text[pos + i + 1]);
    }
    Tensor logits = model.forward(in);
    Tensor loss = softmax_cross_entropy(logits, tg);
    total_nats += static_cast<double>(loss.item()) * static_cast<double>(len - 1);
    total_tokens += static_cast<int64_t>(len - 1);
    pos += len - 1;
  }
  return static_cast<float>(std::exp(total_nats / static_cast<double>(total_tokens)));
}

float perplexity(const LanguageModel& model, const Corpus& corpus) {
  return perplexity(model, corpus.held_out());
}

}  // namespace mergefp
