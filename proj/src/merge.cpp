#include "mergefp/merge.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "mergefp/rng.hpp"

namespace mergefp {

namespace {

using nlohmann::json;

void check_tv_schemas(const Checkpoint& base, const std::vector<TaskVector>& tvs,
                      const std::vector<float>& alphas, const char* what) {
  if (tvs.empty()) throw std::invalid_argument(std::string(what) + ": empty task-vector list");
  if (tvs.size() != alphas.size()) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(tvs.size()) +
                                " task vectors vs " + std::to_string(alphas.size()) + " alphas");
  }
  for (float a : alphas) {
    if (!std::isfinite(a)) throw std::invalid_argument(std::string(what) + ": non-finite alpha");
  }
  for (const TaskVector& tv : tvs) {
    if (tv.deltas.size() != base.tensors.size()) {
      throw std::invalid_argument(std::string(what) + ": task vector tensor-count mismatch");
    }
    for (const auto& [name, d] : tv.deltas) {
      auto it = base.tensors.find(name);
      if (it == base.tensors.end() || it->second.shape != d.shape) {
        throw std::invalid_argument(std::string(what) + ": schema mismatch at tensor " + name);
      }
    }
  }
}

// indices of `values` ordered by |value| ascending, index ascending on ties
std::vector<size_t> magnitude_order(const std::vector<float>& values) {
  std::vector<size_t> order(values.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::fabs(values[a]) < std::fabs(values[b]);
  });
  return order;
}

std::string kind_name(PreprocessSpec::Kind k) {
  switch (k) {
    case PreprocessSpec::Kind::kDare: return "dare";
    case PreprocessSpec::Kind::kTiesTrim: return "ties_trim";
    case PreprocessSpec::Kind::kBreadcrumbs: return "breadcrumbs";
    case PreprocessSpec::Kind::kDella: return "della";
  }
  throw std::logic_error("unknown preprocess kind");
}

PreprocessSpec::Kind kind_from_name(const std::string& name) {
  if (name == "dare") return PreprocessSpec::Kind::kDare;
  if (name == "ties_trim") return PreprocessSpec::Kind::kTiesTrim;
  if (name == "breadcrumbs") return PreprocessSpec::Kind::kBreadcrumbs;
  if (name == "della") return PreprocessSpec::Kind::kDella;
  throw std::invalid_argument("unknown preprocess kind: " + name);
}

json spec_to_json(const PreprocessSpec& s) {
  json j{{"kind", kind_name(s.kind)}};
  switch (s.kind) {
    case PreprocessSpec::Kind::kDare:
      j["drop_p"] = s.drop_p;
      j["seed"] = s.seed;
      break;
    case PreprocessSpec::Kind::kTiesTrim:
      j["density"] = s.density;
      break;
    case PreprocessSpec::Kind::kBreadcrumbs:
      j["bottom_frac"] = s.bottom_frac;
      j["top_frac"] = s.top_frac;
      break;
    case PreprocessSpec::Kind::kDella:
      j["mean_drop_p"] = s.mean_drop_p;
      j["window_eps"] = s.window_eps;
      j["seed"] = s.seed;
      break;
  }
  return j;
}

PreprocessSpec spec_from_json(const json& j) {
  PreprocessSpec s;
  s.kind = kind_from_name(j.at("kind").get<std::string>());
  switch (s.kind) {
    case PreprocessSpec::Kind::kDare:
      s.drop_p = j.at("drop_p").get<float>();
      s.seed = j.value("seed", uint64_t{0});
      break;
    case PreprocessSpec::Kind::kTiesTrim:
      s.density = j.at("density").get<float>();
      break;
    case PreprocessSpec::Kind::kBreadcrumbs:
      s.bottom_frac = j.at("bottom_frac").get<float>();
      s.top_frac = j.at("top_frac").get<float>();
      break;
    case PreprocessSpec::Kind::kDella:
      s.mean_drop_p = j.at("mean_drop_p").get<float>();
      s.window_eps = j.at("window_eps").get<float>();
      s.seed = j.value("seed", uint64_t{0});
      break;
  }
  return s;
}

}  // namespace

PreprocessSpec PreprocessSpec::dare(float drop_p, uint64_t seed) {
  PreprocessSpec s;
  s.kind = Kind::kDare;
  s.drop_p = drop_p;
  s.seed = seed;
  return s;
}

PreprocessSpec PreprocessSpec::ties_trim(float density) {
  PreprocessSpec s;
  s.kind = Kind::kTiesTrim;
  s.density = density;
  return s;
}

PreprocessSpec PreprocessSpec::breadcrumbs(float bottom_frac, float top_frac) {
  PreprocessSpec s;
  s.kind = Kind::kBreadcrumbs;
  s.bottom_frac = bottom_frac;
  s.top_frac = top_frac;
  return s;
}

PreprocessSpec PreprocessSpec::della(float mean_drop_p, float window_eps, uint64_t seed) {
  PreprocessSpec s;
  s.kind = Kind::kDella;
  s.mean_drop_p = mean_drop_p;
  s.window_eps = window_eps;
  s.seed = seed;
  return s;
}

std::string MergeRecipe::to_json() const {
  json j;
  j["base_id"] = base_id;
  j["method"] = method == Method::kTaskArithmetic ? "task_arithmetic" : "ties";
  j["entries"] = json::array();
  for (const MergeEntry& e : entries) {
    json je{{"source_id", e.source_id}, {"alpha", e.alpha}, {"preprocess", json::array()}};
    for (const PreprocessSpec& s : e.preprocess) je["preprocess"].push_back(spec_to_json(s));
    j["entries"].push_back(je);
  }
  return j.dump();
}

MergeRecipe MergeRecipe::from_json(const std::string& text) {
  json j = json::parse(text);
  MergeRecipe r;
  r.base_id = j.at("base_id").get<std::string>();
  const std::string method = j.at("method").get<std::string>();
  if (method == "task_arithmetic") {
    r.method = Method::kTaskArithmetic;
  } else if (method == "ties") {
    r.method = Method::kTies;
  } else {
    throw std::invalid_argument("MergeRecipe: unknown method " + method);
  }
  for (const json& je : j.at("entries")) {
    MergeEntry e;
    e.source_id = je.at("source_id").get<std::string>();
    e.alpha = je.at("alpha").get<float>();
    if (je.contains("preprocess")) {
      for (const json& js : je.at("preprocess")) e.preprocess.push_back(spec_from_json(js));
    }
    r.entries.push_back(std::move(e));
  }
  if (r.entries.empty()) throw std::invalid_argument("MergeRecipe: needs at least one entry");
  return r;
}

Checkpoint pseudo_merge(const Checkpoint& base, const Checkpoint& owner,
                        const PseudoMergeSpec& spec) {
  base.check_schema(owner, "pseudo_merge");
  if (!std::isfinite(spec.alpha)) throw std::invalid_argument("pseudo_merge: non-finite alpha");
  Checkpoint out;
  out.meta = owner.meta;
  for (const auto& [name, b] : base.tensors) {
    const TensorData& o = owner.tensors.at(name);
    TensorData t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (size_t i = 0; i < b.data.size(); ++i) {
      t.data[i] = b.data[i] + spec.alpha * (o.data[i] - b.data[i]);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

Checkpoint merge_task_arithmetic(const Checkpoint& base, const std::vector<TaskVector>& tvs,
                                 const std::vector<float>& alphas) {
  check_tv_schemas(base, tvs, alphas, "merge_task_arithmetic");
  Checkpoint out;
  out.meta = base.meta;
  for (const auto& [name, b] : base.tensors) {
    TensorData t;
    t.shape = b.shape;
    t.data = b.data;
    for (size_t m = 0; m < tvs.size(); ++m) {
      const std::vector<float>& d = tvs[m].deltas.at(name).data;
      const float a = alphas[m];
      for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += a * d[i];
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

TaskVector preprocess_ties_trim(const TaskVector& tv, float density) {
  if (!(density > 0.0f && density <= 1.0f)) {
    throw std::invalid_argument("ties_trim: density must be in (0,1], got " +
                                std::to_string(density));
  }
  TaskVector out = tv;
  for (auto& [name, t] : out.deltas) {
    const size_t n = t.data.size();
    const size_t keep = static_cast<size_t>(
        std::ceil(static_cast<double>(density) * static_cast<double>(n)));
    if (keep >= n) continue;
    std::vector<size_t> order = magnitude_order(t.data);
    for (size_t r = 0; r + keep < n; ++r) t.data[order[r]] = 0.0f;
  }
  return out;
}

Checkpoint merge_ties(const Checkpoint& base, const std::vector<TaskVector>& tvs,
                      const std::vector<float>& alphas) {
  check_tv_schemas(base, tvs, alphas, "merge_ties");
  const float alpha_sum = std::accumulate(alphas.begin(), alphas.end(), 0.0f);
  Checkpoint out;
  out.meta = base.meta;
  for (const auto& [name, b] : base.tensors) {
    TensorData t;
    t.shape = b.shape;
    t.data = b.data;
    for (size_t i = 0; i < t.data.size(); ++i) {
      float pos_mag = 0.0f, neg_mag = 0.0f;
      for (const TaskVector& tv : tvs) {
        const float v = tv.deltas.at(name).data[i];
        if (v > 0.0f) pos_mag += v;
        else neg_mag -= v;
      }
      if (pos_mag == 0.0f && neg_mag == 0.0f) continue;
      const float elected = pos_mag >= neg_mag ? 1.0f : -1.0f;
      float sum = 0.0f;
      int count = 0;
      for (const TaskVector& tv : tvs) {
        const float v = tv.deltas.at(name).data[i];
        if (v != 0.0f && ((v > 0.0f) == (elected > 0.0f))) {
          sum += v;
          ++count;
        }
      }
      if (count > 0) t.data[i] += alpha_sum * (sum / static_cast<float>(count));
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

TaskVector preprocess_dare(const TaskVector& tv, float drop_p, uint64_t seed) {
  if (!(drop_p >= 0.0f && drop_p < 1.0f)) {
    throw std::invalid_argument("dare: drop_p must be in [0,1), got " + std::to_string(drop_p));
  }
  TaskVector out = tv;
  if (drop_p == 0.0f) return out;
  const float rescale = 1.0f / (1.0f - drop_p);
  for (auto& [name, t] : out.deltas) {
    Rng rng(derive_seed(seed, name));
    for (float& v : t.data) {
      if (rng.next_float() < drop_p) v = 0.0f;
      else v *= rescale;
    }
  }
  return out;
}

TaskVector preprocess_breadcrumbs(const TaskVector& tv, float bottom_frac, float top_frac) {
  if (bottom_frac < 0.0f || top_frac < 0.0f || bottom_frac + top_frac >= 1.0f) {
    throw std::invalid_argument("breadcrumbs: need bottom_frac,top_frac >= 0 and bottom+top < 1");
  }
  TaskVector out = tv;
  for (auto& [name, t] : out.deltas) {
    const size_t n = t.data.size();
    const size_t n_bottom = static_cast<size_t>(static_cast<double>(bottom_frac) * n);
    const size_t n_top = static_cast<size_t>(static_cast<double>(top_frac) * n);
    if (n_bottom == 0 && n_top == 0) continue;
    std::vector<size_t> order = magnitude_order(t.data);
    for (size_t r = 0; r < n_bottom; ++r) t.data[order[r]] = 0.0f;
    for (size_t r = 0; r < n_top; ++r) t.data[order[n - 1 - r]] = 0.0f;
  }
  return out;
}

TaskVector preprocess_della(const TaskVector& tv, float mean_drop_p, float window_eps,
                            uint64_t seed) {
  const float lo = mean_drop_p - window_eps / 2.0f;
  const float hi = mean_drop_p + window_eps / 2.0f;
  if (window_eps < 0.0f || lo < 0.0f || hi >= 1.0f) {
    throw std::invalid_argument("della: probability window [" + std::to_string(lo) + "," +
                                std::to_string(hi) + "] must sit inside [0,1)");
  }
  TaskVector out = tv;
  for (auto& [name, t] : out.deltas) {
    const size_t n = t.data.size();
    std::vector<float> p(n, mean_drop_p);
    if (n > 1 && window_eps > 0.0f) {
      std::vector<size_t> order = magnitude_order(t.data);
      for (size_t r = 0; r < n; ++r) {
        p[order[r]] = hi - window_eps * static_cast<float>(r) / static_cast<float>(n - 1);
      }
    }
    Rng rng(derive_seed(seed, name));
    for (size_t i = 0; i < n; ++i) {
      if (rng.next_float() < p[i]) t.data[i] = 0.0f;
      else t.data[i] /= (1.0f - p[i]);
    }
  }
  return out;
}

TaskVector run_preprocess(const TaskVector& tv, const PreprocessSpec& spec) {
  switch (spec.kind) {
    case PreprocessSpec::Kind::kDare:
      return preprocess_dare(tv, spec.drop_p, spec.seed);
    case PreprocessSpec::Kind::kTiesTrim:
      return preprocess_ties_trim(tv, spec.density);
    case PreprocessSpec::Kind::kBreadcrumbs:
      return preprocess_breadcrumbs(tv, spec.bottom_frac, spec.top_frac);
    case PreprocessSpec::Kind::kDella:
      return preprocess_della(tv, spec.mean_drop_p, spec.window_eps, spec.seed);
  }
  throw std::logic_error("unknown preprocess kind");
}

Checkpoint merge(const MergeRecipe& recipe, const Registry& registry) {
  if (recipe.entries.empty()) throw std::invalid_argument("merge: recipe has no entries");
  auto base_it = registry.find(recipe.base_id);
  if (base_it == registry.end()) {
    throw std::invalid_argument("merge: unresolved base_id '" + recipe.base_id + "'");
  }
  const Checkpoint& base = base_it->second;

  float alpha_total = 0.0f;
  std::vector<TaskVector> tvs;
  std::vector<float> alphas;
  for (const MergeEntry& e : recipe.entries) {
    auto it = registry.find(e.source_id);
    if (it == registry.end()) {
      throw std::invalid_argument("merge: unresolved source_id '" + e.source_id + "'");
    }
    if (!std::isfinite(e.alpha)) throw std::invalid_argument("merge: non-finite alpha");
    alpha_total += e.alpha;
    TaskVector tv = diff(it->second, base);
    for (const PreprocessSpec& s : e.preprocess) tv = run_preprocess(tv, s);
    tvs.push_back(std::move(tv));
    alphas.push_back(e.alpha);
  }
  if (std::fabs(alpha_total - 1.0f) > 1e-4f) {
    std::cerr << "[merge] warning: alphas sum to " << alpha_total << ", not 1\n";
  }

  Checkpoint out = recipe.method == MergeRecipe::Method::kTaskArithmetic
                       ? merge_task_arithmetic(base, tvs, alphas)
                       : merge_ties(base, tvs, alphas);
  out.meta.erase("model_id");
  out.meta["merge_recipe"] = recipe.to_json();
  return out;
}

}  // namespace mergefp
