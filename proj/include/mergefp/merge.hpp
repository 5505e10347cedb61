#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mergefp/checkpoint.hpp"

namespace mergefp {

struct PseudoMergeSpec {
  float alpha = 0.3f;
};

// One sparsification/rescale pass over a task vector. Probabilities operate
// per tensor, ties in magnitude rankings break toward the lower flat index.
struct PreprocessSpec {
  enum class Kind { kDare, kTiesTrim, kBreadcrumbs, kDella };
  Kind kind = Kind::kDare;
  float drop_p = 0.9f;        // dare
  float density = 0.2f;       // ties_trim
  float bottom_frac = 0.85f;  // breadcrumbs
  float top_frac = 0.01f;     // breadcrumbs
  float mean_drop_p = 0.5f;   // della
  float window_eps = 0.4f;    // della
  uint64_t seed = 0;

  static PreprocessSpec dare(float drop_p, uint64_t seed);
  static PreprocessSpec ties_trim(float density);
  static PreprocessSpec breadcrumbs(float bottom_frac, float top_frac);
  static PreprocessSpec della(float mean_drop_p, float window_eps, uint64_t seed);
};

struct MergeEntry {
  std::string source_id;
  float alpha = 1.0f;
  std::vector<PreprocessSpec> preprocess;
};

struct MergeRecipe {
  enum class Method { kTaskArithmetic, kTies };
  std::string base_id;
  Method method = Method::kTaskArithmetic;
  std::vector<MergeEntry> entries;

  std::string to_json() const;
  static MergeRecipe from_json(const std::string& text);
};

using Registry = std::map<std::string, Checkpoint>;

// theta_b + alpha * (theta_o - theta_b), elementwise.
Checkpoint pseudo_merge(const Checkpoint& base, const Checkpoint& owner,
                        const PseudoMergeSpec& spec);

Checkpoint merge_task_arithmetic(const Checkpoint& base, const std::vector<TaskVector>& tvs,
                                 const std::vector<float>& alphas);

// Keep the top-ceil(density*n) entries of each tensor by |value|.
TaskVector preprocess_ties_trim(const TaskVector& tv, float density);

// Elect per-element signs by larger summed magnitude, average the
// sign-agreeing contributors, then add the alpha-sum-weighted result to base.
Checkpoint merge_ties(const Checkpoint& base, const std::vector<TaskVector>& tvs,
                      const std::vector<float>& alphas);

// Drop each element with probability drop_p, rescale survivors by 1/(1-p).
TaskVector preprocess_dare(const TaskVector& tv, float drop_p, uint64_t seed);

// Zero the bottom_frac smallest and top_frac largest magnitude entries.
TaskVector preprocess_breadcrumbs(const TaskVector& tv, float bottom_frac, float top_frac);

// Magnitude-ranked drop probabilities: the smallest-magnitude element gets
// mean+eps/2, the largest mean-eps/2, linear in between; survivors rescale
// by 1/(1-p_element).
TaskVector preprocess_della(const TaskVector& tv, float mean_drop_p, float window_eps,
                            uint64_t seed);

TaskVector run_preprocess(const TaskVector& tv, const PreprocessSpec& spec);

// Full recipe: per-entry task vectors, preprocess chains in order, then the
// method. The output records the recipe JSON in its metadata.
Checkpoint merge(const MergeRecipe& recipe, const Registry& registry);

}  // namespace mergefp
