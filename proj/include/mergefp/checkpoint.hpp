#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mergefp {

// Plain named-tensor storage, no autodiff. Order is the map's (lexicographic)
// so every on-disk artifact is byte-stable.
struct TensorData {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Named f32 tensor map plus string metadata. Holds every model the pipeline
// touches: base, experts, fingerprinted owners, merged results.
struct Checkpoint {
  std::map<std::string, TensorData> tensors;
  std::map<std::string, std::string> meta;

  bool same_schema(const Checkpoint& other) const;
  // throws std::invalid_argument listing the offending names
  void check_schema(const Checkpoint& other, const char* what) const;
};

// Per-name parameter deltas (source - base); the unit all merge methods
// transform.
struct TaskVector {
  std::map<std::string, TensorData> deltas;
  std::string base_id;
  std::string source_id;
};

// Single-file format: 8-byte little-endian header length, JSON header
// mapping name -> {dtype:"F32", shape, data_offsets:[begin,end)}, then the
// raw little-endian payload. Metadata lives under "__metadata__".
// Writes go through a temp file and rename so readers never see partials.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

TaskVector diff(const Checkpoint& owner, const Checkpoint& base);
Checkpoint apply(const Checkpoint& base, const TaskVector& tv, float alpha);

}  // namespace mergefp
