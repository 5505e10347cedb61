#include "mergefp/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mergefp {

namespace {

using nlohmann::json;

std::string schema_mismatch_msg(const Checkpoint& a, const Checkpoint& b) {
  std::string only_a, only_b, shapes;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) {
      only_a += (only_a.empty() ? "" : ",") + name;
    } else if (it->second.shape != t.shape) {
      shapes += (shapes.empty() ? "" : ",") + name;
    }
  }
  for (const auto& [name, t] : b.tensors) {
    if (!a.tensors.count(name)) only_b += (only_b.empty() ? "" : ",") + name;
  }
  std::string msg;
  if (!only_a.empty()) msg += " only-in-left: " + only_a;
  if (!only_b.empty()) msg += " only-in-right: " + only_b;
  if (!shapes.empty()) msg += " shape-mismatch: " + shapes;
  return msg;
}

[[noreturn]] void format_error(const std::string& path, uint64_t byte_offset, const std::string& what) {
  throw std::runtime_error("checkpoint format error in " + path + " at byte " +
                           std::to_string(byte_offset) + ": " + what);
}

}  // namespace

bool Checkpoint::same_schema(const Checkpoint& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (const auto& [name, t] : tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end() || it->second.shape != t.shape) return false;
  }
  return true;
}

void Checkpoint::check_schema(const Checkpoint& other, const char* what) const {
  if (!same_schema(other)) {
    throw std::invalid_argument(std::string(what) + ": schema mismatch --" +
                                schema_mismatch_msg(*this, other));
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json header = json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name == "__metadata__") {
      throw std::invalid_argument("save_checkpoint: tensor name __metadata__ is reserved");
    }
    const uint64_t bytes = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!ckpt.meta.empty()) header["__metadata__"] = ckpt.meta;

  const std::string header_str = header.dump();
  const uint64_t header_len = header_str.size();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp + " for writing");
    uint8_t len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<uint8_t>((header_len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_le), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  in.seekg(0, std::ios::end);
  const uint64_t file_size = static_cast<uint64_t>(in.tellg());
  in.seekg(0);

  if (file_size < 8) format_error(path, 0, "file shorter than 8-byte header length");
  uint8_t len_le[8];
  in.read(reinterpret_cast<char*>(len_le), 8);
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<uint64_t>(len_le[i]) << (8 * i);
  if (8 + header_len > file_size) {
    format_error(path, 8, "header length " + std::to_string(header_len) + " exceeds file size");
  }

  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    format_error(path, 8, std::string("header JSON parse failed: ") + e.what());
  }
  if (!header.is_object()) format_error(path, 8, "header is not a JSON object");

  const uint64_t payload_base = 8 + header_len;
  const uint64_t payload_size = file_size - payload_base;

  Checkpoint ckpt;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it.value().begin(); m != it.value().end(); ++m) {
        ckpt.meta[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    const json& entry = it.value();
    if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets")) {
      format_error(path, 8, "tensor " + it.key() + " missing dtype/shape/data_offsets");
    }
    const std::string dtype = entry["dtype"].get<std::string>();
    if (dtype != "F32") format_error(path, 8, "tensor " + it.key() + " has unknown dtype " + dtype);

    TensorData t;
    t.shape = entry["shape"].get<std::vector<int64_t>>();
    int64_t numel = 1;
    for (int64_t d : t.shape) {
      if (d <= 0) format_error(path, 8, "tensor " + it.key() + " has non-positive dimension");
      numel *= d;
    }
    const auto offsets = entry["data_offsets"].get<std::vector<uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0]) {
      format_error(path, 8, "tensor " + it.key() + " has malformed data_offsets");
    }
    const uint64_t begin = offsets[0], end = offsets[1];
    if (end - begin != static_cast<uint64_t>(numel) * sizeof(float)) {
      format_error(path, payload_base + begin,
                   "tensor " + it.key() + " shape/byte-length mismatch");
    }
    if (end > payload_size) {
      format_error(path, payload_base + begin,
                   "tensor " + it.key() + " payload truncated (wants bytes up to " +
                       std::to_string(payload_base + end) + ", file has " +
                       std::to_string(file_size) + ")");
    }
    t.data.resize(static_cast<size_t>(numel));
    in.seekg(static_cast<std::streamoff>(payload_base + begin));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(end - begin));
    if (!in) format_error(path, payload_base + begin, "read failed for tensor " + it.key());
    ckpt.tensors.emplace(it.key(), std::move(t));
  }
  return ckpt;
}

TaskVector diff(const Checkpoint& owner, const Checkpoint& base) {
  owner.check_schema(base, "diff");
  TaskVector tv;
  auto bid = base.meta.find("model_id");
  auto sid = owner.meta.find("model_id");
  if (bid != base.meta.end()) tv.base_id = bid->second;
  if (sid != owner.meta.end()) tv.source_id = sid->second;
  for (const auto& [name, t] : owner.tensors) {
    const TensorData& b = base.tensors.at(name);
    TensorData d;
    d.shape = t.shape;
    d.data.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) d.data[i] = t.data[i] - b.data[i];
    tv.deltas.emplace(name, std::move(d));
  }
  return tv;
}

Checkpoint apply(const Checkpoint& base, const TaskVector& tv, float alpha) {
  auto bid = base.meta.find("model_id");
  if (!tv.base_id.empty() && bid != base.meta.end() && bid->second != tv.base_id) {
    throw std::invalid_argument("apply: task vector was built against base '" + tv.base_id +
                                "', got '" + bid->second + "'");
  }
  Checkpoint out;
  out.meta = base.meta;
  for (const auto& [name, b] : base.tensors) {
    auto it = tv.deltas.find(name);
    if (it == tv.deltas.end() || it->second.shape != b.shape) {
      throw std::invalid_argument("apply: schema mismatch at tensor " + name);
    }
    TensorData t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (size_t i = 0; i < b.data.size(); ++i) t.data[i] = b.data[i] + alpha * it->second.data[i];
    out.tensors.emplace(name, std::move(t));
  }
  if (base.tensors.size() != tv.deltas.size()) {
    throw std::invalid_argument("apply: task vector has extra tensors");
  }
  return out;
}

}  // namespace mergefp
