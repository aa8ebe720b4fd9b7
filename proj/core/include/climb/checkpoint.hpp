#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "climb/optim.hpp"
#include "climb/tensor.hpp"

namespace climb {

using json = nlohmann::json;

// Checkpoint container:
//   [u64 little-endian header length][header JSON][raw tensor payload]
// The header lists tensor names, shapes, dtypes and byte offsets into the
// payload, plus a free-form "meta" object. dtype "f64" round-trips values
// bit-exactly; "f32" is a storage option that halves size at reduced
// precision (loads convert back to double).
inline constexpr uint32_t kCheckpointFormatVersion = 1;

struct LoadedCheckpoint {
  NamedTensors tensors;
  json meta;
  std::string dtype;
};

void save_checkpoint(const std::string& path, const NamedTensors& tensors, const json& meta,
                     const std::string& dtype = "f64");
LoadedCheckpoint load_checkpoint(const std::string& path);

// Writes `content` to path via a temp file + rename so readers never observe
// a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

// Copies values from `src` into every tensor of `dst`, matched by name.
// Throws when a name is missing or a shape disagrees; gradients are cleared.
void restore_tensor_values(NamedTensors& dst, const NamedTensors& src);

// All entries whose name starts with `prefix`, with the prefix stripped.
NamedTensors filter_prefixed(const NamedTensors& src, const std::string& prefix);

// A renamed view with `prefix` prepended to every entry.
NamedTensors with_prefix(const NamedTensors& src, const std::string& prefix);

}  // namespace climb
