#include "climb/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace climb {

namespace {

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + tmp);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename failed: " + tmp + " -> " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return data;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors, const json& meta,
                     const std::string& dtype) {
  if (dtype != "f64" && dtype != "f32")
    throw std::runtime_error("save_checkpoint: dtype must be f64 or f32");
  size_t elem = dtype == "f64" ? 8 : 4;

  json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["dtype"] = dtype;
  header["meta"] = meta;
  json tlist = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors.items) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    tlist.push_back(entry);
    offset += static_cast<uint64_t>(t.numel()) * elem;
  }
  header["tensors"] = tlist;
  std::string hs = header.dump();

  std::string blob;
  blob.reserve(8 + hs.size() + offset);
  put_u64_le(blob, hs.size());
  blob += hs;
  for (const auto& [name, t] : tensors.items) {
    const auto& v = t.values();
    if (dtype == "f64") {
      const char* p = reinterpret_cast<const char*>(v.data());
      blob.append(p, v.size() * 8);
    } else {
      std::vector<float> f32(v.begin(), v.end());
      const char* p = reinterpret_cast<const char*>(f32.data());
      blob.append(p, f32.size() * 4);
    }
  }
  atomic_write_file(path, blob);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::string blob = read_file(path);
  if (blob.size() < 8) throw std::runtime_error("checkpoint truncated: " + path);
  uint64_t hlen = get_u64_le(reinterpret_cast<const unsigned char*>(blob.data()));
  if (8 + hlen > blob.size()) throw std::runtime_error("checkpoint header overruns file: " + path);
  json header = json::parse(blob.substr(8, hlen));
  uint32_t version = header.at("format_version").get<uint32_t>();
  if (version != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                             " unsupported");
  LoadedCheckpoint out;
  out.dtype = header.at("dtype").get<std::string>();
  out.meta = header.value("meta", json::object());
  size_t elem = out.dtype == "f64" ? 8 : 4;
  size_t payload_start = 8 + hlen;
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    uint64_t offset = entry.at("offset").get<uint64_t>();
    int64_t n = shape_numel(shape);
    size_t begin = payload_start + offset;
    size_t bytes = static_cast<size_t>(n) * elem;
    if (begin + bytes > blob.size())
      throw std::runtime_error("checkpoint tensor " + name + " overruns file");
    std::vector<double> v(static_cast<size_t>(n));
    if (out.dtype == "f64") {
      std::memcpy(v.data(), blob.data() + begin, bytes);
    } else {
      std::vector<float> f32(static_cast<size_t>(n));
      std::memcpy(f32.data(), blob.data() + begin, bytes);
      for (size_t i = 0; i < f32.size(); ++i) v[i] = static_cast<double>(f32[i]);
    }
    out.tensors.add(name, Tensor::from_values(shape, std::move(v)));
  }
  return out;
}

void restore_tensor_values(NamedTensors& dst, const NamedTensors& src) {
  for (auto& [name, t] : dst.items) {
    const Tensor* s = src.find(name);
    if (s == nullptr)
      throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (s->shape() != t.shape())
      throw std::runtime_error("checkpoint tensor '" + name + "' has the wrong shape");
    t.values() = s->values();
    t.zero_grad();
  }
}

NamedTensors filter_prefixed(const NamedTensors& src, const std::string& prefix) {
  NamedTensors out;
  for (const auto& [name, t] : src.items)
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
  return out;
}

NamedTensors with_prefix(const NamedTensors& src, const std::string& prefix) {
  NamedTensors out;
  for (const auto& [name, t] : src.items) out.add(prefix + name, t);
  return out;
}

}  // namespace climb
