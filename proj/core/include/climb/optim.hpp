#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "climb/tensor.hpp"

namespace climb {

// Named parameter list. Order is the registration order, which fixes both the
// checkpoint layout and the parameter fingerprint.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  size_t size() const { return items.size(); }
};

// FNV-1a over the raw little-endian doubles of every tensor, in list order.
// Used to prove frozen weights stayed byte-identical.
uint64_t tensors_fingerprint(const NamedTensors& params);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Optimizer state for one parameter tensor.
struct AdamSlot {
  std::vector<double> m, v;
  int64_t t = 0;
};

// One Adam update on raw buffers. Kept free of Tensor so the state stays
// explicit and serializable. Throws when the gradient has non-finite entries.
void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamSlot& slot,
               const AdamConfig& cfg);

// Applies adam_step to every parameter that carries a gradient, then zeroes
// the gradients. Parameters are keyed by name; slots appear on first use.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}

  void step(NamedTensors& params);

  const AdamConfig& config() const { return cfg_; }
  AdamConfig& config() { return cfg_; }

  // Slot serialization for checkpoint resume: "<param>.adam_m", ".adam_v" and
  // a shared ".adam_t" step counter per parameter.
  NamedTensors export_state() const;
  void import_state(const NamedTensors& state);

 private:
  AdamConfig cfg_;
  std::unordered_map<std::string, AdamSlot> slots_;
};

}  // namespace climb
