#include "climb/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace climb {

Tensor* NamedTensors::find(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

const Tensor* NamedTensors::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

uint64_t tensors_fingerprint(const NamedTensors& params) {
  uint64_t h = 1469598103934665603ull;  // FNV offset basis
  auto mix = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;  // FNV prime
    }
  };
  for (const auto& [name, t] : params.items) {
    mix(name.data(), name.size());
    const auto& v = t.values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamSlot& slot,
               const AdamConfig& cfg) {
  if (param.size() != grad.size())
    throw std::runtime_error("adam_step: param/grad size mismatch");
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  if (slot.m.size() != param.size())
    throw std::runtime_error("adam_step: slot size mismatch");
  for (double g : grad) {
    if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient");
  }
  slot.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.t));
  for (size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    double mhat = slot.m[i] / bc1;
    double vhat = slot.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamOptimizer::step(NamedTensors& params) {
  for (auto& [name, t] : params.items) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    adam_step(t.values(), t.grad(), slots_[name], cfg_);
    t.zero_grad();
  }
}

NamedTensors AdamOptimizer::export_state() const {
  NamedTensors out;
  for (const auto& [name, slot] : slots_) {
    int64_t n = static_cast<int64_t>(slot.m.size());
    out.add(name + ".adam_m", Tensor::from_values({n}, slot.m));
    out.add(name + ".adam_v", Tensor::from_values({n}, slot.v));
    out.add(name + ".adam_t", Tensor::scalar(static_cast<double>(slot.t)));
  }
  // unordered_map order is not stable; sort for a deterministic layout.
  std::sort(out.items.begin(), out.items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

void AdamOptimizer::import_state(const NamedTensors& state) {
  slots_.clear();
  for (const auto& [name, t] : state.items) {
    auto strip = [&](const char* suffix) -> std::string {
      size_t sl = std::strlen(suffix);
      if (name.size() > sl && name.compare(name.size() - sl, sl, suffix) == 0)
        return name.substr(0, name.size() - sl);
      return {};
    };
    if (auto base = strip(".adam_m"); !base.empty())
      slots_[base].m = t.values();
    else if (auto base2 = strip(".adam_v"); !base2.empty())
      slots_[base2].v = t.values();
    else if (auto base3 = strip(".adam_t"); !base3.empty())
      slots_[base3].t = static_cast<int64_t>(t.item());
  }
}

}  // namespace climb
