#include "climb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "climb/rng.hpp"

namespace climb {

GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, const std::vector<int>& wrt, double step,
    int64_t max_coords_per_input, uint64_t coord_seed) {
  for (int i : wrt) inputs[static_cast<size_t>(i)].set_requires_grad(true);

  // Analytic pass.
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    TapeScope scope;
    Tensor loss = fn(inputs);
    if (loss.numel() != 1) throw std::runtime_error("grad_check: fn must return a scalar");
    backward(loss);
    for (int i : wrt) {
      const Tensor& t = inputs[static_cast<size_t>(i)];
      analytic[static_cast<size_t>(i)] =
          t.has_grad() ? t.grad() : std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
    }
  }
  for (int i : wrt) inputs[static_cast<size_t>(i)].zero_grad();

  // Numeric pass: central differences with no tape active.
  GradCheckResult res;
  Rng pick(coord_seed);
  for (int i : wrt) {
    Tensor& t = inputs[static_cast<size_t>(i)];
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_input < 0 || max_coords_per_input >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) coords[static_cast<size_t>(j)] = j;
    } else {
      for (int64_t j = 0; j < max_coords_per_input; ++j)
        coords.push_back(pick.uniform_int(0, n - 1));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int64_t j : coords) {
      double saved = t.values()[static_cast<size_t>(j)];
      t.values()[static_cast<size_t>(j)] = saved + step;
      double f_plus = fn(inputs).item();
      t.values()[static_cast<size_t>(j)] = saved - step;
      double f_minus = fn(inputs).item();
      t.values()[static_cast<size_t>(j)] = saved;
      double fd = (f_plus - f_minus) / (2.0 * step);
      double ad = analytic[static_cast<size_t>(i)][static_cast<size_t>(j)];
      double rel = std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_coord = "input_" + std::to_string(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  return res;
}

GradCheckResult grad_check_all(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, double step, int64_t max_coords_per_input,
    uint64_t coord_seed) {
  std::vector<int> wrt(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) wrt[i] = static_cast<int>(i);
  return grad_check(fn, std::move(inputs), wrt, step, max_coords_per_input, coord_seed);
}

}  // namespace climb
