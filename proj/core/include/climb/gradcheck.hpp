#pragma once

#include <functional>
#include <string>
#include <vector>

#include "climb/tensor.hpp"

namespace climb {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::string worst_coord;  // "input_i[flat_j]" of the worst coordinate
};

// Central-difference check of reverse-mode gradients. fn must map the inputs
// to a scalar loss and be re-evaluable (pure). Inputs listed in `wrt` get
// requires_grad and are perturbed coordinate-wise with the given step; the
// relative error of each coordinate is |fd - ad| / max(1, |fd|, |ad|).
// max_coords_per_input < 0 checks every coordinate; otherwise a deterministic
// random subset of that size is taken per input.
GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, const std::vector<int>& wrt, double step = 1e-5,
    int64_t max_coords_per_input = -1, uint64_t coord_seed = 17);

// Convenience: all inputs checked.
GradCheckResult grad_check_all(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, double step = 1e-5,
    int64_t max_coords_per_input = -1, uint64_t coord_seed = 17);

}  // namespace climb
