#pragma once

#include <array>
#include <vector>

namespace climb {

// Covariates the denoiser is conditioned on. Ages and volumes are stored
// z-scored (training-set statistics; see CovariateStats); sex, genetic_flag
// and the diagnosis one-hot stay 0/1.
struct ConditioningVector {
  double projected_age = 0.0;    // target visit age
  double acquisition_age = 0.0;  // baseline scan age
  double sex = 0.0;
  std::array<double, 3> disease_onehot{1.0, 0.0, 0.0};  // CN, MCI, AD
  double genetic_flag = 0.0;
  // gray matter, hippocampus, amygdala, white matter, ventricles
  std::array<double, 5> volumes{};

  // Scalar conditioning fields: 2 ages + sex + diagnosis + genetic + 5
  // volumes. The diagnosis one-hot counts as a single field (one token).
  static constexpr int kFieldCount = 10;

  // Raw numbers in embedding order: the 9 scalars then the 3-way one-hot.
  std::array<double, 12> flat() const {
    return {projected_age, acquisition_age,   sex,        genetic_flag,
            volumes[0],    volumes[1],        volumes[2], volumes[3],
            volumes[4],    disease_onehot[0], disease_onehot[1], disease_onehot[2]};
  }
};

// z-scoring statistics, computed on the training split and stored in the
// diffusion checkpoints so sampling normalizes identically.
struct CovariateStats {
  double age_mean = 0.0, age_std = 1.0;
  std::array<double, 5> vol_mean{};
  std::array<double, 5> vol_std{1.0, 1.0, 1.0, 1.0, 1.0};
};

// z-scores the ages and volumes; binary fields and the one-hot pass through.
inline ConditioningVector normalized(const ConditioningVector& c, const CovariateStats& s) {
  ConditioningVector out = c;
  out.projected_age = (c.projected_age - s.age_mean) / s.age_std;
  out.acquisition_age = (c.acquisition_age - s.age_mean) / s.age_std;
  for (int i = 0; i < 5; ++i) {
    out.volumes[static_cast<size_t>(i)] =
        (c.volumes[static_cast<size_t>(i)] - s.vol_mean[static_cast<size_t>(i)]) /
        s.vol_std[static_cast<size_t>(i)];
  }
  return out;
}

}  // namespace climb
