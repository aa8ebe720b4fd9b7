#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "climb/conditioning.hpp"
#include "climb/rng.hpp"
#include "climb/tensor.hpp"

namespace climb {

enum class Diagnosis { kCN = 0, kMCI = 1, kAD = 2 };

// Region/volume order used everywhere: gray matter, hippocampus, amygdala,
// white matter, ventricles — matching ConditioningVector::volumes.
inline constexpr int kGray = 0;
inline constexpr int kHippocampus = 1;
inline constexpr int kAmygdala = 2;
inline constexpr int kWhite = 3;
inline constexpr int kVentricles = 4;

struct CohortParams {
  int image_size = 32;  // square, 32..64
  double age_lo = 55.0, age_hi = 82.0;
  double max_age = 90.0;
  int min_visits = 2, max_visits = 5;
  double gap_lo = 1.5, gap_hi = 4.5;
  // CN / MCI / AD sampling weights
  std::array<double, 3> diagnosis_probs{0.40, 0.35, 0.25};
  // px^2 per toy-year at 32x32 scale: gray & blobs shrink, ventricles grow
  double gray_rate = 0.8;
  double hippocampus_rate = 0.045;
  double amygdala_rate = 0.035;
  double ventricle_rate = 0.15;
  // stepwise diagnosis multiplier (MCI = step * CN, AD = step^2 * CN), risk
  // gene multiplier and per-subject jitter half-width. The defaults keep the
  // total bands of adjacent diagnoses disjoint, so every AD rate exceeds
  // every MCI rate exceeds every CN rate.
  double diagnosis_step = 1.25;
  double genetic_mult = 1.05;
  double rate_jitter = 0.05;
};

struct ToySubject {
  int id = 0;
  int sex = 0;            // {0,1}
  int genetic_flag = 0;   // {0,1}
  Diagnosis disease_status = Diagnosis::kCN;
  double baseline_age = 0.0;
  std::vector<double> visit_ages;  // strictly increasing, first == baseline_age
  // {gray, hippocampus, amygdala, ventricles} linear atrophy/growth in
  // px^2 per toy-year; white matter follows as the residual
  std::array<double, 4> atrophy_rate{};
  uint64_t shape_seed = 0;
  int image_size = 32;
};

struct Phantom {
  Tensor image;  // [1, S, S], values in [0,1]
  std::array<double, 5> areas{};  // analytic px^2, region order above
};

// Per-subject ellipse layout at a given age; exposed for the rasterization
// oracle tests.
struct PhantomGeometry {
  double cx = 0, cy = 0;
  double skull_outer_a = 0, skull_outer_b = 0;
  double skull_inner_a = 0, skull_inner_b = 0;
  double gw_a = 0, gw_b = 0;  // gray/white boundary
  double vent_a = 0, vent_b = 0;
  std::array<double, 2> blob_cx{}, blob_cy{}, blob_a{}, blob_b{};
};

std::vector<ToySubject> generate_cohort(int n_subjects, Rng& rng,
                                        const CohortParams& params = {});

// Analytic region areas at an age inside the modeled range.
std::array<double, 5> analytic_areas(const ToySubject& subject, double age);
PhantomGeometry geometry_at(const ToySubject& subject, double age);

Phantom render_phantom(const ToySubject& subject, double age);

// Areas measured by counting classified subsamples of the rendered mask;
// diagnostic counterpart to analytic_areas.
std::array<double, 5> rendered_region_areas(const ToySubject& subject, double age);

// Deterministic progression oracle: analytic volumes at target_age plus the
// diagnosis advanced by ventricular-growth thresholds. Values are raw
// (toy-years / px^2); z-score with `normalized` and the cohort statistics.
ConditioningVector progress_covariates(const ToySubject& subject, double target_age);
Diagnosis status_at(const ToySubject& subject, double target_age);

// Ventricular growth (px^2) at which CN advances to MCI, and to AD.
inline constexpr double kMciThreshold = 2.0;
inline constexpr double kAdThreshold = 5.0;
// Oldest modeled age offset from baseline.
inline constexpr double kMaxElapsedYears = 40.0;

struct Splits {
  std::vector<int> train, val, test;  // indices into the cohort
};

Splits make_splits(const std::vector<ToySubject>& cohort,
                   const std::array<double, 3>& ratios, Rng& rng);

// Covariate statistics over every (first visit -> later visit) pair of the
// given subjects.
CovariateStats covariate_stats_from(const std::vector<ToySubject>& cohort,
                                    const std::vector<int>& subject_idx);

struct VisitPair {
  int subject = 0;  // cohort index
  double baseline_age = 0.0, target_age = 0.0;
};

struct PairedDataset {
  Tensor baseline_images;  // [N,1,S,S]
  Tensor target_images;    // [N,1,S,S]
  std::vector<ConditioningVector> conds;  // z-scored with `stats`
  std::vector<VisitPair> pairs;
  CovariateStats stats;
};

// All (first visit, later visit) pairs of the chosen subjects with age gap
// >= min_gap, rendered and z-scored against `stats`.
PairedDataset build_pairs(const std::vector<ToySubject>& cohort,
                          const std::vector<int>& subject_idx, const CovariateStats& stats,
                          double min_gap = 0.0);

// Every visit of the chosen subjects rendered into one [N,1,S,S] stack
// (autoencoder training data).
Tensor render_visits(const std::vector<ToySubject>& cohort,
                     const std::vector<int>& subject_idx);

}  // namespace climb
