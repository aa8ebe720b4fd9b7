#include "climb/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace climb {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Region codes for subsample classification; 0..4 match the area indices.
constexpr int kBackground = -1;
constexpr int kSkull = 5;

constexpr double kIntensity[6] = {
    0.55,  // gray
    0.38,  // hippocampus
    0.30,  // amygdala
    0.78,  // white
    0.12,  // ventricles
    0.92,  // skull
};
constexpr double kBackgroundIntensity = 0.02;

// Age-independent layout plus the baseline areas the linear model evolves.
struct BaseGeometry {
  double cx, cy;
  double so_a, so_b;  // skull outer
  double si_a, si_b;  // skull inner
  double gw_a0, gw_b0;
  double gw_area0, inner_area;
  double vent_area0, vent_aspect;
  std::array<double, 2> blob_cx, blob_cy, blob_area0, blob_aspect;
};

BaseGeometry base_geometry(const ToySubject& subject) {
  Rng g(subject.shape_seed);
  double s = static_cast<double>(subject.image_size) / 32.0;
  BaseGeometry b;
  double half = static_cast<double>(subject.image_size) / 2.0;
  b.cx = half + g.uniform(-0.8, 0.8) * s;
  b.cy = half + g.uniform(-0.8, 0.8) * s;
  b.so_a = 13.6 * s * g.uniform(0.97, 1.03);
  b.so_b = 12.0 * s * g.uniform(0.97, 1.03);
  double thickness = 1.3 * s;
  b.si_a = b.so_a - thickness;
  b.si_b = b.so_b - thickness;
  b.gw_a0 = 9.3 * s * g.uniform(0.96, 1.04);
  b.gw_b0 = 8.1 * s * g.uniform(0.96, 1.04);
  b.gw_area0 = kPi * b.gw_a0 * b.gw_b0;
  b.inner_area = kPi * b.si_a * b.si_b;
  b.vent_area0 = g.uniform(3.5, 5.0) * s * s;
  b.vent_aspect = g.uniform(1.1, 1.4);
  // the two blobs sit inside the white annulus with margin for every modeled
  // age: outer edge < gray/white boundary, inner edge > grown ventricle
  double dx = 4.8 * s + g.uniform(-0.3, 0.3) * s;
  double dy = 2.9 * s + g.uniform(-0.3, 0.3) * s;
  b.blob_cx = {b.cx - dx, b.cx + dx};
  b.blob_cy = {b.cy + dy, b.cy + dy};
  b.blob_area0 = {g.uniform(3.6, 4.4) * s * s, g.uniform(3.0, 3.6) * s * s};
  b.blob_aspect = {g.uniform(1.2, 1.6), g.uniform(1.2, 1.6)};
  return b;
}

void validate_age(const ToySubject& subject, double age) {
  if (age < subject.baseline_age - 1e-12)
    throw std::runtime_error("phantom: age precedes baseline");
  if (age > subject.baseline_age + kMaxElapsedYears + 1e-12)
    throw std::runtime_error("phantom: age out of modeled range");
}

std::array<double, 5> areas_from_base(const ToySubject& subject, const BaseGeometry& b,
                                      double age) {
  double s2 = std::pow(static_cast<double>(subject.image_size) / 32.0, 2.0);
  double dt = age - subject.baseline_age;
  std::array<double, 5> a{};
  double gw_area = b.gw_area0 + subject.atrophy_rate[0] * s2 * dt;
  a[kGray] = b.inner_area - gw_area;
  a[kHippocampus] = b.blob_area0[0] - subject.atrophy_rate[1] * s2 * dt;
  a[kAmygdala] = b.blob_area0[1] - subject.atrophy_rate[2] * s2 * dt;
  a[kVentricles] = b.vent_area0 + subject.atrophy_rate[3] * s2 * dt;
  a[kWhite] = gw_area - a[kVentricles] - a[kHippocampus] - a[kAmygdala];
  for (double v : a)
    if (!(v > 0.0)) throw std::runtime_error("phantom: age out of modeled range");
  return a;
}

PhantomGeometry geometry_from_base(const BaseGeometry& b, const std::array<double, 5>& areas) {
  PhantomGeometry g;
  g.cx = b.cx;
  g.cy = b.cy;
  g.skull_outer_a = b.so_a;
  g.skull_outer_b = b.so_b;
  g.skull_inner_a = b.si_a;
  g.skull_inner_b = b.si_b;
  double gw_area = areas[kWhite] + areas[kVentricles] + areas[kHippocampus] + areas[kAmygdala];
  double k = std::sqrt(gw_area / b.gw_area0);
  g.gw_a = b.gw_a0 * k;
  g.gw_b = b.gw_b0 * k;
  g.vent_a = std::sqrt(areas[kVentricles] * b.vent_aspect / kPi);
  g.vent_b = std::sqrt(areas[kVentricles] / (b.vent_aspect * kPi));
  const std::array<double, 2> blob_area = {areas[kHippocampus], areas[kAmygdala]};
  for (int i = 0; i < 2; ++i) {
    auto ui = static_cast<size_t>(i);
    g.blob_cx[ui] = b.blob_cx[ui];
    g.blob_cy[ui] = b.blob_cy[ui];
    g.blob_a[ui] = std::sqrt(blob_area[ui] * b.blob_aspect[ui] / kPi);
    g.blob_b[ui] = std::sqrt(blob_area[ui] / (b.blob_aspect[ui] * kPi));
  }
  return g;
}

inline double rho(double x, double y, double cx, double cy, double a, double b) {
  double dx = (x - cx) / a;
  double dy = (y - cy) / b;
  return dx * dx + dy * dy;
}

int classify(double x, double y, const PhantomGeometry& g) {
  if (rho(x, y, g.cx, g.cy, g.skull_outer_a, g.skull_outer_b) > 1.0) return kBackground;
  if (rho(x, y, g.cx, g.cy, g.skull_inner_a, g.skull_inner_b) > 1.0) return kSkull;
  if (rho(x, y, g.cx, g.cy, g.vent_a, g.vent_b) <= 1.0) return kVentricles;
  if (rho(x, y, g.blob_cx[0], g.blob_cy[0], g.blob_a[0], g.blob_b[0]) <= 1.0)
    return kHippocampus;
  if (rho(x, y, g.blob_cx[1], g.blob_cy[1], g.blob_a[1], g.blob_b[1]) <= 1.0)
    return kAmygdala;
  if (rho(x, y, g.cx, g.cy, g.gw_a, g.gw_b) > 1.0) return kGray;
  return kWhite;
}

}  // namespace

std::vector<ToySubject> generate_cohort(int n_subjects, Rng& rng, const CohortParams& params) {
  if (n_subjects < 1) throw std::runtime_error("generate_cohort: need at least one subject");
  if (params.image_size < 32 || params.image_size > 64)
    throw std::runtime_error("generate_cohort: image size must be in [32, 64]");
  double psum =
      params.diagnosis_probs[0] + params.diagnosis_probs[1] + params.diagnosis_probs[2];
  if (!(psum > 0.0)) throw std::runtime_error("generate_cohort: bad diagnosis weights");

  const std::array<double, 4> base_rates = {params.gray_rate, params.hippocampus_rate,
                                            params.amygdala_rate, params.ventricle_rate};
  std::vector<ToySubject> cohort;
  cohort.reserve(static_cast<size_t>(n_subjects));
  for (int i = 0; i < n_subjects; ++i) {
    ToySubject s;
    s.id = i;
    s.image_size = params.image_size;
    s.sex = static_cast<int>(rng.uniform_int(0, 1));
    s.genetic_flag = rng.uniform() < 0.3 ? 1 : 0;
    double u = rng.uniform() * psum;
    s.disease_status = u < params.diagnosis_probs[0] ? Diagnosis::kCN
                       : u < params.diagnosis_probs[0] + params.diagnosis_probs[1]
                           ? Diagnosis::kMCI
                           : Diagnosis::kAD;
    s.baseline_age = rng.uniform(params.age_lo, params.age_hi);
    int visits = static_cast<int>(rng.uniform_int(params.min_visits, params.max_visits));
    s.visit_ages.push_back(s.baseline_age);
    for (int v = 1; v < visits; ++v) {
      double next = s.visit_ages.back() + rng.uniform(params.gap_lo, params.gap_hi);
      if (next > params.max_age) break;
      s.visit_ages.push_back(next);
    }
    double mult =
        std::pow(params.diagnosis_step, static_cast<double>(static_cast<int>(s.disease_status)));
    if (s.genetic_flag) mult *= params.genetic_mult;
    for (int r = 0; r < 4; ++r)
      s.atrophy_rate[static_cast<size_t>(r)] =
          base_rates[static_cast<size_t>(r)] * mult *
          (1.0 + rng.uniform(-params.rate_jitter, params.rate_jitter));
    s.shape_seed = rng.next_u64();
    cohort.push_back(std::move(s));
  }
  return cohort;
}

std::array<double, 5> analytic_areas(const ToySubject& subject, double age) {
  validate_age(subject, age);
  return areas_from_base(subject, base_geometry(subject), age);
}

PhantomGeometry geometry_at(const ToySubject& subject, double age) {
  validate_age(subject, age);
  BaseGeometry b = base_geometry(subject);
  return geometry_from_base(b, areas_from_base(subject, b, age));
}

Phantom render_phantom(const ToySubject& subject, double age) {
  PhantomGeometry g = geometry_at(subject, age);
  int size = subject.image_size;
  std::vector<double> img(static_cast<size_t>(size) * static_cast<size_t>(size));
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      double acc = 0.0;
      for (int sy = 0; sy < 4; ++sy) {
        double y = r + (sy + 0.5) / 4.0;
        for (int sx = 0; sx < 4; ++sx) {
          double x = c + (sx + 0.5) / 4.0;
          int region = classify(x, y, g);
          acc += region == kBackground ? kBackgroundIntensity
                                       : kIntensity[static_cast<size_t>(region)];
        }
      }
      img[static_cast<size_t>(r * size + c)] = acc / 16.0;
    }
  }
  Phantom p;
  p.image = Tensor::from_values({1, size, size}, std::move(img));
  p.areas = analytic_areas(subject, age);
  return p;
}

std::array<double, 5> rendered_region_areas(const ToySubject& subject, double age) {
  PhantomGeometry g = geometry_at(subject, age);
  int size = subject.image_size;
  std::array<double, 5> counts{};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          int region = classify(c + (sx + 0.5) / 4.0, r + (sy + 0.5) / 4.0, g);
          if (region >= 0 && region < 5) counts[static_cast<size_t>(region)] += 1.0;
        }
  for (auto& v : counts) v /= 16.0;
  return counts;
}

Diagnosis status_at(const ToySubject& subject, double target_age) {
  validate_age(subject, target_age);
  double growth = subject.atrophy_rate[3] * (target_age - subject.baseline_age) *
                  std::pow(static_cast<double>(subject.image_size) / 32.0, 2.0);
  // each threshold crossing advances the diagnosis one stage
  int advance = (growth >= kMciThreshold ? 1 : 0) + (growth >= kAdThreshold ? 1 : 0);
  int stage = std::min(2, static_cast<int>(subject.disease_status) + advance);
  return static_cast<Diagnosis>(stage);
}

ConditioningVector progress_covariates(const ToySubject& subject, double target_age) {
  std::array<double, 5> vols = analytic_areas(subject, target_age);
  ConditioningVector c;
  c.projected_age = target_age;
  c.acquisition_age = subject.baseline_age;
  c.sex = static_cast<double>(subject.sex);
  c.genetic_flag = static_cast<double>(subject.genetic_flag);
  c.disease_onehot = {0.0, 0.0, 0.0};
  c.disease_onehot[static_cast<size_t>(status_at(subject, target_age))] = 1.0;
  c.volumes = vols;
  return c;
}

Splits make_splits(const std::vector<ToySubject>& cohort, const std::array<double, 3>& ratios,
                   Rng& rng) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw std::runtime_error("make_splits: ratios must be nonnegative and sum to 1");
  int n = static_cast<int>(cohort.size());
  // largest-remainder apportionment
  std::array<int, 3> counts{};
  std::array<double, 3> frac{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = ratios[static_cast<size_t>(i)] * n;
    counts[static_cast<size_t>(i)] = static_cast<int>(std::floor(exact));
    frac[static_cast<size_t>(i)] = exact - counts[static_cast<size_t>(i)];
    assigned += counts[static_cast<size_t>(i)];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return frac[static_cast<size_t>(a)] > frac[static_cast<size_t>(b)];
  });
  for (int i = 0; assigned < n; ++i, ++assigned)
    counts[static_cast<size_t>(order[static_cast<size_t>(i % 3)])] += 1;
  if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0)
    throw std::runtime_error("make_splits: cohort too small for nonempty splits");

  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<size_t>(i)],
              perm[static_cast<size_t>(rng.uniform_int(0, i))]);
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + counts[0]);
  s.val.assign(perm.begin() + counts[0], perm.begin() + counts[0] + counts[1]);
  s.test.assign(perm.begin() + counts[0] + counts[1], perm.end());
  return s;
}

CovariateStats covariate_stats_from(const std::vector<ToySubject>& cohort,
                                    const std::vector<int>& subject_idx) {
  std::vector<double> ages;
  std::array<std::vector<double>, 5> vols;
  for (int idx : subject_idx) {
    const ToySubject& s = cohort.at(static_cast<size_t>(idx));
    for (double age : s.visit_ages) {
      ages.push_back(age);
      std::array<double, 5> a = analytic_areas(s, age);
      for (int r = 0; r < 5; ++r) vols[static_cast<size_t>(r)].push_back(a[static_cast<size_t>(r)]);
    }
  }
  if (ages.empty()) throw std::runtime_error("covariate_stats_from: no visits");
  auto mean_std = [](const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size());
    return std::pair<double, double>(m, std::max(std::sqrt(v), 1e-9));
  };
  CovariateStats st;
  auto [am, as] = mean_std(ages);
  st.age_mean = am;
  st.age_std = as;
  for (int r = 0; r < 5; ++r) {
    auto [vm, vs] = mean_std(vols[static_cast<size_t>(r)]);
    st.vol_mean[static_cast<size_t>(r)] = vm;
    st.vol_std[static_cast<size_t>(r)] = vs;
  }
  return st;
}

PairedDataset build_pairs(const std::vector<ToySubject>& cohort,
                          const std::vector<int>& subject_idx, const CovariateStats& stats,
                          double min_gap) {
  PairedDataset out;
  out.stats = stats;
  std::vector<double> base_px, tgt_px;
  int size = 0;
  for (int idx : subject_idx) {
    const ToySubject& s = cohort.at(static_cast<size_t>(idx));
    size = s.image_size;
    Tensor base_img;
    for (size_t v = 1; v < s.visit_ages.size(); ++v) {
      double gap = s.visit_ages[v] - s.visit_ages[0];
      if (gap < min_gap - 1e-12) continue;
      if (!base_img.defined()) base_img = render_phantom(s, s.visit_ages[0]).image;
      Tensor tgt_img = render_phantom(s, s.visit_ages[v]).image;
      base_px.insert(base_px.end(), base_img.values().begin(), base_img.values().end());
      tgt_px.insert(tgt_px.end(), tgt_img.values().begin(), tgt_img.values().end());
      out.conds.push_back(normalized(progress_covariates(s, s.visit_ages[v]), stats));
      out.pairs.push_back({idx, s.visit_ages[0], s.visit_ages[v]});
    }
  }
  int64_t n = static_cast<int64_t>(out.pairs.size());
  if (n == 0) throw std::runtime_error("build_pairs: no visit pairs satisfy the gap");
  out.baseline_images = Tensor::from_values({n, 1, size, size}, std::move(base_px));
  out.target_images = Tensor::from_values({n, 1, size, size}, std::move(tgt_px));
  return out;
}

Tensor render_visits(const std::vector<ToySubject>& cohort,
                     const std::vector<int>& subject_idx) {
  std::vector<double> px;
  int64_t n = 0;
  int size = 0;
  for (int idx : subject_idx) {
    const ToySubject& s = cohort.at(static_cast<size_t>(idx));
    size = s.image_size;
    for (double age : s.visit_ages) {
      Tensor img = render_phantom(s, age).image;
      px.insert(px.end(), img.values().begin(), img.values().end());
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("render_visits: no visits");
  return Tensor::from_values({n, 1, size, size}, std::move(px));
}

}  // namespace climb
