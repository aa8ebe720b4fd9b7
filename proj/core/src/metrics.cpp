#include "climb/metrics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace climb {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw std::runtime_error(std::string(who) + ": shape mismatch");
}

// Spatial dims are the trailing two axes; everything before them indexes
// independent planes.
struct PlaneView {
  int64_t planes = 0, h = 0, w = 0;
};

PlaneView plane_view(const Tensor& a, const char* who) {
  const auto& s = a.shape();
  if (s.size() < 2)
    throw std::runtime_error(std::string(who) + ": need at least 2-d images");
  PlaneView v;
  v.h = s[s.size() - 2];
  v.w = s[s.size() - 1];
  v.planes = 1;
  for (size_t i = 0; i + 2 < s.size(); ++i) v.planes *= s[i];
  return v;
}

// One shared expression for every second-moment combination so that
// identical inputs give bit-identical covariance and variances.
double weighted_cov(double m2, double m1x, double m1y) {
  return m2 - m1x * m1y;
}

const std::vector<double>& gaussian_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(static_cast<size_t>(kSsimWindow) * kSsimWindow);
    const double c = (kSsimWindow - 1) / 2.0;
    double total = 0.0;
    for (int i = 0; i < kSsimWindow; ++i)
      for (int j = 0; j < kSsimWindow; ++j) {
        double d2 = (i - c) * (i - c) + (j - c) * (j - c);
        double v = std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
        w[static_cast<size_t>(i) * kSsimWindow + j] = v;
        total += v;
      }
    for (double& v : w) v /= total;
    return w;
  }();
  return win;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

MeanStd mean_std_of(const std::vector<double>& xs) {
  MeanStd r;
  r.mean = mean_of(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - r.mean) * (x - r.mean);
  r.stddev = xs.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(xs.size()));
  return r;
}

std::string double_field(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json json_double(double v) {
  if (std::isnan(v)) return nlohmann::json("nan");
  if (std::isinf(v)) return v > 0 ? nlohmann::json("inf") : nlohmann::json("-inf");
  return nlohmann::json(v);
}

double double_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw std::runtime_error("report: unrecognized numeric field '" + s + "'");
  }
  return j.get<double>();
}

nlohmann::json mean_std_to_json(const MeanStd& m) {
  return {{"mean", json_double(m.mean)}, {"stddev", json_double(m.stddev)}};
}

MeanStd mean_std_from_json(const nlohmann::json& j) {
  MeanStd m;
  m.mean = double_from_json(j.at("mean"));
  m.stddev = double_from_json(j.at("stddev"));
  return m;
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto& av = a.values();
  const auto& bv = b.values();
  if (av.empty()) throw std::runtime_error("mse: empty image");
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    acc += d * d;
  }
  return acc / static_cast<double>(av.size());
}

double psnr_from_mse(double mse_value, double peak) {
  if (mse_value < 0.0) throw std::runtime_error("psnr: negative mse");
  if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse_value);
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  return psnr_from_mse(mse(a, b), peak);
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
  require_same_shape(a, b, "ssim");
  PlaneView v = plane_view(a, "ssim");
  if (v.h < kSsimWindow || v.w < kSsimWindow)
    throw std::runtime_error("ssim: image smaller than the window");
  const double c1 = kSsimC1 * peak * peak;
  const double c2 = kSsimC2 * peak * peak;
  const std::vector<double>& win = gaussian_window();
  const auto& av = a.values();
  const auto& bv = b.values();

  double total = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < v.planes; ++p) {
    const double* pa = av.data() + p * v.h * v.w;
    const double* pb = bv.data() + p * v.h * v.w;
    for (int64_t y = 0; y + kSsimWindow <= v.h; ++y) {
      for (int64_t x = 0; x + kSsimWindow <= v.w; ++x) {
        double m1a = 0.0, m1b = 0.0, m2aa = 0.0, m2bb = 0.0, m2ab = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
          const double* ra = pa + (y + i) * v.w + x;
          const double* rb = pb + (y + i) * v.w + x;
          const double* rw = win.data() + static_cast<size_t>(i) * kSsimWindow;
          for (int j = 0; j < kSsimWindow; ++j) {
            double wa = rw[j] * ra[j];
            double wb = rw[j] * rb[j];
            m1a += wa;
            m1b += wb;
            m2aa += wa * ra[j];
            m2bb += wb * rb[j];
            m2ab += wa * rb[j];
          }
        }
        double var_a = weighted_cov(m2aa, m1a, m1a);
        double var_b = weighted_cov(m2bb, m1b, m1b);
        double cov = weighted_cov(m2ab, m1a, m1b);
        double sq_a = m1a * m1a;
        double sq_b = m1b * m1b;
        double cross = m1a * m1b;
        double lum = (2.0 * cross + c1) / (sq_a + sq_b + c1);
        double str = (2.0 * cov + c2) / (var_a + var_b + c2);
        total += lum * str;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double random_perceptual_distance(const Tensor& a, const Tensor& b,
                                  const RandomFeatureExtractor& phi) {
  require_same_shape(a, b, "random_perceptual_distance");
  NoGradScope ng;
  Tensor xa = a, xb = b;
  if (a.dim() == 2) {
    xa = reshape(a, {1, 1, a.shape()[0], a.shape()[1]});
    xb = reshape(b, {1, 1, b.shape()[0], b.shape()[1]});
  } else if (a.dim() == 3) {
    xa = reshape(a, {1, a.shape()[0], a.shape()[1], a.shape()[2]});
    xb = reshape(b, {1, b.shape()[0], b.shape()[1], b.shape()[2]});
  }
  Tensor fa = random_features_forward(phi, xa);
  Tensor fb = random_features_forward(phi, xb);
  const auto& s = fa.shape();
  if (s.size() != 4)
    throw std::runtime_error("random_perceptual_distance: expected [B,C,H,W] features");
  const int64_t batch = s[0], ch = s[1], hw = s[2] * s[3];
  const auto& va = fa.values();
  const auto& vb = fb.values();
  const double eps = 1e-10;
  double acc = 0.0;
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t px = 0; px < hw; ++px) {
      double na = 0.0, nb = 0.0;
      for (int64_t c = 0; c < ch; ++c) {
        double xa = va[(n * ch + c) * hw + px];
        double xb = vb[(n * ch + c) * hw + px];
        na += xa * xa;
        nb += xb * xb;
      }
      na = std::sqrt(na) + eps;
      nb = std::sqrt(nb) + eps;
      for (int64_t c = 0; c < ch; ++c) {
        double d = va[(n * ch + c) * hw + px] / na - vb[(n * ch + c) * hw + px] / nb;
        acc += d * d;
      }
    }
  }
  return std::sqrt(acc / static_cast<double>(batch * ch * hw));
}

EvalAggregates compute_aggregates(const std::vector<EvalRecord>& records) {
  std::vector<double> ms, ss, ps, rs, cs;
  ms.reserve(records.size());
  for (const EvalRecord& r : records) {
    ms.push_back(r.mse);
    ss.push_back(r.ssim);
    ps.push_back(r.psnr);
    rs.push_back(r.rpd);
    cs.push_back(r.copy_baseline_ssim);
  }
  EvalAggregates agg;
  agg.mse = mean_std_of(ms);
  agg.ssim = mean_std_of(ss);
  agg.psnr = mean_std_of(ps);
  agg.rpd = mean_std_of(rs);
  agg.copy_baseline_ssim = mean_std_of(cs);
  return agg;
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalRecord& r : report.records) {
    rows.push_back({{"subject", r.subject},
                    {"baseline_age", json_double(r.baseline_age)},
                    {"target_age", json_double(r.target_age)},
                    {"mse", json_double(r.mse)},
                    {"ssim", json_double(r.ssim)},
                    {"psnr", json_double(r.psnr)},
                    {"rpd", json_double(r.rpd)},
                    {"copy_baseline_ssim", json_double(r.copy_baseline_ssim)}});
  }
  nlohmann::json agg = {
      {"mse", mean_std_to_json(report.aggregates.mse)},
      {"ssim", mean_std_to_json(report.aggregates.ssim)},
      {"psnr", mean_std_to_json(report.aggregates.psnr)},
      {"rpd", mean_std_to_json(report.aggregates.rpd)},
      {"copy_baseline_ssim", mean_std_to_json(report.aggregates.copy_baseline_ssim)}};
  return {{"header",
           {{"ssim_window", report.ssim_window},
            {"ssim_sigma", report.ssim_sigma},
            {"ssim_c1", report.ssim_c1},
            {"ssim_c2", report.ssim_c2},
            {"seconds_per_image", json_double(report.seconds_per_image)}}},
          {"records", rows},
          {"aggregates", agg}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  const auto& h = j.at("header");
  report.ssim_window = h.at("ssim_window").get<int>();
  report.ssim_sigma = h.at("ssim_sigma").get<double>();
  report.ssim_c1 = h.at("ssim_c1").get<double>();
  report.ssim_c2 = h.at("ssim_c2").get<double>();
  report.seconds_per_image = double_from_json(h.at("seconds_per_image"));
  for (const auto& row : j.at("records")) {
    EvalRecord r;
    r.subject = row.at("subject").get<int>();
    r.baseline_age = double_from_json(row.at("baseline_age"));
    r.target_age = double_from_json(row.at("target_age"));
    r.mse = double_from_json(row.at("mse"));
    r.ssim = double_from_json(row.at("ssim"));
    r.psnr = double_from_json(row.at("psnr"));
    r.rpd = double_from_json(row.at("rpd"));
    r.copy_baseline_ssim = double_from_json(row.at("copy_baseline_ssim"));
    report.records.push_back(r);
  }
  const auto& a = j.at("aggregates");
  report.aggregates.mse = mean_std_from_json(a.at("mse"));
  report.aggregates.ssim = mean_std_from_json(a.at("ssim"));
  report.aggregates.psnr = mean_std_from_json(a.at("psnr"));
  report.aggregates.rpd = mean_std_from_json(a.at("rpd"));
  report.aggregates.copy_baseline_ssim =
      mean_std_from_json(a.at("copy_baseline_ssim"));
  return report;
}

void save_report_json(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << report_to_json(report).dump(2) << "\n";
}

EvalReport load_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return report_from_json(j);
}

void save_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "subject,baseline_age,target_age,mse,ssim,psnr,rpd,copy_baseline_ssim\n";
  for (const EvalRecord& r : report.records) {
    out << r.subject << ',' << double_field(r.baseline_age) << ','
        << double_field(r.target_age) << ',' << double_field(r.mse) << ','
        << double_field(r.ssim) << ',' << double_field(r.psnr) << ','
        << double_field(r.rpd) << ',' << double_field(r.copy_baseline_ssim)
        << "\n";
  }
}

std::string summary_table(const EvalReport& report) {
  std::ostringstream os;
  char buf[160];
  os << "method      MSE        SSIM      PSNR      RPD       s/image\n";
  std::snprintf(buf, sizeof(buf), "%-10s  %-9.4g  %-8.4f  %-8.4g  %-8.4f  %-8.3f\n",
                "pipeline", report.aggregates.mse.mean,
                report.aggregates.ssim.mean, report.aggregates.psnr.mean,
                report.aggregates.rpd.mean, report.seconds_per_image);
  os << buf;
  std::snprintf(buf, sizeof(buf), "%-10s  %-9s  %-8.4f  %-8s  %-8s  %-8s\n",
                "copy", "-", report.aggregates.copy_baseline_ssim.mean, "-",
                "-", "-");
  os << buf;
  return os.str();
}

EvalReport evaluate_pipeline(const PairedDataset& data, const GateModel& gate,
                             const UNet& net, const ControlBranch* control,
                             const NoiseSchedule& sched,
                             const SamplerConfig& sampler_cfg,
                             const RandomFeatureExtractor& phi, uint64_t seed) {
  const int64_t n = data.baseline_images.shape().empty()
                        ? 0
                        : data.baseline_images.shape()[0];
  if (n == 0 || static_cast<size_t>(n) != data.pairs.size())
    throw std::runtime_error("evaluate_pipeline: empty or inconsistent dataset");

  EvalReport report;
  Rng rng(seed);
  NoGradScope ng;
  const auto t_start = std::chrono::steady_clock::now();
  for (int64_t i = 0; i < n; ++i) {
    Tensor baseline = slice(data.baseline_images, 0, i, 1);  // [1,1,S,S]
    Tensor target = slice(data.target_images, 0, i, 1);
    Tensor base_latent = gate_encode(gate, baseline);

    EpsModel model = [&](const Tensor& z_t, const std::vector<int>& t,
                         const std::vector<ConditioningVector>& cond) {
      Tensor tokens = cond_tokens(net.cond, cond, t);
      // Every chain in the batch conditions on the same baseline.
      Tensor base = base_latent;
      if (z_t.shape()[0] != base.shape()[0]) {
        std::vector<Tensor> reps(static_cast<size_t>(z_t.shape()[0]), base);
        base = concat(reps, 0);
      }
      return unet_forward(net, z_t, t, tokens, control,
                          control ? &base : nullptr);
    };

    // Per-chain shape: the sampler adds its own batch axis for the K chains.
    Shape latent_shape(base_latent.shape().begin() + 1,
                       base_latent.shape().end());
    Tensor z = sample_latent(model, data.conds[static_cast<size_t>(i)], sched,
                             sampler_cfg, rng, latent_shape);
    Shape batched = latent_shape;
    batched.insert(batched.begin(), 1);
    Tensor x_hat = gate_decode(gate, reshape(z, batched));

    EvalRecord rec;
    rec.subject = data.pairs[static_cast<size_t>(i)].subject;
    rec.baseline_age = data.pairs[static_cast<size_t>(i)].baseline_age;
    rec.target_age = data.pairs[static_cast<size_t>(i)].target_age;
    rec.mse = mse(x_hat, target);
    rec.psnr = psnr_from_mse(rec.mse);
    rec.ssim = ssim(x_hat, target);
    rec.rpd = random_perceptual_distance(x_hat, target, phi);
    rec.copy_baseline_ssim = ssim(baseline, target);
    report.records.push_back(rec);
  }
  const auto t_end = std::chrono::steady_clock::now();
  report.seconds_per_image =
      std::chrono::duration<double>(t_end - t_start).count() /
      static_cast<double>(n);
  report.aggregates = compute_aggregates(report.records);
  return report;
}

}  // namespace climb
