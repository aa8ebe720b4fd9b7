#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "climb/gate.hpp"
#include "climb/phantom.hpp"
#include "climb/schedule.hpp"
#include "climb/tensor.hpp"
#include "climb/unet.hpp"

namespace climb {

// SSIM parameters, fixed for the whole project and recorded in every report
// header. 7x7 fits the 32x32 images with room for meaningful local stats.
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;  // (0.01 L)^2 with L = 1
inline constexpr double kSsimC2 = 0.03 * 0.03;  // (0.03 L)^2 with L = 1

// Plain scalar metrics over images with values in [0,1]. All of them accept
// any equal-shaped pair of tensors and treat the values as one flat grid of
// pixels per image plane.
double mse(const Tensor& a, const Tensor& b);

// 10*log10(L^2 / mse). Identical images give +infinity, which serializes as
// the string "inf" so reports still round-trip.
double psnr_from_mse(double mse_value, double peak = 1.0);
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Mean local SSIM, Gaussian window kSsimWindow x kSsimWindow, sigma
// kSsimSigma, valid placements only. Throws if any spatial dim is smaller
// than the window. a and b must be [H,W], [C,H,W] or [B,C,H,W].
double ssim(const Tensor& a, const Tensor& b, double peak = 1.0);

// Feature-space distance through the frozen random conv stack: channel
// vectors are unit-normalized at every spatial location, then the RMS
// difference is taken. Zero iff the feature maps coincide.
double random_perceptual_distance(const Tensor& a, const Tensor& b,
                                  const RandomFeatureExtractor& phi);

struct EvalRecord {
  int subject = 0;
  double baseline_age = 0.0;
  double target_age = 0.0;
  double mse = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
  double rpd = 0.0;
  double copy_baseline_ssim = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population convention
};

struct EvalAggregates {
  MeanStd mse, ssim, psnr, rpd, copy_baseline_ssim;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  EvalAggregates aggregates;      // always equals compute_aggregates(records)
  double seconds_per_image = 0.0;
  int ssim_window = kSsimWindow;
  double ssim_sigma = kSsimSigma;
  double ssim_c1 = kSsimC1;
  double ssim_c2 = kSsimC2;
};

// Deterministic aggregation in record order; infinite psnr rows make the
// psnr aggregate infinite rather than being dropped silently.
EvalAggregates compute_aggregates(const std::vector<EvalRecord>& records);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
void save_report_json(const std::string& path, const EvalReport& report);
EvalReport load_report_json(const std::string& path);
void save_report_csv(const std::string& path, const EvalReport& report);

// Two-row summary (pipeline vs identity copy) in the usual
// method | MSE | SSIM | PSNR | RPD | s/image layout.
std::string summary_table(const EvalReport& report);

// Full test-time protocol for one paired dataset: encode the baseline,
// build conditioning tokens from the stored (already z-scored) covariates,
// run the DDIM sampler with latent averaging, decode, then score against
// the true follow-up and record the identity-copy SSIM alongside.
// `control` may be null (unconditioned denoiser).
EvalReport evaluate_pipeline(const PairedDataset& data, const GateModel& gate,
                             const UNet& net, const ControlBranch* control,
                             const NoiseSchedule& sched,
                             const SamplerConfig& sampler_cfg,
                             const RandomFeatureExtractor& phi, uint64_t seed);

}  // namespace climb
