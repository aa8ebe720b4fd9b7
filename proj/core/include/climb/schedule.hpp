#pragma once

#include <functional>
#include <vector>

#include "climb/conditioning.hpp"
#include "climb/rng.hpp"
#include "climb/tensor.hpp"

namespace climb {

// DDPM noise schedule. Linear betas; alpha_bars is the running product of
// (1 - beta). All vectors have length T.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  int T() const { return static_cast<int>(betas.size()); }
};

struct SamplerConfig {
  int num_steps = 25;
  double eta = 0.0;          // 0 = deterministic
  int num_latent_samples = 10;
};

NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end);

// True when the terminal signal level is negligible (alpha_bar[T-1] < 0.01),
// i.e. the schedule destroys enough signal to train on. Tiny schedules used
// in closed-form tests legitimately fail this.
bool is_training_grade(const NoiseSchedule& s);

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps, one t for the whole batch.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s);
// Per-sample timesteps along dim 0.
Tensor q_sample_per_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                           const NoiseSchedule& s);

// Mean squared error over all elements; the denoiser training objective.
Tensor eps_loss(const Tensor& eps_true, const Tensor& eps_pred);

// One reverse step from t to t_prev < t. t_prev == -1 is the virtual final
// step with alpha_bar = 1, which returns the clean estimate z0_hat. With
// eta > 0 the update adds sigma_t * xi noise drawn from rng; eta == 0 never
// touches rng.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& s, double eta, Rng* rng);

// The num_steps sampling timesteps: uniformly spaced over [0, T-1], both
// endpoints included, returned descending.
std::vector<int> ddim_timesteps(int T, int num_steps);

// Noise predictor interface: (z_t [B,C,H,W], per-sample t, per-sample cond)
// -> eps_hat [B,C,H,W].
using EpsModel = std::function<Tensor(const Tensor& z_t, const std::vector<int>& t,
                                      const std::vector<ConditioningVector>& cond)>;

// Runs num_latent_samples independent DDIM chains (batched together) from
// fresh Gaussian noise and returns their average, shape latent_shape. All
// chains share the conditioning vector.
Tensor sample_latent(const EpsModel& model, const ConditioningVector& cond,
                     const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng,
                     const Shape& latent_shape);

}  // namespace climb
