#include "climb/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace climb {

NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw std::runtime_error("make_schedule: timesteps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start < 1.0) || !(beta_end < 1.0) || beta_end < beta_start)
    throw std::runtime_error("make_schedule: betas must satisfy 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.betas.resize(static_cast<size_t>(timesteps));
  s.alphas.resize(static_cast<size_t>(timesteps));
  s.alpha_bars.resize(static_cast<size_t>(timesteps));
  double prod = 1.0;
  for (int t = 0; t < timesteps; ++t) {
    double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
    double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas[static_cast<size_t>(t)] = beta;
    s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
    prod *= 1.0 - beta;
    s.alpha_bars[static_cast<size_t>(t)] = prod;
  }
  return s;
}

bool is_training_grade(const NoiseSchedule& s) {
  return !s.alpha_bars.empty() && s.alpha_bars.back() < 0.01;
}

namespace {

void check_t(const NoiseSchedule& s, int t, const char* op) {
  if (t < 0 || t >= s.T())
    throw std::runtime_error(std::string(op) + ": t out of range [0," +
                             std::to_string(s.T() - 1) + "]");
}

double abar_at(const NoiseSchedule& s, int t) {
  // t == -1 is the virtual clean step.
  return t < 0 ? 1.0 : s.alpha_bars[static_cast<size_t>(t)];
}

}  // namespace

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  std::vector<int> ts(static_cast<size_t>(z0.size(0)), t);
  return q_sample_per_sample(z0, ts, eps, s);
}

Tensor q_sample_per_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                           const NoiseSchedule& s) {
  if (z0.shape() != eps.shape())
    throw std::runtime_error("q_sample: z0 and eps shapes differ");
  int64_t B = z0.size(0);
  if (static_cast<int64_t>(t.size()) != B)
    throw std::runtime_error("q_sample: one timestep per batch row required");
  int64_t inner = z0.numel() / B;
  std::vector<double> csv(static_cast<size_t>(B)), cnv(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    check_t(s, t[static_cast<size_t>(b)], "q_sample");
    double ab = s.alpha_bars[static_cast<size_t>(t[static_cast<size_t>(b)])];
    csv[static_cast<size_t>(b)] = std::sqrt(ab);
    cnv[static_cast<size_t>(b)] = std::sqrt(1.0 - ab);
  }
  std::vector<double> out(static_cast<size_t>(z0.numel()));
  const double* zp = z0.values().data();
  const double* ep = eps.values().data();
  for (int64_t b = 0; b < B; ++b) {
    double cs = csv[static_cast<size_t>(b)], cn = cnv[static_cast<size_t>(b)];
    for (int64_t i = b * inner; i < (b + 1) * inner; ++i)
      out[static_cast<size_t>(i)] = cs * zp[i] + cn * ep[i];
  }
  bool rec =
      Tape::current() != nullptr && (z0.requires_grad() || eps.requires_grad());
  Tensor zt = Tensor::from_values(z0.shape(), std::move(out), rec);
  if (rec) {
    // The map is row-wise affine, so the pullback just reuses the coefficients.
    Tensor z0h = z0, epsh = eps, zth = zt;
    Tape::current()->record([z0h, epsh, zth, csv = std::move(csv), cnv = std::move(cnv), B,
                             inner]() mutable {
      if (!zth.has_grad()) return;
      const std::vector<double>& og = zth.grad();
      bool wz = z0h.requires_grad(), we = epsh.requires_grad();
      double* gz = wz ? z0h.grad_mutable().data() : nullptr;
      double* ge = we ? epsh.grad_mutable().data() : nullptr;
      for (int64_t b = 0; b < B; ++b) {
        double cs = csv[static_cast<size_t>(b)], cn = cnv[static_cast<size_t>(b)];
        for (int64_t i = b * inner; i < (b + 1) * inner; ++i) {
          if (wz) gz[i] += cs * og[static_cast<size_t>(i)];
          if (we) ge[i] += cn * og[static_cast<size_t>(i)];
        }
      }
    });
  }
  return zt;
}

Tensor eps_loss(const Tensor& eps_true, const Tensor& eps_pred) {
  if (eps_true.shape() != eps_pred.shape())
    throw std::runtime_error("eps_loss: shape mismatch");
  return mean_all(square(eps_pred - eps_true));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& s, double eta, Rng* rng) {
  check_t(s, t, "ddim_step");
  if (t_prev >= t) throw std::runtime_error("ddim_step: t_prev must be below t");
  if (t_prev < -1) throw std::runtime_error("ddim_step: t_prev must be >= -1");
  if (eta < 0.0 || eta > 1.0) throw std::runtime_error("ddim_step: eta must lie in [0,1]");
  if (z_t.shape() != eps_hat.shape())
    throw std::runtime_error("ddim_step: z_t and eps_hat shapes differ");

  double ab_t = abar_at(s, t);
  double ab_p = abar_at(s, t_prev);
  // clean estimate from the eps parameterization
  Tensor z0_hat = scale(z_t - scale(eps_hat, std::sqrt(1.0 - ab_t)), 1.0 / std::sqrt(ab_t));
  double sigma = 0.0;
  if (eta > 0.0 && t_prev >= 0) {
    sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
  }
  double dir_coef_sq = 1.0 - ab_p - sigma * sigma;
  double dir_coef = dir_coef_sq > 0.0 ? std::sqrt(dir_coef_sq) : 0.0;
  Tensor out = scale(z0_hat, std::sqrt(ab_p)) + scale(eps_hat, dir_coef);
  if (sigma > 0.0) {
    if (rng == nullptr) throw std::runtime_error("ddim_step: eta > 0 needs an rng");
    Tensor xi = Tensor::randn(z_t.shape(), *rng);
    out = out + scale(xi, sigma);
  }
  return out;
}

std::vector<int> ddim_timesteps(int T, int num_steps) {
  if (num_steps < 1 || num_steps > T)
    throw std::runtime_error("ddim_timesteps: need 1 <= num_steps <= T");
  std::vector<int> ts;
  if (num_steps == 1) {
    ts.push_back(T - 1);
    return ts;
  }
  for (int i = num_steps - 1; i >= 0; --i) {
    double pos = static_cast<double>(i) * (T - 1) / (num_steps - 1);
    int t = static_cast<int>(std::lround(pos));
    if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;  // strictly descending
    ts.push_back(t);
  }
  return ts;
}

Tensor sample_latent(const EpsModel& model, const ConditioningVector& cond,
                     const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng,
                     const Shape& latent_shape) {
  int K = cfg.num_latent_samples;
  if (K < 1) throw std::runtime_error("sample_latent: num_latent_samples must be >= 1");
  std::vector<int> ts = ddim_timesteps(s.T(), cfg.num_steps);

  // All chains run as one batch; the starting noise is drawn chain-by-chain
  // in a fixed order so results are reproducible for a given rng state.
  Shape batched = latent_shape;
  batched.insert(batched.begin(), K);
  Tensor z = Tensor::randn(batched, rng);
  std::vector<ConditioningVector> conds(static_cast<size_t>(K), cond);

  NoGradScope ng;
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : -1;
    std::vector<int> tb(static_cast<size_t>(K), t);
    Tensor eps_hat = model(z, tb, conds);
    z = ddim_step(z, eps_hat, t, t_prev, s, cfg.eta, &rng);
  }
  // average the K chains
  Tensor flat = reshape(z, {K, -1});
  Tensor avg = scale(sum_axis(flat, 0, false), 1.0 / static_cast<double>(K));
  return reshape(avg, latent_shape);
}

}  // namespace climb
