#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "climb/nn.hpp"
#include "climb/optim.hpp"
#include "climb/rng.hpp"
#include "climb/tensor.hpp"

namespace climb {

struct GateConfig {
  int image_size = 32;
  int latent_channels = 4;
  int base_width = 24;
  int groups = 8;
};

// Plain pre-activation residual unit (norm -> silu -> conv, twice).
struct ResBlock2d {
  GroupNorm n1, n2;
  Conv2dLayer c1, c2;
};

ResBlock2d make_res_block2d(int channels, int groups, Rng& rng);
Tensor res_block2d_forward(const Tensor& x, const ResBlock2d& block);

// Deterministic autoencoder: encoder downsamples twice (H -> H/4), decoder
// mirrors with transpose convolutions and a sigmoid head. No sampling paths
// anywhere: identical inputs produce identical latents.
struct GateModel {
  GateConfig cfg;
  Conv2dLayer e_stem;
  Conv2dLayer e_down1;
  ResBlock2d e_res1;
  Conv2dLayer e_down2;
  ResBlock2d e_res2;
  GroupNorm e_out_norm;
  Conv2dLayer e_head;

  Conv2dLayer d_head;
  ResBlock2d d_res1;
  ConvT2dLayer d_up1;
  ResBlock2d d_res2;
  ConvT2dLayer d_up2;
  GroupNorm d_out_norm;
  Conv2dLayer d_out;
};

GateModel make_gate_model(const GateConfig& cfg, Rng& rng);
void collect_params(GateModel& model, NamedTensors& out, const std::string& prefix);

Tensor gate_encode(const GateModel& model, const Tensor& x);  // [B,1,H,W] -> [B,Cz,H/4,W/4]
Tensor gate_decode(const GateModel& model, const Tensor& z);  // inverse shape, values in (0,1)

// Mean squared error over all elements.
Tensor recon_loss(const Tensor& x, const Tensor& x_hat);

struct SlicedAlignConfig {
  int directions = 64;  // K
  double power = 2.0;   // p
};

// K rows, each a Gaussian draw normalized to unit length (redrawn if
// degenerate).
Tensor sample_directions(int k, int d, Rng& rng);

// Empirical sliced order-statistics distance: project both sample sets on
// each direction, sort, mean |s_(i) - r_(i)|^p over pairs then directions.
// Differentiable through the sorts.
Tensor sliced_cdf_loss(const Tensor& z_samples, const Tensor& prior_samples,
                       const Tensor& dirs, double p);

// Reshape a latent grid [B,C,H,W] into per-position samples [B*H*W, C].
Tensor latent_positions_as_samples(const Tensor& z);

// Frozen random conv stack standing in for a pretrained feature network.
struct RandomFeatureExtractor {
  uint64_t seed = 0;
  Conv2dLayer c1, c2, c3;
};

RandomFeatureExtractor make_random_features(uint64_t seed);
Tensor random_features_forward(const RandomFeatureExtractor& phi, const Tensor& x);
Tensor perceptual_loss(const Tensor& x, const Tensor& x_hat,
                       const RandomFeatureExtractor& phi);

// Small patch classifier emitting a grid of logits.
struct PatchDiscriminator {
  Conv2dLayer c1, c2, c3, head;
};

PatchDiscriminator make_patch_discriminator(int base_width, Rng& rng);
void collect_params(PatchDiscriminator& disc, NamedTensors& out, const std::string& prefix);
Tensor disc_logits(const PatchDiscriminator& disc, const Tensor& x);

// Stable log-sigmoid forms. loss_disc treats x_hat as a constant
// (detached); loss_gen is the non-saturating generator objective and keeps
// x_hat attached.
struct AdversarialLosses {
  Tensor loss_disc;
  Tensor loss_gen;
};

AdversarialLosses adversarial_losses(const Tensor& x, const Tensor& x_hat,
                                     const PatchDiscriminator& disc);

struct GateLossWeights {
  double rec = 1.0;
  double sd = 0.05;
  double perc = 0.1;
  double adv = 0.0;
};

struct GateLossParts {
  Tensor rec, sd, perc, adv_gen;
};

// Weighted sum; terms with zero weight are skipped entirely so their
// subgraphs stay untouched. Throws on negative weights or non-positive rec.
Tensor gate_total_loss(const GateLossParts& parts, const GateLossWeights& weights);

struct GateTrainConfig {
  int batch = 4;
  int iters = 2000;  // absolute budget, not a count past start_iter
  double lr = 1e-4;
  int checkpoint_every = 500;
  int log_every = 25;
  SlicedAlignConfig sliced;
  uint64_t seed = 42;
  std::string out_dir;  // empty: no checkpoints / CSV
  // Resume point. When > 0, model weights and optimizer state are restored
  // from out_dir/gate.ckpt (whose recorded iter must match) and the loss CSV
  // is appended to. Per-iteration RNG streams make the continued run
  // bit-identical to an uninterrupted one.
  int start_iter = 0;
  // Extra keys merged into the checkpoint meta (e.g. the run's config hash).
  nlohmann::json extra_meta;
  // Invoked after each checkpoint write with the just-saved iteration count;
  // hosts use it for side artifacts like reconstruction grids.
  std::function<void(int)> on_checkpoint;
};

struct GateLossRow {
  int iter = 0;
  double total = 0, rec = 0, sd = 0, perc = 0, adv_gen = 0, adv_disc = 0;
};

struct GateTrainResult {
  std::vector<GateLossRow> history;
  double final_val_mse = 0.0;
};

// Alternating discriminator/autoencoder Adam steps (disc untouched when
// lambda_adv = 0). images/val_images are [N,1,H,W] stacks.
GateTrainResult train_gate(const Tensor& images, const Tensor& val_images,
                           GateModel& model, PatchDiscriminator& disc,
                           const GateLossWeights& weights, const GateTrainConfig& cfg);

// Mean reconstruction MSE over an [N,1,H,W] stack, evaluated without grads.
double gate_eval_mse(const GateModel& model, const Tensor& images, int batch = 16);

// Kolmogorov–Smirnov statistic of a 1-D sample against the standard normal.
double ks_statistic_vs_normal(std::vector<double> samples);

// Per-direction KS statistics of pooled per-position latents.
std::vector<double> latent_direction_ks(const GateModel& model, const Tensor& images,
                                        const Tensor& dirs, int batch = 16);

}  // namespace climb
