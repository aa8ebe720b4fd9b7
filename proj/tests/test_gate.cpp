#include "climb/gate.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "climb/gradcheck.hpp"
#include "test_util.hpp"

using namespace climb;
using climb::testutil::bit_identical;

namespace {

// smooth gaussian bump, values in [0,1]
Tensor bump_image(int size, double cy, double cx, double sigma) {
  std::vector<double> v(static_cast<size_t>(size) * size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
      v[static_cast<size_t>(r) * size + c] = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  return Tensor::from_values({1, 1, size, size}, std::move(v));
}

Tensor bump_stack(int n, int size, Rng& rng) {
  std::vector<Tensor> imgs;
  for (int i = 0; i < n; ++i)
    imgs.push_back(bump_image(size, 2.0 + rng.uniform() * (size - 4),
                              2.0 + rng.uniform() * (size - 4),
                              1.5 + 2.0 * rng.uniform()));
  return concat(imgs, 0);
}

GateConfig tiny_config() {
  GateConfig cfg;
  cfg.image_size = 8;
  cfg.latent_channels = 2;
  cfg.base_width = 6;
  cfg.groups = 2;
  return cfg;
}

}  // namespace

TEST(ReconLoss, ClosedForms) {
  Tensor a = Tensor::from_values({1, 2}, {0.0, 1.0});
  Tensor b = Tensor::from_values({1, 2}, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(recon_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(recon_loss(Tensor::zeros({3, 3}), Tensor::ones({3, 3})).item(), 1.0);
  EXPECT_DOUBLE_EQ(recon_loss(a, b).item(), 0.5);
  EXPECT_THROW(recon_loss(a, Tensor::zeros({3})), std::runtime_error);
}

TEST(Directions, UnitNormAndOneDimensionalSigns) {
  Rng rng(1);
  Tensor dirs = sample_directions(32, 5, rng);
  for (int i = 0; i < 32; ++i) {
    double n2 = 0.0;
    for (int j = 0; j < 5; ++j) {
      double v = dirs.values()[static_cast<size_t>(i * 5 + j)];
      n2 += v * v;
    }
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-9);
  }
  Tensor one_d = sample_directions(64, 1, rng);
  for (double v : one_d.values()) EXPECT_DOUBLE_EQ(std::abs(v), 1.0);
}

TEST(Directions, MonteCarloSymmetry) {
  Rng rng(2);
  int k = 10000, d = 3;
  Tensor dirs = sample_directions(k, d, rng);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < k; ++i) mean += dirs.values()[static_cast<size_t>(i * d + j)];
    mean /= k;
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(static_cast<double>(k)));
  }
}

TEST(SlicedLoss, EnumeratedOneDimensionalCase) {
  Tensor z = Tensor::from_values({2, 1}, {0.0, 2.0});
  Tensor prior = Tensor::from_values({2, 1}, {1.0, 3.0});
  Tensor dirs = Tensor::from_values({1, 1}, {1.0});
  EXPECT_DOUBLE_EQ(sliced_cdf_loss(z, prior, dirs, 2.0).item(), 1.0);
  // identical sets vanish exactly
  EXPECT_DOUBLE_EQ(sliced_cdf_loss(z, z, dirs, 2.0).item(), 0.0);
}

TEST(SlicedLoss, PermutingEitherSetLeavesValueUnchanged) {
  Rng rng(3);
  Tensor z = Tensor::randn({8, 3}, rng);
  Tensor prior = Tensor::randn({8, 3}, rng);
  Tensor dirs = sample_directions(6, 3, rng);
  double base = sliced_cdf_loss(z, prior, dirs, 2.0).item();
  std::vector<double> zperm;
  for (int i = 7; i >= 0; --i)
    for (int j = 0; j < 3; ++j) zperm.push_back(z.values()[static_cast<size_t>(i * 3 + j)]);
  double permuted =
      sliced_cdf_loss(Tensor::from_values({8, 3}, std::move(zperm)), prior, dirs, 2.0)
          .item();
  EXPECT_DOUBLE_EQ(base, permuted);
}

TEST(SlicedLoss, MonotoneInMeanShift) {
  Rng rng(4);
  Tensor base = Tensor::randn({512, 4}, rng);
  Tensor prior = Tensor::randn({512, 4}, rng);
  Tensor dirs = sample_directions(16, 4, rng);
  double prev = sliced_cdf_loss(base, prior, dirs, 2.0).item();
  for (double delta : {0.5, 1.0, 2.0}) {
    Tensor shifted = add_scalar(base, delta);
    double v = sliced_cdf_loss(shifted, prior, dirs, 2.0).item();
    EXPECT_GT(v, prev) << "delta " << delta;
    prev = v;
  }
}

TEST(SlicedLoss, MatchedGaussiansFarBelowShiftedOnes) {
  Rng rng(5);
  int n = 2048, d = 4;
  Tensor a = Tensor::randn({n, d}, rng);
  Tensor b = Tensor::randn({n, d}, rng);
  Tensor dirs = sample_directions(64, d, rng);
  double matched = sliced_cdf_loss(a, b, dirs, 2.0).item();
  double shifted = sliced_cdf_loss(add_scalar(a, 0.5), b, dirs, 2.0).item();
  EXPECT_GE(shifted, 10.0 * matched);
}

TEST(SlicedLoss, GradCheckThroughSort) {
  Rng rng(6);
  Tensor z = Tensor::randn({6, 3}, rng, 1.0, true);
  Tensor prior = Tensor::randn({6, 3}, rng);
  Tensor dirs = sample_directions(4, 3, rng);
  auto fn = [&](const std::vector<Tensor>& in) {
    return sliced_cdf_loss(in[0], prior, dirs, 2.0);
  };
  EXPECT_LT(grad_check_all(fn, {z}).max_rel_err, 1e-4);
}

TEST(SlicedLoss, ShapeAndCountValidation) {
  Rng rng(7);
  Tensor z = Tensor::randn({4, 3}, rng);
  Tensor dirs = sample_directions(2, 3, rng);
  EXPECT_THROW(sliced_cdf_loss(z, Tensor::randn({5, 3}, rng), dirs, 2.0),
               std::runtime_error);
  EXPECT_THROW(sliced_cdf_loss(z, z, Tensor::randn({2, 4}, rng), 2.0), std::runtime_error);
}

TEST(Perceptual, ZeroAtIdentityAndNonnegative) {
  RandomFeatureExtractor phi = make_random_features(11);
  Rng rng(8);
  Tensor x = bump_stack(2, 16, rng);
  EXPECT_DOUBLE_EQ(perceptual_loss(x, x, phi).item(), 0.0);
  Tensor y = bump_stack(2, 16, rng);
  EXPECT_GT(perceptual_loss(x, y, phi).item(), 0.0);
}

TEST(Perceptual, SameSeedSameFeatures_FeaturesFrozen) {
  RandomFeatureExtractor a = make_random_features(5);
  RandomFeatureExtractor b = make_random_features(5);
  EXPECT_TRUE(bit_identical(a.c2.w.values(), b.c2.w.values()));
  EXPECT_FALSE(a.c1.w.requires_grad());
  Rng rng(9);
  Tensor x = bump_stack(1, 16, rng);
  EXPECT_TRUE(bit_identical(random_features_forward(a, x).values(),
                            random_features_forward(b, x).values()));
}

TEST(Perceptual, PixelShiftCheaperThanMatchedNoise) {
  // a 1-px translation and a noise image with the same pixel MSE: features
  // should find the translation far more similar
  RandomFeatureExtractor phi = make_random_features(11);
  Tensor x = bump_image(32, 15.0, 15.0, 4.0);
  std::vector<double> sh(static_cast<size_t>(32 * 32));
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      sh[static_cast<size_t>(r * 32 + c)] =
          x.values()[static_cast<size_t>(r * 32 + (c + 31) % 32)];
  Tensor shifted = Tensor::from_values({1, 1, 32, 32}, std::move(sh));
  double mse_shift = recon_loss(x, shifted).item();
  Rng rng(10);
  Tensor noise = Tensor::randn({1, 1, 32, 32}, rng);
  double noise_ms = mean_all(square(noise)).item();
  Tensor noisy = x + scale(noise, std::sqrt(mse_shift / noise_ms));
  EXPECT_NEAR(recon_loss(x, noisy).item(), mse_shift, 1e-12);
  EXPECT_LT(perceptual_loss(x, shifted, phi).item(),
            perceptual_loss(x, noisy, phi).item());
}

TEST(Adversarial, ZeroLogitDiscriminatorGivesTwoLogTwo) {
  Rng rng(12);
  PatchDiscriminator disc = make_patch_discriminator(8, rng);
  disc.head.w = Tensor::zeros(disc.head.w.shape(), true);
  disc.head.b = Tensor::zeros(disc.head.b.shape(), true);
  Tensor x = bump_stack(2, 16, rng);
  Tensor xh = bump_stack(2, 16, rng);
  AdversarialLosses adv = adversarial_losses(x, xh, disc);
  EXPECT_NEAR(adv.loss_disc.item(), 2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(adv.loss_gen.item(), std::log(2.0), 1e-12);
}

TEST(Adversarial, GeneratorGradientFlowsIntoReconstruction) {
  Rng rng(13);
  PatchDiscriminator disc = make_patch_discriminator(8, rng);
  Tensor x = bump_stack(2, 16, rng);
  Tensor xh = bump_stack(2, 16, rng);
  xh.set_requires_grad(true);
  {
    TapeScope tape;
    AdversarialLosses adv = adversarial_losses(x, xh, disc);
    backward(adv.loss_gen);
  }
  double gmax = 0.0;
  for (double g : xh.grad()) gmax = std::max(gmax, std::abs(g));
  EXPECT_GT(gmax, 0.0);
  xh.zero_grad();
  auto fn = [&](const std::vector<Tensor>& in) {
    return adversarial_losses(x, in[0], disc).loss_gen;
  };
  EXPECT_LT(grad_check_all(fn, {xh}, 1e-5, 24).max_rel_err, 1e-4);
}

TEST(Adversarial, DiscriminatorLossTreatsReconstructionAsConstant) {
  Rng rng(14);
  PatchDiscriminator disc = make_patch_discriminator(8, rng);
  Tensor x = bump_stack(1, 16, rng);
  Tensor xh = bump_stack(1, 16, rng);
  xh.set_requires_grad(true);
  {
    TapeScope tape;
    AdversarialLosses adv = adversarial_losses(x, xh, disc);
    backward(adv.loss_disc);
  }
  EXPECT_FALSE(xh.has_grad());
}

TEST(TotalLoss, WeightedSumAndValidation) {
  GateLossParts parts;
  parts.rec = Tensor::scalar(0.1);
  parts.sd = Tensor::scalar(0.2);
  parts.perc = Tensor::scalar(0.3);
  parts.adv_gen = Tensor::scalar(0.4);
  GateLossWeights w{1.0, 1.0, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(gate_total_loss(parts, w).item(), 1.0);
  GateLossWeights only_rec{1.0, 0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(gate_total_loss(parts, only_rec).item(), 0.1);
  GateLossWeights bad{1.0, -0.1, 0.0, 0.0};
  EXPECT_THROW(gate_total_loss(parts, bad), std::runtime_error);
  GateLossWeights no_rec{0.0, 1.0, 1.0, 0.0};
  EXPECT_THROW(gate_total_loss(parts, no_rec), std::runtime_error);
}

TEST(TotalLoss, GradientDistributesPerWeight) {
  Rng rng(15);
  Tensor t = Tensor::randn({6}, rng, 1.0, true);
  GateLossWeights w{1.0, 0.5, 0.25, 0.0};
  auto fn = [&w](const std::vector<Tensor>& in) {
    GateLossParts parts;
    parts.rec = mean_all(square(in[0]));
    parts.sd = mean_all(abs_pow(in[0], 3.0));
    parts.perc = mean_all(exp(scale(in[0], 0.5)));
    parts.adv_gen = Tensor::scalar(0.0);
    return gate_total_loss(parts, w);
  };
  EXPECT_LT(grad_check_all(fn, {t}).max_rel_err, 1e-4);
}

TEST(GateModel, ShapeContractsAndDeterminism) {
  Rng rng(16);
  GateConfig cfg;  // 32x32, latent [4,8,8]
  GateModel model = make_gate_model(cfg, rng);
  Tensor x = bump_stack(2, 32, rng);
  Tensor z = gate_encode(model, x);
  EXPECT_EQ(z.shape(), (Shape{2, 4, 8, 8}));
  Tensor xh = gate_decode(model, z);
  EXPECT_EQ(xh.shape(), (Shape{2, 1, 32, 32}));
  for (double v : xh.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  // encoder and decoder are sampling-free: repeated runs are bit-identical
  EXPECT_TRUE(bit_identical(gate_encode(model, x).values(), z.values()));
  EXPECT_TRUE(bit_identical(gate_decode(model, z).values(), xh.values()));
  EXPECT_THROW(gate_encode(model, Tensor::zeros({1, 1, 16, 16})), std::runtime_error);
  EXPECT_THROW(gate_decode(model, Tensor::zeros({1, 4, 4, 4})), std::runtime_error);
}

TEST(GateModel, GradCheckThroughFullObjective) {
  Rng rng(17);
  GateModel model = make_gate_model(tiny_config(), rng);
  RandomFeatureExtractor phi = make_random_features(3);
  Tensor x = bump_stack(2, 8, rng);
  Tensor prior = Tensor::randn({2 * 2 * 2, 2}, rng);
  Tensor dirs = sample_directions(4, 2, rng);
  NamedTensors params;
  collect_params(model, params, "gate");
  std::vector<Tensor> wrt;
  for (auto& [name, t] : params.items) wrt.push_back(t);
  GateLossWeights w{1.0, 0.05, 0.1, 0.0};
  auto fn = [&](const std::vector<Tensor>&) {
    Tensor z = gate_encode(model, x);
    Tensor xh = gate_decode(model, z);
    GateLossParts parts;
    parts.rec = recon_loss(x, xh);
    parts.sd = sliced_cdf_loss(latent_positions_as_samples(z), prior, dirs, 2.0);
    parts.perc = perceptual_loss(x, xh, phi);
    return gate_total_loss(parts, w);
  };
  GradCheckResult r = grad_check_all(fn, wrt, 1e-5, 3);
  EXPECT_LT(r.max_rel_err, 1e-4) << "worst at " << r.worst_coord;
}

TEST(TrainGate, LossDecreasesReproduciblyAndDiscStaysUntouched) {
  Rng rng(18);
  Tensor train = bump_stack(24, 8, rng);
  Tensor val = bump_stack(6, 8, rng);
  GateTrainConfig tc;
  tc.batch = 4;
  tc.iters = 120;
  tc.lr = 3e-3;
  tc.checkpoint_every = 0;
  tc.seed = 7;
  tc.sliced.directions = 8;
  GateLossWeights w{1.0, 0.05, 0.1, 0.0};

  Rng mrng(19);
  GateModel model = make_gate_model(tiny_config(), mrng);
  PatchDiscriminator disc = make_patch_discriminator(4, mrng);
  NamedTensors disc_params;
  collect_params(disc, disc_params, "disc");
  uint64_t disc_fp_before = tensors_fingerprint(disc_params);

  GateTrainResult res = train_gate(train, val, model, disc, w, tc);
  ASSERT_EQ(res.history.size(), 120u);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += res.history[static_cast<size_t>(i)].rec;
    last += res.history[res.history.size() - 1 - static_cast<size_t>(i)].rec;
  }
  EXPECT_LT(last, first);
  // lambda_adv = 0: the discriminator is never stepped
  EXPECT_EQ(tensors_fingerprint(disc_params), disc_fp_before);

  // same seeds, fresh model: identical loss curve
  Rng mrng2(19);
  GateModel model2 = make_gate_model(tiny_config(), mrng2);
  PatchDiscriminator disc2 = make_patch_discriminator(4, mrng2);
  GateTrainResult res2 = train_gate(train, val, model2, disc2, w, tc);
  for (size_t i = 0; i < res.history.size(); i += 17)
    EXPECT_DOUBLE_EQ(res.history[i].total, res2.history[i].total);
  EXPECT_DOUBLE_EQ(res.final_val_mse, res2.final_val_mse);
}

TEST(TrainGate, AdversarialPhaseStepsDiscriminator) {
  Rng rng(20);
  Tensor train = bump_stack(12, 8, rng);
  GateTrainConfig tc;
  tc.batch = 2;
  tc.iters = 6;
  tc.checkpoint_every = 0;
  tc.sliced.directions = 4;
  GateLossWeights w{1.0, 0.0, 0.0, 0.1};
  Rng mrng(21);
  GateModel model = make_gate_model(tiny_config(), mrng);
  PatchDiscriminator disc = make_patch_discriminator(4, mrng);
  NamedTensors disc_params;
  collect_params(disc, disc_params, "disc");
  uint64_t before = tensors_fingerprint(disc_params);
  GateTrainResult res = train_gate(train, train, model, disc, w, tc);
  EXPECT_NE(tensors_fingerprint(disc_params), before);
  EXPECT_GT(res.history.back().adv_disc, 0.0);
}

TEST(KsStatistic, HandCaseAndDistributionSeparation) {
  EXPECT_DOUBLE_EQ(ks_statistic_vs_normal({0.0}), 0.5);
  Rng rng(22);
  std::vector<double> normal(2000), uniform(2000);
  for (auto& v : normal) v = rng.normal();
  for (auto& v : uniform) v = rng.uniform();
  EXPECT_LT(ks_statistic_vs_normal(normal), 0.05);
  EXPECT_GT(ks_statistic_vs_normal(uniform), 0.3);
}

TEST(KsStatistic, PerDirectionLatentEvaluation) {
  Rng rng(23);
  GateModel model = make_gate_model(tiny_config(), rng);
  Tensor images = bump_stack(8, 8, rng);
  Tensor dirs = sample_directions(16, 2, rng);
  std::vector<double> ks = latent_direction_ks(model, images, dirs);
  ASSERT_EQ(ks.size(), 16u);
  for (double v : ks) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
