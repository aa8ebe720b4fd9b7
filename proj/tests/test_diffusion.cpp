#include "climb/schedule.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "climb/gradcheck.hpp"
#include "test_util.hpp"

using namespace climb;
using climb::testutil::bit_identical;
using climb::testutil::expect_all_near;

TEST(Schedule, TwoStepClosedForm) {
  NoiseSchedule s = make_schedule(2, 0.5, 0.5);
  EXPECT_EQ(s.T(), 2);
  expect_all_near(Tensor::from_values({2}, s.betas), {0.5, 0.5});
  expect_all_near(Tensor::from_values({2}, s.alphas), {0.5, 0.5});
  expect_all_near(Tensor::from_values({2}, s.alpha_bars), {0.5, 0.25});
  // legitimate schedule, but far too little noise to train on
  EXPECT_FALSE(is_training_grade(s));
}

TEST(Schedule, DefaultScheduleAgainstDirectProduct) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  // independent long-double product oracle
  long double prod = 1.0L;
  for (int t = 0; t < 1000; ++t) {
    long double beta = 1e-4L + (2e-2L - 1e-4L) * static_cast<long double>(t) / 999.0L;
    prod *= 1.0L - beta;
  }
  EXPECT_NEAR(s.alpha_bars.back(), static_cast<double>(prod),
              1e-12 * static_cast<double>(prod));
  EXPECT_GT(s.alpha_bars.back(), 3e-5);
  EXPECT_LT(s.alpha_bars.back(), 5e-5);
  EXPECT_TRUE(is_training_grade(s));
}

TEST(Schedule, MonotoneAndBounded) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  double prev = 1.0;
  for (int t = 0; t < s.T(); ++t) {
    double ab = s.alpha_bars[static_cast<size_t>(t)];
    EXPECT_GT(ab, 0.0);
    EXPECT_LT(ab, prev);
    EXPECT_GT(s.betas[static_cast<size_t>(t)], 0.0);
    EXPECT_LT(s.betas[static_cast<size_t>(t)], 1.0);
    prev = ab;
  }
  EXPECT_THROW(make_schedule(10, 0.0, 0.5), std::runtime_error);
  EXPECT_THROW(make_schedule(10, 0.5, 0.1), std::runtime_error);
  EXPECT_THROW(make_schedule(0, 1e-4, 2e-2), std::runtime_error);
}

TEST(QSample, CleanAndNoisyEndpoints) {
  // degenerate hand schedule with alpha_bar = 1: q_sample returns z0 bits
  NoiseSchedule clean;
  clean.betas = {0.0};
  clean.alphas = {1.0};
  clean.alpha_bars = {1.0};
  Rng rng(3);
  Tensor z0 = Tensor::randn({2, 3}, rng);
  Tensor eps = Tensor::randn({2, 3}, rng);
  EXPECT_TRUE(bit_identical(q_sample(z0, 0, eps, clean).values(), z0.values()));

  // alpha_bar = 0.25: z_t = 0.5 z0 + sqrt(0.75) eps
  NoiseSchedule quarter;
  quarter.betas = {0.75};
  quarter.alphas = {0.25};
  quarter.alpha_bars = {0.25};
  Tensor zt = q_sample(z0, 0, eps, quarter);
  for (int64_t i = 0; i < zt.numel(); ++i)
    EXPECT_NEAR(zt.values()[static_cast<size_t>(i)],
                0.5 * z0.values()[static_cast<size_t>(i)] +
                    std::sqrt(0.75) * eps.values()[static_cast<size_t>(i)],
                1e-15);
}

TEST(QSample, PerSampleMatchesScalarForm) {
  NoiseSchedule s = make_schedule(100, 1e-3, 2e-2);
  Rng rng(4);
  Tensor z0 = Tensor::randn({3, 2, 2}, rng);
  Tensor eps = Tensor::randn({3, 2, 2}, rng);
  std::vector<int> ts = {5, 50, 99};
  Tensor batch = q_sample_per_sample(z0, ts, eps, s);
  for (int b = 0; b < 3; ++b) {
    Tensor row0 = slice(z0, 0, b, 1);
    Tensor rowe = slice(eps, 0, b, 1);
    Tensor expect = q_sample(row0, ts[static_cast<size_t>(b)], rowe, s);
    Tensor got = slice(batch, 0, b, 1);
    EXPECT_TRUE(bit_identical(got.values(), expect.values())) << "row " << b;
  }
  EXPECT_THROW(q_sample(z0, 100, eps, s), std::runtime_error);
}

TEST(EpsLoss, ClosedFormsAndGradient) {
  Tensor ones = Tensor::ones({2, 4});
  Tensor zeros = Tensor::zeros({2, 4});
  EXPECT_DOUBLE_EQ(eps_loss(ones, ones).item(), 0.0);
  EXPECT_DOUBLE_EQ(eps_loss(ones, zeros).item(), 1.0);
  Rng rng(5);
  Tensor t = Tensor::randn({2, 3}, rng);
  Tensor p = Tensor::randn({2, 3}, rng);
  auto fn = [&t](const std::vector<Tensor>& in) { return eps_loss(t, in[0]); };
  EXPECT_LT(grad_check_all(fn, {p}).max_rel_err, 1e-4);
}

TEST(DdimStep, PerfectEpsRecoversCleanLatent) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  Rng rng(6);
  Tensor z0 = Tensor::randn({2, 4, 4}, rng);
  Tensor eps = Tensor::randn({2, 4, 4}, rng);
  for (int t : {1, 500, 999}) {
    Tensor zt = q_sample(z0, t, eps, s);
    Tensor rec = ddim_step(zt, eps, t, -1, s, 0.0, nullptr);
    for (int64_t i = 0; i < rec.numel(); ++i)
      EXPECT_NEAR(rec.values()[static_cast<size_t>(i)], z0.values()[static_cast<size_t>(i)],
                  1e-10)
          << "t=" << t;
  }
}

TEST(DdimStep, DeterministicStepLandsOnForwardMarginal) {
  // at eta=0 with exact eps, stepping t -> t_prev equals q_sample at t_prev
  // with the same eps
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  Rng rng(7);
  Tensor z0 = Tensor::randn({3, 3}, rng);
  Tensor eps = Tensor::randn({3, 3}, rng);
  Tensor zt = q_sample(z0, 700, eps, s);
  Tensor stepped = ddim_step(zt, eps, 700, 300, s, 0.0, nullptr);
  Tensor expect = q_sample(z0, 300, eps, s);
  for (int64_t i = 0; i < stepped.numel(); ++i)
    EXPECT_NEAR(stepped.values()[static_cast<size_t>(i)],
                expect.values()[static_cast<size_t>(i)], 1e-10);
}

TEST(DdimStep, EtaZeroIsBitDeterministicAndNeedsNoRng) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  Rng rng(8);
  Tensor zt = Tensor::randn({2, 2}, rng);
  Tensor eps = Tensor::randn({2, 2}, rng);
  Tensor a = ddim_step(zt, eps, 500, 250, s, 0.0, nullptr);
  Tensor b = ddim_step(zt, eps, 500, 250, s, 0.0, nullptr);
  EXPECT_TRUE(bit_identical(a.values(), b.values()));
}

TEST(DdimStep, StochasticStepNeedsRngAndPerturbs) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  Rng rng(9);
  Tensor zt = Tensor::randn({2, 2}, rng);
  Tensor eps = Tensor::randn({2, 2}, rng);
  EXPECT_THROW(ddim_step(zt, eps, 500, 250, s, 1.0, nullptr), std::runtime_error);
  Rng r1(10), r2(11);
  Tensor a = ddim_step(zt, eps, 500, 250, s, 1.0, &r1);
  Tensor b = ddim_step(zt, eps, 500, 250, s, 1.0, &r2);
  EXPECT_FALSE(bit_identical(a.values(), b.values()));
  // eta=1 at t_prev=-1 degenerates to the deterministic clean estimate
  Rng r3(12);
  Tensor c = ddim_step(zt, eps, 500, -1, s, 1.0, &r3);
  Tensor d = ddim_step(zt, eps, 500, -1, s, 0.0, nullptr);
  EXPECT_TRUE(bit_identical(c.values(), d.values()));
}

TEST(DdimStep, ArgumentValidation) {
  NoiseSchedule s = make_schedule(100, 1e-3, 2e-2);
  Rng rng(13);
  Tensor z = Tensor::randn({2}, rng);
  EXPECT_THROW(ddim_step(z, z, 50, 50, s, 0.0, nullptr), std::runtime_error);
  EXPECT_THROW(ddim_step(z, z, 50, -2, s, 0.0, nullptr), std::runtime_error);
  EXPECT_THROW(ddim_step(z, z, 50, 10, s, 1.5, nullptr), std::runtime_error);
}

TEST(DdimTimesteps, UniformCoverageWithEndpoints) {
  std::vector<int> ts = ddim_timesteps(1000, 25);
  ASSERT_EQ(ts.size(), 25u);
  EXPECT_EQ(ts.front(), 999);
  EXPECT_EQ(ts.back(), 0);
  for (size_t i = 1; i < ts.size(); ++i) {
    int gap = ts[i - 1] - ts[i];
    EXPECT_GE(gap, 41);
    EXPECT_LE(gap, 42);
  }
  // S == T touches every step
  std::vector<int> all = ddim_timesteps(10, 10);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(all[static_cast<size_t>(i)], 9 - i);
  EXPECT_EQ(ddim_timesteps(1000, 1), (std::vector<int>{999}));
}

TEST(SampleLatent, ZeroEpsModelClosedForm) {
  // with eps_hat = 0 each DDIM step only rescales, so a single-step chain
  // returns z_T / sqrt(alpha_bar_{T-1})
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  SamplerConfig cfg;
  cfg.num_steps = 1;
  cfg.num_latent_samples = 1;
  EpsModel zero_model = [](const Tensor& z, const std::vector<int>&,
                           const std::vector<ConditioningVector>&) {
    return Tensor::zeros(z.shape());
  };
  Rng rng(21);
  Tensor out = sample_latent(zero_model, ConditioningVector{}, s, cfg, rng, {2, 2, 2});
  Rng replay(21);
  Tensor zT = Tensor::randn({1, 2, 2, 2}, replay);
  double inv = 1.0 / std::sqrt(s.alpha_bars.back());
  for (int64_t i = 0; i < out.numel(); ++i)
    EXPECT_NEAR(out.values()[static_cast<size_t>(i)],
                zT.values()[static_cast<size_t>(i)] * inv, 1e-10);
}

TEST(SampleLatent, BatchesChainsAndCountsModelCalls) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  SamplerConfig cfg;  // 25 steps, 10 chains
  int calls = 0;
  int64_t batch_seen = 0;
  EpsModel counting = [&calls, &batch_seen](const Tensor& z, const std::vector<int>& t,
                                            const std::vector<ConditioningVector>& c) {
    ++calls;
    batch_seen = z.size(0);
    EXPECT_EQ(t.size(), c.size());
    return Tensor::zeros(z.shape());
  };
  Rng rng(22);
  Tensor out = sample_latent(counting, ConditioningVector{}, s, cfg, rng, {4, 8, 8});
  EXPECT_EQ(calls, 25);
  EXPECT_EQ(batch_seen, 10);
  EXPECT_EQ(out.shape(), (Shape{4, 8, 8}));
}

TEST(SampleLatent, SeedReproducible) {
  NoiseSchedule s = make_schedule(200, 1e-4, 2e-2);
  SamplerConfig cfg;
  cfg.num_steps = 5;
  cfg.num_latent_samples = 3;
  EpsModel model = [](const Tensor& z, const std::vector<int>& t,
                      const std::vector<ConditioningVector>&) {
    return scale(z, 0.1 / (1.0 + t[0]));
  };
  Rng r1(33), r2(33), r3(34);
  Tensor a = sample_latent(model, ConditioningVector{}, s, cfg, r1, {2, 2});
  Tensor b = sample_latent(model, ConditioningVector{}, s, cfg, r2, {2, 2});
  Tensor c = sample_latent(model, ConditioningVector{}, s, cfg, r3, {2, 2});
  EXPECT_TRUE(bit_identical(a.values(), b.values()));
  EXPECT_FALSE(bit_identical(a.values(), c.values()));
}

TEST(ForwardMarginal, MonteCarloMeanAndVariance) {
  // z_t = sqrt(abar) z0 + sqrt(1-abar) eps with z0 fixed: mean sqrt(abar) z0,
  // variance 1-abar. Sampled via q_sample to exercise the real op.
  NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  int t = 500;
  double z0v = 0.7;
  int n = 20000;
  Rng rng(44);
  Tensor z0 = Tensor::full({n}, z0v);
  Tensor eps = Tensor::randn({n}, rng);
  Tensor zt = q_sample(z0, t, eps, s);
  double mean = 0.0;
  for (double v : zt.values()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : zt.values()) var += (v - mean) * (v - mean);
  var /= n - 1;
  double ab = s.alpha_bars[static_cast<size_t>(t)];
  double expect_mean = std::sqrt(ab) * z0v;
  double expect_var = 1.0 - ab;
  double mc_sigma = std::sqrt(expect_var / n);
  EXPECT_NEAR(mean, expect_mean, 4.0 * mc_sigma);
  EXPECT_NEAR(var, expect_var, 0.05 * expect_var);
}
