#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "climb/metrics.hpp"
#include "climb/phantom.hpp"
#include "test_util.hpp"

using namespace climb;

namespace {

Tensor random_image(Rng& rng, int64_t h, int64_t w) {
  Tensor x = Tensor::zeros({1, h, w});
  for (double& v : x.values()) v = rng.uniform();
  return x;
}

Tensor noisy_clamped(const Tensor& x, Rng& rng, double sigma) {
  Tensor y = x.clone();
  for (double& v : y.values())
    v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return y;
}

std::vector<double> ranks_of(const std::vector<double>& xs) {
  std::vector<int> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return xs[i] < xs[j]; });
  std::vector<double> r(xs.size());
  for (size_t k = 0; k < order.size(); ++k) r[order[k]] = static_cast<double>(k);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> ra = ranks_of(a), rb = ranks_of(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

}  // namespace

TEST(Mse, HandValuesAndValidation) {
  Tensor a = Tensor::from_values({2}, {0.0, 0.5});
  Tensor b = Tensor::from_values({2}, {0.5, 0.5});
  EXPECT_DOUBLE_EQ(mse(a, b), 0.125);
  EXPECT_DOUBLE_EQ(mse(a, a), 0.0);
  Tensor z = Tensor::zeros({1, 4, 4});
  Tensor o = Tensor::ones({1, 4, 4});
  EXPECT_DOUBLE_EQ(mse(z, o), 1.0);
  EXPECT_THROW(mse(z, Tensor::zeros({1, 4, 5})), std::runtime_error);
}

TEST(Psnr, FormulaSentinelAndPeakShift) {
  Tensor a = Tensor::zeros({1, 10, 10});
  Tensor b = Tensor::full({1, 10, 10}, 0.1);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);  // mse exactly 0.01
  Tensor o = Tensor::ones({1, 10, 10});
  EXPECT_DOUBLE_EQ(psnr(a, o), 0.0);  // mse exactly 1
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_GT(psnr(a, a), 0.0);
  // Doubling the peak adds 20*log10(2) ~ 6.02 dB.
  EXPECT_NEAR(psnr(a, b, 2.0) - psnr(a, b, 1.0), 20.0 * std::log10(2.0), 1e-12);
  EXPECT_THROW(psnr_from_mse(-1.0), std::runtime_error);
}

TEST(Ssim, SelfSimilarityIsExactlyOne) {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor x = random_image(rng, 16, 16);
    EXPECT_EQ(ssim(x, x), 1.0);
  }
}

TEST(Ssim, ConstantImageClosedForm) {
  Tensor z = Tensor::zeros({1, 12, 12});
  Tensor o = Tensor::ones({1, 12, 12});
  double expected = kSsimC1 / (1.0 + kSsimC1);
  EXPECT_NEAR(ssim(z, o), expected, 1e-9);
}

TEST(Ssim, SymmetricAndBounded) {
  Rng rng(12);
  for (int rep = 0; rep < 8; ++rep) {
    Tensor a = random_image(rng, 14, 14);
    Tensor b = random_image(rng, 14, 14);
    double sab = ssim(a, b);
    double sba = ssim(b, a);
    EXPECT_NEAR(sab, sba, 1e-12);
    EXPECT_LE(std::abs(sab), 1.0 + 1e-9);
  }
}

TEST(Ssim, DegradesMonotonicallyWithNoise) {
  Rng rng(13);
  std::vector<ToySubject> cohort = generate_cohort(1, rng);
  Tensor x = render_phantom(cohort[0], cohort[0].baseline_age).image;
  double prev = 1.0;
  for (double sigma : {0.02, 0.05, 0.1}) {
    Rng noise_rng(99);  // same noise pattern, scaled
    double s = ssim(x, noisy_clamped(x, noise_rng, sigma));
    EXPECT_LT(s, prev);
    prev = s;
  }
  EXPECT_LT(prev, 1.0);
}

TEST(Ssim, WindowMustFit) {
  Tensor small = Tensor::zeros({1, 6, 6});
  EXPECT_THROW(ssim(small, small), std::runtime_error);
  Tensor exact = Tensor::full({1, 7, 7}, 0.3);
  EXPECT_EQ(ssim(exact, exact), 1.0);  // single valid placement
}

TEST(Ssim, BatchAndChannelPlanesAverage) {
  Rng rng(14);
  Tensor a0 = random_image(rng, 9, 9);
  Tensor a1 = random_image(rng, 9, 9);
  Tensor b0 = random_image(rng, 9, 9);
  Tensor b1 = random_image(rng, 9, 9);
  Tensor a = concat({reshape(a0, {1, 1, 9, 9}), reshape(a1, {1, 1, 9, 9})}, 0);
  Tensor b = concat({reshape(b0, {1, 1, 9, 9}), reshape(b1, {1, 1, 9, 9})}, 0);
  double stacked = ssim(a, b);
  double avg = 0.5 * (ssim(a0, b0) + ssim(a1, b1));
  EXPECT_NEAR(stacked, avg, 1e-12);
}

TEST(Rpd, IdentityZeroNonnegativeAndValidated) {
  Rng rng(15);
  RandomFeatureExtractor phi = make_random_features(777);
  Tensor x = random_image(rng, 16, 16);
  EXPECT_EQ(random_perceptual_distance(x, x, phi), 0.0);
  Tensor y = noisy_clamped(x, rng, 0.1);
  double d = random_perceptual_distance(x, y, phi);
  EXPECT_GT(d, 0.0);
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_THROW(random_perceptual_distance(x, Tensor::zeros({1, 8, 8}), phi),
               std::runtime_error);
}

TEST(Rpd, FrozenWeightsAreSeedDeterministic) {
  Rng rng(16);
  Tensor x = random_image(rng, 12, 12);
  Tensor y = noisy_clamped(x, rng, 0.05);
  RandomFeatureExtractor p1 = make_random_features(42);
  RandomFeatureExtractor p2 = make_random_features(42);
  EXPECT_DOUBLE_EQ(random_perceptual_distance(x, y, p1),
                   random_perceptual_distance(x, y, p2));
  RandomFeatureExtractor p3 = make_random_features(43);
  EXPECT_NE(random_perceptual_distance(x, y, p1),
            random_perceptual_distance(x, y, p3));
}

TEST(Rpd, RankCorrelatesWithMseOnPerturbationSet) {
  Rng rng(17);
  std::vector<ToySubject> cohort = generate_cohort(1, rng);
  Tensor x = render_phantom(cohort[0], cohort[0].baseline_age + 3.0).image;
  RandomFeatureExtractor phi = make_random_features(5);
  std::vector<double> ms, ds;
  for (int i = 0; i < 50; ++i) {
    double sigma = 0.01 + 0.005 * i;
    Tensor y = noisy_clamped(x, rng, sigma);
    ms.push_back(mse(x, y));
    ds.push_back(random_perceptual_distance(x, y, phi));
  }
  EXPECT_GT(spearman(ms, ds), 0.5);
}

TEST(PhantomPairs, SsimFallsBelowOneAndShrinksWithAgeGap) {
  // The copy baseline must be beatable: with >= 5 toy-years of atrophy the
  // baseline image is measurably different from the follow-up, and more gap
  // means less similarity.
  Rng rng(18);
  std::vector<ToySubject> cohort = generate_cohort(6, rng);
  for (const ToySubject& s : cohort) {
    Tensor base = render_phantom(s, s.baseline_age).image;
    double prev = 1.0;
    for (double gap : {5.0, 10.0, 20.0}) {
      double v = ssim(base, render_phantom(s, s.baseline_age + gap).image);
      EXPECT_LT(v, prev) << "gap " << gap;
      prev = v;
    }
    EXPECT_LT(prev, 1.0);
  }
}

TEST(Aggregates, MatchHandRecomputation) {
  std::vector<EvalRecord> rows;
  Rng rng(19);
  for (int i = 0; i < 7; ++i) {
    EvalRecord r;
    r.subject = i;
    r.mse = rng.uniform(0.001, 0.1);
    r.ssim = rng.uniform(0.2, 0.99);
    r.psnr = psnr_from_mse(r.mse);
    r.rpd = rng.uniform(0.0, 1.0);
    r.copy_baseline_ssim = rng.uniform(0.2, 0.99);
    rows.push_back(r);
  }
  EvalAggregates agg = compute_aggregates(rows);
  double mean = 0;
  for (const auto& r : rows) mean += r.ssim;
  mean /= static_cast<double>(rows.size());
  double var = 0;
  for (const auto& r : rows) var += (r.ssim - mean) * (r.ssim - mean);
  var /= static_cast<double>(rows.size());
  EXPECT_DOUBLE_EQ(agg.ssim.mean, mean);
  EXPECT_DOUBLE_EQ(agg.ssim.stddev, std::sqrt(var));
}

TEST(Report, JsonRoundTripIsLossless) {
  EvalReport rep;
  for (int i = 0; i < 3; ++i) {
    EvalRecord r;
    r.subject = 10 + i;
    r.baseline_age = 60.0 + i / 3.0;
    r.target_age = 67.123456789012345 + i;
    r.mse = (i == 0) ? 0.0 : 1.0 / (3.0 * i);
    r.psnr = psnr_from_mse(r.mse);  // row 0 is the infinite sentinel
    r.ssim = 0.1 + 0.3 * i;
    r.rpd = 0.01 * i;
    r.copy_baseline_ssim = 0.9 - 0.01 * i;
    rep.records.push_back(r);
  }
  rep.aggregates = compute_aggregates(rep.records);
  rep.seconds_per_image = 0.123456789;

  std::string path = testing::TempDir() + "/report_roundtrip.json";
  save_report_json(path, rep);
  EvalReport back = load_report_json(path);

  ASSERT_EQ(back.records.size(), rep.records.size());
  for (size_t i = 0; i < rep.records.size(); ++i) {
    const EvalRecord& a = rep.records[i];
    const EvalRecord& b = back.records[i];
    EXPECT_EQ(a.subject, b.subject);
    EXPECT_EQ(a.baseline_age, b.baseline_age);
    EXPECT_EQ(a.target_age, b.target_age);
    EXPECT_EQ(a.mse, b.mse);
    EXPECT_EQ(a.ssim, b.ssim);
    EXPECT_EQ(a.psnr, b.psnr);  // inf == inf holds for the sentinel row
    EXPECT_EQ(a.rpd, b.rpd);
    EXPECT_EQ(a.copy_baseline_ssim, b.copy_baseline_ssim);
  }
  EXPECT_EQ(back.aggregates.ssim.mean, rep.aggregates.ssim.mean);
  EXPECT_EQ(back.aggregates.psnr.mean, rep.aggregates.psnr.mean);
  EXPECT_EQ(back.seconds_per_image, rep.seconds_per_image);
  EXPECT_EQ(back.ssim_window, kSsimWindow);
  EXPECT_EQ(back.ssim_sigma, kSsimSigma);
}

TEST(Report, CsvAndSummaryTableCarryBothMethods) {
  EvalReport rep;
  EvalRecord r;
  r.subject = 1;
  r.mse = 0.01;
  r.psnr = psnr_from_mse(r.mse);
  r.ssim = 0.8;
  r.rpd = 0.2;
  r.copy_baseline_ssim = 0.7;
  rep.records.push_back(r);
  rep.aggregates = compute_aggregates(rep.records);

  std::string path = testing::TempDir() + "/report.csv";
  save_report_csv(path, rep);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header,
            "subject,baseline_age,target_age,mse,ssim,psnr,rpd,copy_baseline_ssim");
  EXPECT_NE(row.find("0.01"), std::string::npos);

  std::string table = summary_table(rep);
  EXPECT_NE(table.find("pipeline"), std::string::npos);
  EXPECT_NE(table.find("copy"), std::string::npos);
  EXPECT_NE(table.find("s/image"), std::string::npos);
}

TEST(EvaluatePipeline, RowsConsistencyAndDeterminism) {
  Rng rng(20);
  std::vector<ToySubject> cohort = generate_cohort(4, rng);
  std::vector<int> idx = {0, 1, 2, 3};
  CovariateStats stats = covariate_stats_from(cohort, idx);
  PairedDataset data = build_pairs(cohort, idx, stats, 0.0);

  Rng grng(21);
  GateConfig gcfg;
  gcfg.image_size = cohort[0].image_size;
  gcfg.latent_channels = 2;
  gcfg.base_width = 8;
  gcfg.groups = 2;
  GateModel gate = make_gate_model(gcfg, grng);

  UNetConfig ucfg;
  ucfg.latent_channels = 2;
  ucfg.base_width = 4;
  ucfg.ssm_state_size = 3;
  ucfg.conv1d_width = 3;
  ucfg.token_width = 6;
  ucfg.time_embed_width = 6;
  ucfg.groups = 2;
  Rng urng(22);
  UNet net = make_unet(ucfg, urng);

  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  SamplerConfig scfg;
  scfg.num_steps = 5;
  scfg.num_latent_samples = 2;
  RandomFeatureExtractor phi = make_random_features(3);

  EvalReport rep = evaluate_pipeline(data, gate, net, nullptr, sched, scfg, phi, 100);
  ASSERT_EQ(rep.records.size(), data.pairs.size());
  ASSERT_GT(rep.records.size(), 0u);

  for (size_t i = 0; i < rep.records.size(); ++i) {
    const EvalRecord& r = rep.records[i];
    EXPECT_EQ(r.subject, data.pairs[i].subject);
    EXPECT_DOUBLE_EQ(r.psnr, psnr_from_mse(r.mse));
    Tensor base = slice(data.baseline_images, 0, static_cast<int64_t>(i), 1);
    Tensor tgt = slice(data.target_images, 0, static_cast<int64_t>(i), 1);
    EXPECT_DOUBLE_EQ(r.copy_baseline_ssim, ssim(base, tgt));
    EXPECT_GE(r.mse, 0.0);
    EXPECT_LE(std::abs(r.ssim), 1.0 + 1e-9);
  }

  EvalAggregates agg = compute_aggregates(rep.records);
  EXPECT_DOUBLE_EQ(rep.aggregates.mse.mean, agg.mse.mean);
  EXPECT_DOUBLE_EQ(rep.aggregates.ssim.stddev, agg.ssim.stddev);

  EvalReport rep2 = evaluate_pipeline(data, gate, net, nullptr, sched, scfg, phi, 100);
  for (size_t i = 0; i < rep.records.size(); ++i) {
    EXPECT_EQ(rep.records[i].mse, rep2.records[i].mse);
    EXPECT_EQ(rep.records[i].ssim, rep2.records[i].ssim);
    EXPECT_EQ(rep.records[i].rpd, rep2.records[i].rpd);
  }

  // The control-branch path runs and, with fresh zero convolutions on an
  // untrained backbone, matches the unconditioned result exactly.
  ControlBranch control = build_control_branch(net);
  EvalReport rep3 =
      evaluate_pipeline(data, gate, net, &control, sched, scfg, phi, 100);
  for (size_t i = 0; i < rep.records.size(); ++i)
    EXPECT_EQ(rep.records[i].mse, rep3.records[i].mse);

  EXPECT_THROW(
      evaluate_pipeline(PairedDataset{}, gate, net, nullptr, sched, scfg, phi, 1),
      std::runtime_error);
}
