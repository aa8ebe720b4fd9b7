#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "climb/gradcheck.hpp"
#include "climb/schedule.hpp"
#include "climb/unet.hpp"
#include "test_util.hpp"

namespace climb {
namespace {

using testutil::bit_identical;
using testutil::expect_all_near;

UNetConfig tiny_config() {
  UNetConfig cfg;
  cfg.latent_channels = 2;
  cfg.base_width = 4;
  cfg.level_mults = {1, 2};
  cfg.blocks_per_level = 1;
  cfg.ssm_state_size = 3;
  cfg.conv1d_width = 3;
  cfg.token_width = 6;
  cfg.time_embed_width = 6;
  cfg.groups = 2;
  return cfg;
}

ConditioningVector sample_cond(Rng& rng, int disease = 0) {
  ConditioningVector c;
  c.projected_age = rng.normal();
  c.acquisition_age = rng.normal();
  c.sex = rng.uniform_int(0, 1) ? 1.0 : 0.0;
  c.genetic_flag = rng.uniform_int(0, 1) ? 1.0 : 0.0;
  c.disease_onehot = {0.0, 0.0, 0.0};
  c.disease_onehot[static_cast<size_t>(disease)] = 1.0;
  for (auto& v : c.volumes) v = rng.normal();
  return c;
}

// The noise head, attention value paths and mixer output projections are
// zero-initialized, which would stall gradients at exactly zero; give them
// small random values so a gradient check exercises every parameter.
using climb::testutil::unfreeze_zero_paths;

DiffusionDataset tiny_dataset(const UNetConfig& cfg, int n, Rng& rng, bool with_baseline) {
  DiffusionDataset data;
  if (with_baseline) {
    // longitudinal pairs are strongly correlated, which is what makes the
    // baseline pathway informative; mirror that here
    data.baseline_latents = Tensor::randn({n, cfg.latent_channels, 4, 4}, rng);
    Tensor delta = Tensor::randn({n, cfg.latent_channels, 4, 4}, rng);
    data.follow_latents = data.baseline_latents + scale(delta, 0.25);
  } else {
    data.follow_latents = Tensor::randn({n, cfg.latent_channels, 4, 4}, rng);
  }
  for (int i = 0; i < n; ++i)
    data.conds.push_back(sample_cond(rng, static_cast<int>(rng.uniform_int(0, 2))));
  return data;
}

TEST(CondTokens, OneTokenPerFieldPlusTimestep) {
  Rng rng(3);
  CondEmbed embed = make_cond_embed(6, rng);
  std::vector<ConditioningVector> conds = {sample_cond(rng, 1), sample_cond(rng, 2)};
  Tensor tok = cond_tokens(embed, conds, {5, 17});
  ASSERT_EQ(tok.dim(), 3);
  EXPECT_EQ(tok.size(0), 2);
  EXPECT_EQ(tok.size(1), kCondTokens);
  EXPECT_EQ(tok.size(1), ConditioningVector::kFieldCount + 1);
  EXPECT_EQ(tok.size(2), 6);
}

TEST(CondTokens, DeterministicAndSensitiveToEveryField) {
  Rng rng(4);
  CondEmbed embed = make_cond_embed(5, rng);
  ConditioningVector c = sample_cond(rng);
  Tensor a = cond_tokens(embed, {c}, {10});
  Tensor b = cond_tokens(embed, {c}, {10});
  EXPECT_TRUE(bit_identical(a, b));

  Tensor other_t = cond_tokens(embed, {c}, {11});
  EXPECT_FALSE(bit_identical(a, other_t));

  ConditioningVector c2 = c;
  c2.projected_age += 1.0;
  EXPECT_FALSE(bit_identical(a, cond_tokens(embed, {c2}, {10})));
  ConditioningVector c3 = c;
  c3.disease_onehot = {0.0, 0.0, 1.0};
  EXPECT_FALSE(bit_identical(a, cond_tokens(embed, {c3}, {10})));
  ConditioningVector c4 = c;
  c4.volumes[3] += 0.5;
  EXPECT_FALSE(bit_identical(a, cond_tokens(embed, {c4}, {10})));
}

TEST(CondTokens, BatchMismatchThrows) {
  Rng rng(5);
  CondEmbed embed = make_cond_embed(4, rng);
  EXPECT_THROW(cond_tokens(embed, {sample_cond(rng)}, {1, 2}), std::runtime_error);
  EXPECT_THROW(cond_tokens(embed, {}, {}), std::runtime_error);
}

TEST(CondTokens, GradCheckThroughEmbedding) {
  Rng rng(6);
  CondEmbed embed = make_cond_embed(4, rng);
  std::vector<ConditioningVector> conds = {sample_cond(rng), sample_cond(rng, 1)};
  NamedTensors ps;
  collect_params(embed, ps, "cond");
  std::vector<Tensor> inputs;
  for (auto& [name, t] : ps.items) inputs.push_back(t);
  auto fn = [&](const std::vector<Tensor>&) {
    return mean_all(square(cond_tokens(embed, conds, {3, 40})));
  };
  GradCheckResult r = grad_check_all(fn, inputs, 1e-5, 8);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst_coord;
}

TEST(CrossAttention, ZeroValueProjectionIsExactPassthrough) {
  Rng rng(7);
  CrossAttention ca = make_cross_attention(5, 3, rng, /*zero_v=*/true);
  Tensor seq = Tensor::randn({2, 9, 5}, rng);
  Tensor tokens = Tensor::randn({2, 4, 3}, rng);
  Tensor out = cross_attention_forward(seq, tokens, ca);
  EXPECT_TRUE(bit_identical(out, seq));
}

TEST(CrossAttention, SingleTokenReceivesFullAttentionWeight) {
  Rng rng(8);
  CrossAttention ca = make_cross_attention(4, 3, rng, /*zero_v=*/false);
  Tensor seq = Tensor::randn({2, 6, 4}, rng);
  Tensor tokens = Tensor::randn({2, 1, 3}, rng);
  Tensor out = cross_attention_forward(seq, tokens, ca);
  // with one token the softmax weight is exactly 1, so the context for every
  // position is o(v(token))
  Tensor expected = seq + ca.o.forward(ca.v.forward(tokens));
  EXPECT_TRUE(bit_identical(out, expected));
}

TEST(CrossAttention, TokenPermutationInvariance) {
  Rng rng(9);
  CrossAttention ca = make_cross_attention(4, 4, rng, /*zero_v=*/false);
  Tensor seq = Tensor::randn({1, 5, 4}, rng);
  Tensor tokens = Tensor::randn({1, 4, 4}, rng);
  std::vector<int64_t> perm = {2, 0, 3, 1};
  std::vector<double> shuffled(tokens.numel());
  for (int64_t s = 0; s < 4; ++s)
    for (int64_t d = 0; d < 4; ++d)
      shuffled[static_cast<size_t>(s * 4 + d)] =
          tokens.values()[static_cast<size_t>(perm[static_cast<size_t>(s)] * 4 + d)];
  Tensor tokens_perm = Tensor::from_values({1, 4, 4}, std::move(shuffled));
  Tensor a = cross_attention_forward(seq, tokens, ca);
  Tensor b = cross_attention_forward(seq, tokens_perm, ca);
  expect_all_near(a, b, 1e-12);
}

TEST(CrossAttention, WidthMismatchThrows) {
  Rng rng(10);
  CrossAttention ca = make_cross_attention(4, 3, rng);
  Tensor seq = Tensor::randn({1, 5, 4}, rng);
  EXPECT_THROW(cross_attention_forward(seq, Tensor::randn({1, 2, 4}, rng), ca),
               std::runtime_error);
  EXPECT_THROW(cross_attention_forward(Tensor::randn({1, 5, 3}, rng),
                                       Tensor::randn({1, 2, 3}, rng), ca),
               std::runtime_error);
  EXPECT_THROW(cross_attention_forward(seq, Tensor::randn({2, 2, 3}, rng), ca),
               std::runtime_error);
}

TEST(CrossAttention, GradCheckAllProjections) {
  Rng rng(11);
  CrossAttention ca = make_cross_attention(3, 4, rng, /*zero_v=*/false);
  Tensor seq = Tensor::randn({2, 4, 3}, rng, 1.0, true);
  Tensor tokens = Tensor::randn({2, 3, 4}, rng, 1.0, true);
  std::vector<Tensor> inputs = {seq,    tokens, ca.q.w, ca.q.b, ca.k.w,
                                ca.k.b, ca.v.w, ca.v.b, ca.o.w, ca.o.b};
  auto fn = [&](const std::vector<Tensor>&) {
    return mean_all(square(cross_attention_forward(seq, tokens, ca)));
  };
  GradCheckResult r = grad_check_all(fn, inputs, 1e-5, 6);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst_coord;
}

TEST(ResBlock, ShapeAndTimeShiftSensitivity) {
  Rng rng(12);
  UNetResBlock block = make_unet_res_block(4, 6, 2, 5, rng);
  Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
  Tensor e1 = Tensor::randn({2, 5}, rng);
  Tensor e2 = Tensor::randn({2, 5}, rng);
  Tensor y1 = unet_res_block_forward(x, e1, block);
  ASSERT_EQ(y1.shape(), (Shape{2, 6, 3, 3}));
  Tensor y2 = unet_res_block_forward(x, e2, block);
  EXPECT_FALSE(bit_identical(y1, y2));
  EXPECT_TRUE(bit_identical(y1, unet_res_block_forward(x, e1, block)));
}

TEST(ResBlock, GradCheck) {
  Rng rng(13);
  UNetResBlock block = make_unet_res_block(2, 4, 2, 3, rng);
  Tensor x = Tensor::randn({1, 2, 3, 3}, rng, 1.0, true);
  Tensor e = Tensor::randn({1, 3}, rng, 1.0, true);
  NamedTensors ps;
  collect_params(block, ps, "rb");
  std::vector<Tensor> inputs = {x, e};
  for (auto& [name, t] : ps.items) inputs.push_back(t);
  auto fn = [&](const std::vector<Tensor>&) {
    return mean_all(square(unet_res_block_forward(x, e, block)));
  };
  GradCheckResult r = grad_check_all(fn, inputs, 1e-5, 5);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst_coord;
}

TEST(UNetForward, ShapeContractAndDeterminism) {
  Rng rng(14);
  UNet net = make_unet(tiny_config(), rng);
  Tensor z = Tensor::randn({3, 2, 4, 4}, rng);
  std::vector<int> t = {0, 7, 49};
  std::vector<ConditioningVector> conds = {sample_cond(rng), sample_cond(rng, 1),
                                           sample_cond(rng, 2)};
  Tensor tokens = cond_tokens(net.cond, conds, t);
  Tensor eps1 = unet_forward(net, z, t, tokens);
  ASSERT_EQ(eps1.shape(), z.shape());
  Tensor eps2 = unet_forward(net, z, t, tokens);
  EXPECT_TRUE(bit_identical(eps1, eps2));
}

TEST(UNetForward, ValidatesArguments) {
  Rng rng(15);
  UNet net = make_unet(tiny_config(), rng);
  Tensor z = Tensor::randn({2, 2, 4, 4}, rng);
  std::vector<ConditioningVector> conds = {sample_cond(rng), sample_cond(rng)};
  Tensor tokens = cond_tokens(net.cond, conds, {1, 2});
  EXPECT_THROW(unet_forward(net, z, {1}, tokens), std::runtime_error);
  EXPECT_THROW(unet_forward(net, Tensor::randn({2, 3, 4, 4}, rng), {1, 2}, tokens),
               std::runtime_error);
  EXPECT_THROW(unet_forward(net, Tensor::randn({2, 2, 5, 5}, rng), {1, 2}, tokens),
               std::runtime_error);
  // control branch and baseline latent must come together
  ControlBranch ctl = build_control_branch(net);
  Tensor base = Tensor::randn({2, 2, 4, 4}, rng);
  EXPECT_THROW(unet_forward(net, z, {1, 2}, tokens, &ctl, nullptr), std::runtime_error);
  EXPECT_THROW(unet_forward(net, z, {1, 2}, tokens, nullptr, &base), std::runtime_error);
  Tensor bad_base = Tensor::randn({2, 2, 8, 8}, rng);
  EXPECT_THROW(unet_forward(net, z, {1, 2}, tokens, &ctl, &bad_base), std::runtime_error);
}

TEST(UNetForward, RejectsSingleLevelConfig) {
  Rng rng(16);
  UNetConfig cfg = tiny_config();
  cfg.level_mults = {1};
  EXPECT_THROW(make_unet(cfg, rng), std::runtime_error);
}

TEST(UNetForward, GradCheckTwoLevelToyConfig) {
  Rng rng(17);
  UNet net = make_unet(tiny_config(), rng);
  NamedTensors ps;
  collect_params(net, ps, "unet");
  unfreeze_zero_paths(ps, rng);
  Tensor z = Tensor::randn({1, 2, 4, 4}, rng, 1.0, true);
  std::vector<int> t = {13};
  std::vector<ConditioningVector> conds = {sample_cond(rng, 1)};
  Tensor target = Tensor::randn({1, 2, 4, 4}, rng);
  std::vector<Tensor> inputs = {z};
  for (auto& [name, t2] : ps.items) inputs.push_back(t2);
  auto fn = [&](const std::vector<Tensor>&) {
    Tensor tokens = cond_tokens(net.cond, conds, t);
    return eps_loss(target, unet_forward(net, z, t, tokens));
  };
  GradCheckResult r = grad_check_all(fn, inputs, 1e-5, 2);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst_coord;
}

TEST(ControlBranch, FreshControlIsExactIdentity) {
  Rng rng(18);
  UNet net = make_unet(tiny_config(), rng);
  ControlBranch ctl = build_control_branch(net);
  Tensor z = Tensor::randn({2, 2, 4, 4}, rng);
  Tensor base = Tensor::randn({2, 2, 4, 4}, rng);
  std::vector<int> t = {3, 30};
  std::vector<ConditioningVector> conds = {sample_cond(rng), sample_cond(rng, 2)};
  Tensor tokens = cond_tokens(net.cond, conds, t);
  Tensor with = unet_forward(net, z, t, tokens, &ctl, &base);
  Tensor without = unet_forward(net, z, t, tokens);
  ASSERT_EQ(with.numel(), without.numel());
  for (int64_t i = 0; i < with.numel(); ++i)
    EXPECT_DOUBLE_EQ(with.values()[static_cast<size_t>(i)],
                     without.values()[static_cast<size_t>(i)])
        << "coord " << i;
}

TEST(ControlBranch, FrozenSnapshotMatchesSourceBitExact) {
  Rng rng(19);
  UNet net = make_unet(tiny_config(), rng);
  ControlBranch ctl = build_control_branch(net);
  NamedTensors live = encoder_mid_params(net);
  ASSERT_EQ(live.size(), ctl.frozen.size());
  for (size_t i = 0; i < live.items.size(); ++i) {
    EXPECT_EQ(live.items[i].first, ctl.frozen.items[i].first);
    EXPECT_TRUE(bit_identical(live.items[i].second, ctl.frozen.items[i].second));
  }
  EXPECT_EQ(tensors_fingerprint(live), ctl.frozen_fingerprint);
  EXPECT_EQ(unet_fingerprint(net), ctl.stage1_fingerprint);
}

TEST(ControlBranch, TrainableSetExcludesFrozenTensors) {
  Rng rng(20);
  UNet net = make_unet(tiny_config(), rng);
  ControlBranch ctl = build_control_branch(net);
  NamedTensors trainable = control_trainable_params(ctl);
  NamedTensors frozen = encoder_mid_params(net);
  EXPECT_GT(trainable.size(), 0u);
  for (auto& [tn, tt] : trainable.items)
    for (auto& [fn_, ft] : frozen.items)
      EXPECT_NE(tt.node(), ft.node()) << tn << " aliases " << fn_;
  // every zero projection starts exactly zero
  for (auto& [name, t] : trainable.items) {
    if (name.find("zero_") == std::string::npos) continue;
    for (double v : t.values()) EXPECT_EQ(v, 0.0) << name;
  }
}

TEST(ControlBranch, DistinctBaselinesGiveDistinctSignals) {
  Rng rng(21);
  UNet net = make_unet(tiny_config(), rng);
  // a fresh net's zero noise head would mask the control signal entirely
  NamedTensors net_ps;
  collect_params(net, net_ps, "unet");
  unfreeze_zero_paths(net_ps, rng);
  ControlBranch ctl = build_control_branch(net);
  // open the zero projections so the duplicate trunk's signal reaches the output
  NamedTensors trainable = control_trainable_params(ctl);
  unfreeze_zero_paths(trainable, rng, 0.5);
  Tensor z = Tensor::randn({1, 2, 4, 4}, rng);
  Tensor base_a = Tensor::randn({1, 2, 4, 4}, rng);
  Tensor base_b = Tensor::randn({1, 2, 4, 4}, rng);
  std::vector<int> t = {5};
  std::vector<ConditioningVector> conds = {sample_cond(rng)};
  Tensor tokens = cond_tokens(net.cond, conds, t);
  Tensor ya = unet_forward(net, z, t, tokens, &ctl, &base_a);
  Tensor yb = unet_forward(net, z, t, tokens, &ctl, &base_b);
  EXPECT_FALSE(bit_identical(ya, yb));
  EXPECT_TRUE(bit_identical(ya, unet_forward(net, z, t, tokens, &ctl, &base_a)));
}

TEST(ControlBranch, GradCheckThroughControlPath) {
  Rng rng(22);
  UNet net = make_unet(tiny_config(), rng);
  NamedTensors net_ps;
  collect_params(net, net_ps, "unet");
  unfreeze_zero_paths(net_ps, rng);
  ControlBranch ctl = build_control_branch(net);
  NamedTensors ctl_ps = control_trainable_params(ctl);
  unfreeze_zero_paths(ctl_ps, rng, 0.3);
  Tensor z = Tensor::randn({1, 2, 4, 4}, rng);
  Tensor base = Tensor::randn({1, 2, 4, 4}, rng);
  std::vector<int> t = {9};
  std::vector<ConditioningVector> conds = {sample_cond(rng, 2)};
  Tensor target = Tensor::randn({1, 2, 4, 4}, rng);
  std::vector<Tensor> inputs;
  for (auto& [name, t2] : ctl_ps.items) inputs.push_back(t2);
  auto fn = [&](const std::vector<Tensor>&) {
    Tensor tokens = cond_tokens(net.cond, conds, t);
    return eps_loss(target, unet_forward(net, z, t, tokens, &ctl, &base));
  };
  GradCheckResult r = grad_check_all(fn, inputs, 1e-5, 2);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst_coord;
}

TEST(EncodeBaseline, FrozenDeterministicAndShaped) {
  Rng rng(23);
  GateConfig gc;
  gc.image_size = 8;
  gc.latent_channels = 2;
  gc.base_width = 6;
  gc.groups = 2;
  GateModel gate = make_gate_model(gc, rng);
  Tensor x = Tensor::rand_uniform({3, 1, 8, 8}, rng, 0.0, 1.0);
  Tensor z1 = encode_baseline(x, gate);
  ASSERT_EQ(z1.shape(), (Shape{3, 2, 2, 2}));
  EXPECT_FALSE(z1.requires_grad());
  EXPECT_FALSE(z1.has_grad());
  Tensor z2 = encode_baseline(x, gate);
  EXPECT_TRUE(bit_identical(z1, z2));
  Tensor other = encode_baseline(Tensor::rand_uniform({3, 1, 8, 8}, rng, 0.0, 1.0), gate);
  EXPECT_FALSE(bit_identical(z1, other));
}

TEST(TrainDiffusion, Stage2StepZeroLossMatchesStage1) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(100);
  DiffusionDataset data = tiny_dataset(cfg, 12, data_rng, true);

  Rng r1(7);
  UNet net1 = make_unet(cfg, r1);
  DiffusionTrainConfig tc;
  tc.stage = 1;
  tc.iters = 1;
  tc.seed = 99;
  tc.checkpoint_every = 0;
  DiffusionTrainResult h1 = train_diffusion(data, net1, nullptr, sched, tc);

  Rng r2(7);
  UNet net2 = make_unet(cfg, r2);
  ControlBranch ctl = build_control_branch(net2);
  tc.stage = 2;
  DiffusionTrainResult h2 = train_diffusion(data, net2, &ctl, sched, tc);

  ASSERT_EQ(h1.history.size(), 1u);
  ASSERT_EQ(h2.history.size(), 1u);
  EXPECT_DOUBLE_EQ(h1.history[0].loss, h2.history[0].loss);
}

TEST(TrainDiffusion, Stage2TouchesOnlyControlParameters) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(101);
  DiffusionDataset data = tiny_dataset(cfg, 10, data_rng, true);
  Rng r(8);
  UNet net = make_unet(cfg, r);
  // the zero noise head of an untrained net would block every upstream
  // gradient; stage 2 always starts from a trained stage-1 net
  NamedTensors net_ps;
  collect_params(net, net_ps, "unet");
  unfreeze_zero_paths(net_ps, r);
  ControlBranch ctl = build_control_branch(net);
  uint64_t net_before = unet_fingerprint(net);
  NamedTensors ctl_ps = control_trainable_params(ctl);
  uint64_t ctl_before = tensors_fingerprint(ctl_ps);

  DiffusionTrainConfig tc;
  tc.stage = 2;
  tc.iters = 4;
  tc.seed = 5;
  tc.checkpoint_every = 0;
  train_diffusion(data, net, &ctl, sched, tc);

  EXPECT_EQ(unet_fingerprint(net), net_before);
  EXPECT_EQ(tensors_fingerprint(encoder_mid_params(net)), ctl.frozen_fingerprint);
  EXPECT_NE(tensors_fingerprint(ctl_ps), ctl_before);
}

TEST(TrainDiffusion, SameSeedReproducesHistoryBitExact) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(102);
  DiffusionDataset data = tiny_dataset(cfg, 10, data_rng, false);
  DiffusionTrainConfig tc;
  tc.stage = 1;
  tc.iters = 12;
  tc.seed = 3;
  tc.checkpoint_every = 0;

  Rng ra(9);
  UNet na = make_unet(cfg, ra);
  DiffusionTrainResult ha = train_diffusion(data, na, nullptr, sched, tc);
  Rng rb(9);
  UNet nb = make_unet(cfg, rb);
  DiffusionTrainResult hb = train_diffusion(data, nb, nullptr, sched, tc);
  ASSERT_EQ(ha.history.size(), hb.history.size());
  for (size_t i = 0; i < ha.history.size(); ++i) {
    EXPECT_EQ(ha.history[i].loss, hb.history[i].loss) << "iter " << i;
  }
}

TEST(TrainDiffusion, SmoothedLossDecreasesOverFirstSteps) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(103);
  DiffusionDataset data = tiny_dataset(cfg, 24, data_rng, false);
  Rng r(10);
  UNet net = make_unet(cfg, r);
  DiffusionTrainConfig tc;
  tc.stage = 1;
  tc.iters = 300;
  tc.batch = 4;
  tc.lr = 1e-3;
  tc.seed = 11;
  tc.checkpoint_every = 0;
  DiffusionTrainResult h = train_diffusion(data, net, nullptr, sched, tc);
  auto window_mean = [&](size_t lo, size_t hi) {
    double s = 0.0;
    for (size_t i = lo; i < hi; ++i) s += h.history[i].loss;
    return s / static_cast<double>(hi - lo);
  };
  EXPECT_LT(window_mean(250, 300), window_mean(0, 50));
}

TEST(TrainDiffusion, Stage2LossDecreasesThroughControlOnly) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(104);
  DiffusionDataset data = tiny_dataset(cfg, 16, data_rng, true);
  Rng r(12);
  UNet net = make_unet(cfg, r);
  // realistic setup: stage 2 starts from a (briefly) stage-1-trained net
  DiffusionTrainConfig pre;
  pre.stage = 1;
  pre.iters = 30;
  pre.batch = 4;
  pre.lr = 1e-3;
  pre.seed = 21;
  pre.checkpoint_every = 0;
  train_diffusion(data, net, nullptr, sched, pre);
  ControlBranch ctl = build_control_branch(net);

  // fixed deterministic evaluation batch isolates the control branch's
  // contribution from batch-composition noise
  Rng eval_rng(555);
  int64_t n = data.follow_latents.size(0);
  std::vector<int> eval_t(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    eval_t[static_cast<size_t>(i)] = static_cast<int>((7 * i + 3) % sched.T());
  Tensor eval_eps = Tensor::randn(data.follow_latents.shape(), eval_rng);
  Tensor eval_zt = q_sample_per_sample(data.follow_latents, eval_t, eval_eps, sched);
  auto eval_loss = [&]() {
    NoGradScope ng;
    Tensor tokens = cond_tokens(net.cond, data.conds, eval_t);
    Tensor eps_hat =
        unet_forward(net, eval_zt, eval_t, tokens, &ctl, &data.baseline_latents);
    return eps_loss(eval_eps, eps_hat).item();
  };

  double before = eval_loss();
  DiffusionTrainConfig tc;
  tc.stage = 2;
  tc.iters = 200;
  tc.batch = 4;
  tc.lr = 3e-3;
  tc.seed = 13;
  tc.checkpoint_every = 0;
  train_diffusion(data, net, &ctl, sched, tc);
  double after = eval_loss();
  EXPECT_LT(after, before);
}

TEST(TrainDiffusion, ValidatesStageAndData) {
  UNetConfig cfg = tiny_config();
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(105);
  DiffusionDataset data = tiny_dataset(cfg, 4, data_rng, false);
  Rng r(14);
  UNet net = make_unet(cfg, r);
  DiffusionTrainConfig tc;
  tc.iters = 1;
  tc.stage = 3;
  EXPECT_THROW(train_diffusion(data, net, nullptr, sched, tc), std::runtime_error);
  tc.stage = 2;  // no control branch, no baseline latents
  EXPECT_THROW(train_diffusion(data, net, nullptr, sched, tc), std::runtime_error);
  ControlBranch ctl = build_control_branch(net);
  EXPECT_THROW(train_diffusion(data, net, &ctl, sched, tc), std::runtime_error);
  tc.stage = 1;
  data.conds.pop_back();
  EXPECT_THROW(train_diffusion(data, net, nullptr, sched, tc), std::runtime_error);
}

TEST(Sampling, ConditioningAgeShiftChangesSampledLatent) {
  UNetConfig cfg = tiny_config();
  Rng r(15);
  UNet net = make_unet(cfg, r);
  NamedTensors ps;
  collect_params(net, ps, "unet");
  unfreeze_zero_paths(ps, r);  // untrained zero head would ignore conditioning
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  SamplerConfig sc;
  sc.num_steps = 5;
  sc.num_latent_samples = 2;
  EpsModel model = [&](const Tensor& z_t, const std::vector<int>& t,
                       const std::vector<ConditioningVector>& cond) {
    Tensor tokens = cond_tokens(net.cond, cond, t);
    return unet_forward(net, z_t, t, tokens);
  };
  Rng cr(16);
  ConditioningVector cond = sample_cond(cr, 1);
  ConditioningVector cond_older = cond;
  cond_older.projected_age += 1.0;  // ten toy-years in z-scored units

  Rng s1(77), s2(77), s3(77);
  Tensor a = sample_latent(model, cond, sched, sc, s1, {2, 4, 4});
  Tensor a_again = sample_latent(model, cond, sched, sc, s2, {2, 4, 4});
  Tensor b = sample_latent(model, cond_older, sched, sc, s3, {2, 4, 4});
  EXPECT_TRUE(bit_identical(a, a_again));
  double l2 = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.values()[static_cast<size_t>(i)] - b.values()[static_cast<size_t>(i)];
    l2 += d * d;
  }
  EXPECT_GT(std::sqrt(l2), 1e-8);
}

}  // namespace
}  // namespace climb
