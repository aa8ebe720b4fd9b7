#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "climb/conditioning.hpp"
#include "climb/gate.hpp"
#include "climb/nn.hpp"
#include "climb/optim.hpp"
#include "climb/rng.hpp"
#include "climb/schedule.hpp"
#include "climb/ssm.hpp"
#include "climb/tensor.hpp"

namespace climb {

// Sequence mixer used inside each denoiser stage. The selective state-space
// block is the default; the alternatives exist for the efficiency/ablation
// comparison.
enum class SeqMixer { kMamba, kSelfAttention, kNone };

struct UNetConfig {
  int latent_channels = 4;
  int base_width = 64;
  std::vector<int> level_mults = {1, 2};  // one entry per resolution level
  int blocks_per_level = 1;
  int ssm_state_size = 16;
  int ssm_expand = 2;
  int conv1d_width = 4;
  int token_width = 64;
  int time_embed_width = 64;
  int groups = 8;
  bool bidirectional = true;
  SeqMixer mixer = SeqMixer::kMamba;
};

// One learned token per conditioning field plus a timestep token.
struct CondEmbed {
  int token_width = 0;
  Tensor field_w;  // [9, W] scalar-field affine weights
  Tensor field_b;  // [9, W]
  Linear onehot;   // 3 -> W (disease status)
  Linear time_proj;
};

CondEmbed make_cond_embed(int token_width, Rng& rng);
void collect_params(CondEmbed& embed, NamedTensors& out, const std::string& prefix);
// [B, kCondTokens, W]; t supplies the timestep token per batch row.
Tensor cond_tokens(const CondEmbed& embed, const std::vector<ConditioningVector>& conds,
                   const std::vector<int>& t);
inline constexpr int kCondTokens = ConditioningVector::kFieldCount + 1;

// Residual cross-attention: queries from the sequence, keys/values from the
// conditioning tokens. Zero-initialized value projection makes it an exact
// passthrough at construction.
struct CrossAttention {
  int seq_dim = 0;
  int token_dim = 0;
  Linear q, k, v, o;
};

CrossAttention make_cross_attention(int seq_dim, int token_dim, Rng& rng,
                                    bool zero_v = true);
void collect_params(CrossAttention& attn, NamedTensors& out, const std::string& prefix);
Tensor cross_attention_forward(const Tensor& seq, const Tensor& tokens,
                               const CrossAttention& attn);

// Residual conv block with an additive per-channel time-embedding shift.
struct UNetResBlock {
  GroupNorm n1, n2;
  Conv2dLayer c1, c2;
  Linear temb;
  Conv2dLayer skip;  // 1x1, present only when channel count changes
  bool has_skip = false;
};

UNetResBlock make_unet_res_block(int cin, int cout, int groups, int temb_width, Rng& rng);
void collect_params(UNetResBlock& block, NamedTensors& out, const std::string& prefix);
Tensor unet_res_block_forward(const Tensor& x, const Tensor& temb,
                              const UNetResBlock& block);

// One resolution stage: blocks of [res -> mixer over the flattened raster ->
// cross-attention].
struct UNetStage {
  std::vector<UNetResBlock> res;
  std::vector<MambaBlock> mamba;
  std::vector<SelfAttention> sattn;
  std::vector<CrossAttention> cattn;
};

struct UNetMid {
  UNetResBlock res1;
  MambaBlock mamba;
  SelfAttention sattn;
  CrossAttention cattn;
  UNetResBlock res2;
};

struct UNet {
  UNetConfig cfg;
  Linear time1, time2;  // MLP over the sinusoidal embedding
  CondEmbed cond;
  Conv2dLayer stem;
  std::vector<UNetStage> enc;
  std::vector<Conv2dLayer> down;  // stride-2, between levels
  UNetMid mid;
  std::vector<UNetStage> dec;        // indexed like enc, run in reverse
  std::vector<ConvT2dLayer> up;      // up[i]: level i+1 -> level i
  GroupNorm out_norm;
  Conv2dLayer out_conv;  // zero-initialized noise head
};

UNet make_unet(const UNetConfig& cfg, Rng& rng);
void collect_params(UNet& net, NamedTensors& out, const std::string& prefix);
uint64_t unet_fingerprint(UNet& net);

// Frozen-duplicate conditioning pathway. The duplicate of the stem, encoder
// and mid is trainable; `frozen` snapshots the stage-1 encoder+mid tensors
// the duplicate was copied from so immutability can be verified bit-exactly.
struct ControlBranch {
  Conv2dLayer zero_in;  // 1x1 on the baseline latent features
  Conv2dLayer dup_stem;
  std::vector<UNetStage> dup_enc;
  std::vector<Conv2dLayer> dup_down;
  UNetMid dup_mid;
  std::vector<Conv2dLayer> zero_out_level;  // one injection per encoder level
  Conv2dLayer zero_out_mid;
  NamedTensors frozen;
  uint64_t frozen_fingerprint = 0;
  uint64_t stage1_fingerprint = 0;
};

ControlBranch build_control_branch(UNet& stage1_net);
NamedTensors control_trainable_params(ControlBranch& control);
// Names and values of the main net's encoder+mid tensors (the set the
// control branch must keep frozen).
NamedTensors encoder_mid_params(UNet& net);

// eps prediction. `control`/`baseline_latent` are optional and must come
// together; the baseline latent must match z_t's shape.
Tensor unet_forward(const UNet& net, const Tensor& z_t, const std::vector<int>& t,
                    const Tensor& tokens, const ControlBranch* control = nullptr,
                    const Tensor* baseline_latent = nullptr);

// Frozen-gate baseline encoding for the control branch.
Tensor encode_baseline(const Tensor& x_baseline, const GateModel& gate);

struct DiffusionDataset {
  Tensor follow_latents;    // [N,C,h,w]
  Tensor baseline_latents;  // [N,C,h,w]; required for stage 2
  std::vector<ConditioningVector> conds;  // z-scored, index-aligned
  CovariateStats stats;  // the z-scoring applied to conds; stored in checkpoints
};

struct DiffusionTrainConfig {
  int stage = 1;
  int batch = 8;
  int iters = 1500;  // absolute budget, not a count past start_iter
  double lr = 1e-4;
  int checkpoint_every = 500;
  int log_every = 25;
  uint64_t seed = 42;
  std::string out_dir;  // empty: no checkpoints / CSV
  // Resume point. When > 0, the stage's own checkpoint in out_dir supplies
  // the trained weights and optimizer state (its recorded iter must match)
  // and the loss CSV is appended to. Per-iteration RNG streams make the
  // continued run bit-identical to an uninterrupted one.
  int start_iter = 0;
  // Extra keys merged into the checkpoint meta (e.g. the run's config hash).
  nlohmann::json extra_meta;
  // Invoked after each checkpoint write with the just-saved iteration count;
  // hosts use it for side artifacts like sample grids.
  std::function<void(int)> on_checkpoint;
};

struct DiffusionLossRow {
  int iter = 0;
  double loss = 0.0;
};

struct DiffusionTrainResult {
  std::vector<DiffusionLossRow> history;
};

// Stage 1 trains the denoiser on noised follow-up latents; stage 2 freezes
// it and trains only the control branch (which must be present).
DiffusionTrainResult train_diffusion(const DiffusionDataset& data, UNet& net,
                                     ControlBranch* control, const NoiseSchedule& sched,
                                     const DiffusionTrainConfig& cfg);

}  // namespace climb
