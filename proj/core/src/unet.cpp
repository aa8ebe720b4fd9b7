#include "climb/unet.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "climb/checkpoint.hpp"

namespace climb {

namespace {

Tensor gather_rows(const Tensor& data, const std::vector<int64_t>& idx) {
  int64_t n = data.size(0);
  int64_t row = data.numel() / n;
  std::vector<double> out(idx.size() * static_cast<size_t>(row));
  const std::vector<double>& src = data.values();
  for (size_t j = 0; j < idx.size(); ++j) {
    int64_t i = idx[j];
    if (i < 0 || i >= n) throw std::runtime_error("gather_rows: index out of range");
    std::copy(src.begin() + i * row, src.begin() + (i + 1) * row,
              out.begin() + static_cast<int64_t>(j) * row);
  }
  Shape shape = data.shape();
  shape[0] = static_cast<int64_t>(idx.size());
  return Tensor::from_values(shape, std::move(out));
}

Tensor copy_tensor(const Tensor& t) {
  if (!t.defined()) return {};
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

Linear copy_linear(const Linear& l) {
  Linear c;
  c.w = copy_tensor(l.w);
  c.b = copy_tensor(l.b);
  return c;
}

Conv2dLayer copy_conv(const Conv2dLayer& l) {
  Conv2dLayer c;
  c.w = copy_tensor(l.w);
  c.b = copy_tensor(l.b);
  c.stride = l.stride;
  c.pad = l.pad;
  return c;
}

GroupNorm copy_group_norm(const GroupNorm& g) {
  GroupNorm c;
  c.gamma = copy_tensor(g.gamma);
  c.beta = copy_tensor(g.beta);
  c.groups = g.groups;
  c.eps = g.eps;
  return c;
}

SsmLayer copy_ssm_layer(const SsmLayer& s) {
  SsmLayer c;
  c.channels = s.channels;
  c.state_size = s.state_size;
  c.selective = s.selective;
  c.A_log = copy_tensor(s.A_log);
  c.D_skip = copy_tensor(s.D_skip);
  c.proj_b = copy_linear(s.proj_b);
  c.proj_c = copy_linear(s.proj_c);
  c.proj_dt = copy_linear(s.proj_dt);
  c.fixed_b = copy_tensor(s.fixed_b);
  c.fixed_c = copy_tensor(s.fixed_c);
  c.fixed_dt = copy_tensor(s.fixed_dt);
  return c;
}

MambaBlock copy_mamba(const MambaBlock& m) {
  MambaBlock c;
  c.cfg = m.cfg;
  c.norm.gamma = copy_tensor(m.norm.gamma);
  c.norm.eps = m.norm.eps;
  c.in_proj = copy_linear(m.in_proj);
  c.conv_w = copy_tensor(m.conv_w);
  c.conv_b = copy_tensor(m.conv_b);
  c.ssm = copy_ssm_layer(m.ssm);
  c.out_proj = copy_linear(m.out_proj);
  return c;
}

SelfAttention copy_self_attention(const SelfAttention& a) {
  SelfAttention c;
  c.dim = a.dim;
  c.q = copy_linear(a.q);
  c.k = copy_linear(a.k);
  c.v = copy_linear(a.v);
  c.o = copy_linear(a.o);
  return c;
}

CrossAttention copy_cross_attention(const CrossAttention& a) {
  CrossAttention c;
  c.seq_dim = a.seq_dim;
  c.token_dim = a.token_dim;
  c.q = copy_linear(a.q);
  c.k = copy_linear(a.k);
  c.v = copy_linear(a.v);
  c.o = copy_linear(a.o);
  return c;
}

UNetResBlock copy_res_block(const UNetResBlock& b) {
  UNetResBlock c;
  c.n1 = copy_group_norm(b.n1);
  c.n2 = copy_group_norm(b.n2);
  c.c1 = copy_conv(b.c1);
  c.c2 = copy_conv(b.c2);
  c.temb = copy_linear(b.temb);
  c.skip = b.has_skip ? copy_conv(b.skip) : Conv2dLayer{};
  c.has_skip = b.has_skip;
  return c;
}

UNetStage copy_stage(const UNetStage& s) {
  UNetStage c;
  for (const auto& r : s.res) c.res.push_back(copy_res_block(r));
  for (const auto& m : s.mamba) c.mamba.push_back(copy_mamba(m));
  for (const auto& a : s.sattn) c.sattn.push_back(copy_self_attention(a));
  for (const auto& a : s.cattn) c.cattn.push_back(copy_cross_attention(a));
  return c;
}

UNetMid copy_mid(const UNetMid& m) {
  UNetMid c;
  c.res1 = copy_res_block(m.res1);
  if (m.mamba.in_proj.w.defined()) c.mamba = copy_mamba(m.mamba);
  if (m.sattn.q.w.defined()) c.sattn = copy_self_attention(m.sattn);
  c.cattn = copy_cross_attention(m.cattn);
  c.res2 = copy_res_block(m.res2);
  return c;
}

std::vector<int> level_widths(const UNetConfig& cfg) {
  std::vector<int> w;
  w.reserve(cfg.level_mults.size());
  for (int m : cfg.level_mults) w.push_back(cfg.base_width * m);
  return w;
}

UNetStage make_stage(int cin, int cout, const UNetConfig& cfg, Rng& rng) {
  UNetStage stage;
  for (int j = 0; j < cfg.blocks_per_level; ++j) {
    stage.res.push_back(
        make_unet_res_block(j == 0 ? cin : cout, cout, cfg.groups, cfg.time_embed_width, rng));
    if (cfg.mixer == SeqMixer::kMamba) {
      MambaBlockConfig mc;
      mc.model_dim = cout;
      mc.expand = cfg.ssm_expand;
      mc.conv_width = cfg.conv1d_width;
      mc.state_size = cfg.ssm_state_size;
      stage.mamba.push_back(make_mamba_block(mc, rng));
    } else if (cfg.mixer == SeqMixer::kSelfAttention) {
      stage.sattn.push_back(make_self_attention(cout, rng));
    }
    stage.cattn.push_back(make_cross_attention(cout, cfg.token_width, rng));
  }
  return stage;
}

void collect_stage(UNetStage& s, NamedTensors& out, const std::string& prefix) {
  for (size_t j = 0; j < s.res.size(); ++j)
    collect_params(s.res[j], out, prefix + ".res" + std::to_string(j));
  for (size_t j = 0; j < s.mamba.size(); ++j)
    collect_params(s.mamba[j], out, prefix + ".mix" + std::to_string(j));
  for (size_t j = 0; j < s.sattn.size(); ++j)
    collect_params(s.sattn[j], out, prefix + ".mix" + std::to_string(j));
  for (size_t j = 0; j < s.cattn.size(); ++j)
    collect_params(s.cattn[j], out, prefix + ".ca" + std::to_string(j));
}

void collect_mid(UNetMid& m, NamedTensors& out, const std::string& prefix) {
  collect_params(m.res1, out, prefix + ".res1");
  if (m.mamba.in_proj.w.defined()) collect_params(m.mamba, out, prefix + ".mix");
  if (m.sattn.q.w.defined()) collect_params(m.sattn, out, prefix + ".mix");
  collect_params(m.cattn, out, prefix + ".ca");
  collect_params(m.res2, out, prefix + ".res2");
}

// Sequence mixing over the flattened raster, residual included.
Tensor mix_sequence(const Tensor& x, const UNetStage& stage, size_t j, const UNetConfig& cfg) {
  if (cfg.mixer == SeqMixer::kNone) return x;
  SequenceLayout layout = layout_of(x);
  Tensor seq = flatten_spatial(x, layout);
  if (cfg.mixer == SeqMixer::kMamba) {
    const MambaBlock& block = stage.mamba[j];
    seq = cfg.bidirectional ? mamba_block_bidirectional(seq, block)
                            : mamba_block_forward(seq, block);
  } else {
    seq = seq + naive_self_attention(seq, stage.sattn[j]);
  }
  return unflatten_spatial(seq, layout);
}

Tensor mix_sequence_mid(const Tensor& x, const UNetMid& mid, const UNetConfig& cfg) {
  if (cfg.mixer == SeqMixer::kNone) return x;
  SequenceLayout layout = layout_of(x);
  Tensor seq = flatten_spatial(x, layout);
  if (cfg.mixer == SeqMixer::kMamba) {
    seq = cfg.bidirectional ? mamba_block_bidirectional(seq, mid.mamba)
                            : mamba_block_forward(seq, mid.mamba);
  } else {
    seq = seq + naive_self_attention(seq, mid.sattn);
  }
  return unflatten_spatial(seq, layout);
}

Tensor attend_spatial(const Tensor& x, const Tensor& tokens, const CrossAttention& ca) {
  SequenceLayout layout = layout_of(x);
  Tensor seq = flatten_spatial(x, layout);
  seq = cross_attention_forward(seq, tokens, ca);
  return unflatten_spatial(seq, layout);
}

Tensor stage_forward(const Tensor& x, const Tensor& temb, const Tensor& tokens,
                     const UNetStage& stage, const UNetConfig& cfg) {
  Tensor h = x;
  for (size_t j = 0; j < stage.res.size(); ++j) {
    h = unet_res_block_forward(h, temb, stage.res[j]);
    h = mix_sequence(h, stage, j, cfg);
    h = attend_spatial(h, tokens, stage.cattn[j]);
  }
  return h;
}

Tensor mid_forward(const Tensor& x, const Tensor& temb, const Tensor& tokens,
                   const UNetMid& mid, const UNetConfig& cfg) {
  Tensor h = unet_res_block_forward(x, temb, mid.res1);
  h = mix_sequence_mid(h, mid, cfg);
  h = attend_spatial(h, tokens, mid.cattn);
  return unet_res_block_forward(h, temb, mid.res2);
}

Tensor time_features(const UNet& net, const std::vector<int>& t) {
  Tensor e = sinusoidal_embedding(t, net.cfg.time_embed_width);
  return net.time2.forward(silu(net.time1.forward(e)));
}

std::string mixer_name(SeqMixer m) {
  switch (m) {
    case SeqMixer::kMamba: return "mamba";
    case SeqMixer::kSelfAttention: return "self-attention";
    case SeqMixer::kNone: return "none";
  }
  return "mamba";
}

}  // namespace

CondEmbed make_cond_embed(int token_width, Rng& rng) {
  if (token_width < 1) throw std::runtime_error("make_cond_embed: bad token width");
  CondEmbed e;
  e.token_width = token_width;
  double s = 1.0 / std::sqrt(static_cast<double>(token_width));
  e.field_w = Tensor::randn({9, token_width}, rng, s, true);
  e.field_b = Tensor::randn({9, token_width}, rng, s, true);
  e.onehot = Linear::init(3, token_width, rng);
  e.time_proj = Linear::init(token_width, token_width, rng);
  return e;
}

void collect_params(CondEmbed& embed, NamedTensors& out, const std::string& prefix) {
  out.add(prefix + ".field_w", embed.field_w);
  out.add(prefix + ".field_b", embed.field_b);
  embed.onehot.params(prefix + ".onehot", out);
  embed.time_proj.params(prefix + ".time_proj", out);
}

Tensor cond_tokens(const CondEmbed& embed, const std::vector<ConditioningVector>& conds,
                   const std::vector<int>& t) {
  if (conds.empty() || conds.size() != t.size())
    throw std::runtime_error("cond_tokens: conditioning/timestep batch mismatch");
  int64_t bsz = static_cast<int64_t>(conds.size());
  int64_t w = embed.token_width;
  std::vector<double> scalars(static_cast<size_t>(bsz) * 9);
  std::vector<double> onehot(static_cast<size_t>(bsz) * 3);
  for (int64_t i = 0; i < bsz; ++i) {
    auto f = conds[static_cast<size_t>(i)].flat();
    for (int j = 0; j < 9; ++j) scalars[static_cast<size_t>(i * 9 + j)] = f[static_cast<size_t>(j)];
    for (int j = 0; j < 3; ++j)
      onehot[static_cast<size_t>(i * 3 + j)] = f[static_cast<size_t>(9 + j)];
  }
  // one token per scalar field: token_ij = x_ij * w_j + b_j
  Tensor sc = reshape(Tensor::from_values({bsz, 9}, std::move(scalars)), {bsz, 9, 1});
  Tensor field = sc * reshape(embed.field_w, {1, 9, w}) + reshape(embed.field_b, {1, 9, w});
  Tensor oh = Tensor::from_values({bsz, 3}, std::move(onehot));
  Tensor disease = reshape(embed.onehot.forward(oh), {bsz, 1, w});
  Tensor time_tok =
      reshape(embed.time_proj.forward(sinusoidal_embedding(t, w)), {bsz, 1, w});
  return concat({field, disease, time_tok}, 1);
}

CrossAttention make_cross_attention(int seq_dim, int token_dim, Rng& rng, bool zero_v) {
  if (seq_dim < 1 || token_dim < 1)
    throw std::runtime_error("make_cross_attention: bad widths");
  CrossAttention a;
  a.seq_dim = seq_dim;
  a.token_dim = token_dim;
  double s = 1.0 / std::sqrt(static_cast<double>(seq_dim));
  a.q = Linear::init(seq_dim, seq_dim, rng, s);
  a.k = Linear::init(token_dim, seq_dim, rng, s);
  a.v = zero_v ? Linear::zero(token_dim, seq_dim) : Linear::init(token_dim, seq_dim, rng, s);
  a.o = Linear::init(seq_dim, seq_dim, rng, s);
  return a;
}

void collect_params(CrossAttention& attn, NamedTensors& out, const std::string& prefix) {
  attn.q.params(prefix + ".q", out);
  attn.k.params(prefix + ".k", out);
  attn.v.params(prefix + ".v", out);
  attn.o.params(prefix + ".o", out);
}

Tensor cross_attention_forward(const Tensor& seq, const Tensor& tokens,
                               const CrossAttention& attn) {
  if (seq.dim() != 3 || tokens.dim() != 3)
    throw std::runtime_error("cross_attention: rank-3 inputs required");
  if (seq.size(2) != attn.seq_dim || tokens.size(2) != attn.token_dim)
    throw std::runtime_error("cross_attention: width mismatch");
  if (seq.size(0) != tokens.size(0))
    throw std::runtime_error("cross_attention: batch mismatch");
  Tensor qm = attn.q.forward(seq);
  Tensor km = attn.k.forward(tokens);
  Tensor vm = attn.v.forward(tokens);
  Tensor scores =
      scale(matmul(qm, transpose_last2(km)), 1.0 / std::sqrt(static_cast<double>(attn.seq_dim)));
  Tensor ctx = matmul(softmax_lastdim(scores), vm);
  return seq + attn.o.forward(ctx);
}

UNetResBlock make_unet_res_block(int cin, int cout, int groups, int temb_width, Rng& rng) {
  if (cin % groups != 0 || cout % groups != 0)
    throw std::runtime_error("make_unet_res_block: group count must divide channels");
  UNetResBlock b;
  b.n1 = GroupNorm::init(cin, groups);
  b.c1 = Conv2dLayer::init(cin, cout, 3, 1, 1, rng);
  b.temb = Linear::init(temb_width, cout, rng);
  b.n2 = GroupNorm::init(cout, groups);
  b.c2 = Conv2dLayer::init(cout, cout, 3, 1, 1, rng);
  b.has_skip = cin != cout;
  if (b.has_skip) b.skip = Conv2dLayer::init(cin, cout, 1, 1, 0, rng);
  return b;
}

void collect_params(UNetResBlock& block, NamedTensors& out, const std::string& prefix) {
  block.n1.params(prefix + ".n1", out);
  block.c1.params(prefix + ".c1", out);
  block.temb.params(prefix + ".temb", out);
  block.n2.params(prefix + ".n2", out);
  block.c2.params(prefix + ".c2", out);
  if (block.has_skip) block.skip.params(prefix + ".skip", out);
}

Tensor unet_res_block_forward(const Tensor& x, const Tensor& temb, const UNetResBlock& block) {
  Tensor h = block.c1.forward(silu(block.n1.forward(x)));
  Tensor shift = block.temb.forward(silu(temb));  // [B,cout]
  h = h + reshape(shift, {shift.size(0), shift.size(1), 1, 1});
  h = block.c2.forward(silu(block.n2.forward(h)));
  Tensor base = block.has_skip ? block.skip.forward(x) : x;
  return base + h;
}

UNet make_unet(const UNetConfig& cfg, Rng& rng) {
  if (cfg.level_mults.size() < 2)
    throw std::runtime_error("make_unet: at least two resolution levels required");
  if (cfg.blocks_per_level < 1) throw std::runtime_error("make_unet: bad block count");
  for (int m : cfg.level_mults)
    if (m < 1 || (cfg.base_width * m) % cfg.groups != 0)
      throw std::runtime_error("make_unet: level width must be a positive multiple of groups");
  UNet net;
  net.cfg = cfg;
  std::vector<int> widths = level_widths(cfg);
  int levels = static_cast<int>(widths.size());
  net.time1 = Linear::init(cfg.time_embed_width, cfg.time_embed_width, rng);
  net.time2 = Linear::init(cfg.time_embed_width, cfg.time_embed_width, rng);
  net.cond = make_cond_embed(cfg.token_width, rng);
  net.stem = Conv2dLayer::init(cfg.latent_channels, widths[0], 3, 1, 1, rng);
  for (int i = 0; i < levels; ++i) {
    int cin = i == 0 ? widths[0] : widths[static_cast<size_t>(i - 1)];
    net.enc.push_back(make_stage(cin, widths[static_cast<size_t>(i)], cfg, rng));
    if (i + 1 < levels) {
      int w = widths[static_cast<size_t>(i)];
      net.down.push_back(Conv2dLayer::init(w, w, 3, 2, 1, rng));
    }
  }
  int wn = widths.back();
  net.mid.res1 = make_unet_res_block(wn, wn, cfg.groups, cfg.time_embed_width, rng);
  if (cfg.mixer == SeqMixer::kMamba) {
    MambaBlockConfig mc;
    mc.model_dim = wn;
    mc.expand = cfg.ssm_expand;
    mc.conv_width = cfg.conv1d_width;
    mc.state_size = cfg.ssm_state_size;
    net.mid.mamba = make_mamba_block(mc, rng);
  } else if (cfg.mixer == SeqMixer::kSelfAttention) {
    net.mid.sattn = make_self_attention(wn, rng);
  }
  net.mid.cattn = make_cross_attention(wn, cfg.token_width, rng);
  net.mid.res2 = make_unet_res_block(wn, wn, cfg.groups, cfg.time_embed_width, rng);
  net.dec.resize(static_cast<size_t>(levels));
  for (int i = levels - 1; i >= 0; --i) {
    int w = widths[static_cast<size_t>(i)];
    net.dec[static_cast<size_t>(i)] = make_stage(2 * w, w, cfg, rng);
  }
  for (int i = 0; i + 1 < levels; ++i)
    net.up.push_back(
        ConvT2dLayer::init(widths[static_cast<size_t>(i + 1)], widths[static_cast<size_t>(i)],
                           4, 2, 1, rng));
  net.out_norm = GroupNorm::init(widths[0], cfg.groups);
  net.out_conv = Conv2dLayer::zero(widths[0], cfg.latent_channels, 3, 1, 1);
  return net;
}

void collect_params(UNet& net, NamedTensors& out, const std::string& prefix) {
  net.time1.params(prefix + ".time1", out);
  net.time2.params(prefix + ".time2", out);
  collect_params(net.cond, out, prefix + ".cond");
  net.stem.params(prefix + ".stem", out);
  for (size_t i = 0; i < net.enc.size(); ++i)
    collect_stage(net.enc[i], out, prefix + ".enc" + std::to_string(i));
  for (size_t i = 0; i < net.down.size(); ++i)
    net.down[i].params(prefix + ".down" + std::to_string(i), out);
  collect_mid(net.mid, out, prefix + ".mid");
  for (size_t i = 0; i < net.dec.size(); ++i)
    collect_stage(net.dec[i], out, prefix + ".dec" + std::to_string(i));
  for (size_t i = 0; i < net.up.size(); ++i)
    net.up[i].params(prefix + ".up" + std::to_string(i), out);
  net.out_norm.params(prefix + ".out_norm", out);
  net.out_conv.params(prefix + ".out_conv", out);
}

uint64_t unet_fingerprint(UNet& net) {
  NamedTensors all;
  collect_params(net, all, "unet");
  return tensors_fingerprint(all);
}

NamedTensors encoder_mid_params(UNet& net) {
  NamedTensors out;
  net.stem.params("unet.stem", out);
  for (size_t i = 0; i < net.enc.size(); ++i)
    collect_stage(net.enc[i], out, "unet.enc" + std::to_string(i));
  for (size_t i = 0; i < net.down.size(); ++i)
    net.down[i].params("unet.down" + std::to_string(i), out);
  collect_mid(net.mid, out, "unet.mid");
  return out;
}

ControlBranch build_control_branch(UNet& stage1_net) {
  ControlBranch c;
  const UNetConfig& cfg = stage1_net.cfg;
  std::vector<int> widths = level_widths(cfg);
  c.zero_in = Conv2dLayer::zero(cfg.latent_channels, cfg.latent_channels, 1, 1, 0);
  c.dup_stem = copy_conv(stage1_net.stem);
  for (const auto& s : stage1_net.enc) c.dup_enc.push_back(copy_stage(s));
  for (const auto& d : stage1_net.down) c.dup_down.push_back(copy_conv(d));
  c.dup_mid = copy_mid(stage1_net.mid);
  for (int w : widths) c.zero_out_level.push_back(Conv2dLayer::zero(w, w, 1, 1, 0));
  c.zero_out_mid = Conv2dLayer::zero(widths.back(), widths.back(), 1, 1, 0);
  NamedTensors frozen_live = encoder_mid_params(stage1_net);
  for (auto& [name, t] : frozen_live.items) c.frozen.add(name, t.detach());
  c.frozen_fingerprint = tensors_fingerprint(c.frozen);
  c.stage1_fingerprint = unet_fingerprint(stage1_net);
  return c;
}

NamedTensors control_trainable_params(ControlBranch& control) {
  NamedTensors out;
  control.zero_in.params("control.zero_in", out);
  control.dup_stem.params("control.stem", out);
  for (size_t i = 0; i < control.dup_enc.size(); ++i)
    collect_stage(control.dup_enc[i], out, "control.enc" + std::to_string(i));
  for (size_t i = 0; i < control.dup_down.size(); ++i)
    control.dup_down[i].params("control.down" + std::to_string(i), out);
  collect_mid(control.dup_mid, out, "control.mid");
  for (size_t i = 0; i < control.zero_out_level.size(); ++i)
    control.zero_out_level[i].params("control.zero_out" + std::to_string(i), out);
  control.zero_out_mid.params("control.zero_mid", out);
  return out;
}

Tensor unet_forward(const UNet& net, const Tensor& z_t, const std::vector<int>& t,
                    const Tensor& tokens, const ControlBranch* control,
                    const Tensor* baseline_latent) {
  const UNetConfig& cfg = net.cfg;
  if (z_t.dim() != 4 || z_t.size(1) != cfg.latent_channels)
    throw std::runtime_error("unet_forward: latent shape mismatch");
  int64_t bsz = z_t.size(0);
  if (static_cast<int64_t>(t.size()) != bsz)
    throw std::runtime_error("unet_forward: timestep batch mismatch");
  if (tokens.dim() != 3 || tokens.size(0) != bsz || tokens.size(1) != kCondTokens ||
      tokens.size(2) != cfg.token_width)
    throw std::runtime_error("unet_forward: conditioning token shape mismatch");
  if ((control == nullptr) != (baseline_latent == nullptr))
    throw std::runtime_error("unet_forward: control branch and baseline latent come together");
  int levels = static_cast<int>(net.enc.size());
  int64_t down_factor = int64_t{1} << (levels - 1);
  if (z_t.size(2) % down_factor != 0 || z_t.size(3) % down_factor != 0)
    throw std::runtime_error("unet_forward: spatial size not divisible across levels");

  Tensor temb = time_features(net, t);

  // Conditioning pathway: the duplicate trunk runs on the noised latent plus
  // the projected baseline features, and its per-level outputs enter the main
  // trunk through the zero-initialized 1x1 projections.
  std::vector<Tensor> inject(static_cast<size_t>(levels));
  Tensor inject_mid;
  if (control != nullptr) {
    if (baseline_latent->shape() != z_t.shape())
      throw std::runtime_error("unet_forward: baseline latent shape mismatch");
    if (static_cast<int>(control->dup_enc.size()) != levels)
      throw std::runtime_error("unet_forward: control branch level mismatch");
    Tensor ch = control->dup_stem.forward(z_t + control->zero_in.forward(*baseline_latent));
    for (int i = 0; i < levels; ++i) {
      ch = stage_forward(ch, temb, tokens, control->dup_enc[static_cast<size_t>(i)], cfg);
      inject[static_cast<size_t>(i)] =
          control->zero_out_level[static_cast<size_t>(i)].forward(ch);
      if (i + 1 < levels) ch = control->dup_down[static_cast<size_t>(i)].forward(ch);
    }
    ch = mid_forward(ch, temb, tokens, control->dup_mid, cfg);
    inject_mid = control->zero_out_mid.forward(ch);
  }

  Tensor h = net.stem.forward(z_t);
  std::vector<Tensor> skips;
  skips.reserve(static_cast<size_t>(levels));
  for (int i = 0; i < levels; ++i) {
    h = stage_forward(h, temb, tokens, net.enc[static_cast<size_t>(i)], cfg);
    if (control != nullptr) h = h + inject[static_cast<size_t>(i)];
    skips.push_back(h);
    if (i + 1 < levels) h = net.down[static_cast<size_t>(i)].forward(h);
  }
  h = mid_forward(h, temb, tokens, net.mid, cfg);
  if (control != nullptr) h = h + inject_mid;
  for (int i = levels - 1; i >= 0; --i) {
    h = concat({h, skips[static_cast<size_t>(i)]}, 1);
    h = stage_forward(h, temb, tokens, net.dec[static_cast<size_t>(i)], cfg);
    if (i > 0) h = net.up[static_cast<size_t>(i - 1)].forward(h);
  }
  return net.out_conv.forward(silu(net.out_norm.forward(h)));
}

Tensor encode_baseline(const Tensor& x_baseline, const GateModel& gate) {
  NoGradScope ng;
  return gate_encode(gate, x_baseline);
}

DiffusionTrainResult train_diffusion(const DiffusionDataset& data, UNet& net,
                                     ControlBranch* control, const NoiseSchedule& sched,
                                     const DiffusionTrainConfig& cfg) {
  if (cfg.stage != 1 && cfg.stage != 2)
    throw std::runtime_error("train_diffusion: stage must be 1 or 2");
  if (!data.follow_latents.defined() || data.follow_latents.dim() != 4)
    throw std::runtime_error("train_diffusion: follow-up latents must be [N,C,h,w]");
  int64_t n = data.follow_latents.size(0);
  if (n < 1 || data.conds.size() != static_cast<size_t>(n))
    throw std::runtime_error("train_diffusion: conditioning rows must match latents");
  if (cfg.stage == 2) {
    if (control == nullptr)
      throw std::runtime_error("train_diffusion: stage 2 requires the control branch");
    if (!data.baseline_latents.defined() ||
        data.baseline_latents.shape() != data.follow_latents.shape())
      throw std::runtime_error("train_diffusion: stage 2 requires baseline latents");
  }

  if (cfg.start_iter < 0 || cfg.start_iter >= cfg.iters)
    throw std::runtime_error("train_diffusion: start_iter must lie in [0, iters)");
  Rng base_rng(cfg.seed);
  NamedTensors trainable;
  if (cfg.stage == 1) {
    collect_params(net, trainable, "unet");
  } else {
    trainable = control_trainable_params(*control);
  }
  NamedTensors main_params;
  collect_params(net, main_params, "unet");
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamOptimizer opt(adam_cfg);

  if (cfg.start_iter > 0) {
    if (cfg.out_dir.empty())
      throw std::runtime_error("train_diffusion: resuming requires out_dir");
    LoadedCheckpoint ck = load_checkpoint(cfg.out_dir + "/diffusion_stage" +
                                          std::to_string(cfg.stage) + ".ckpt");
    int saved = ck.meta.value("iter", -1);
    if (saved != cfg.start_iter)
      throw std::runtime_error("train_diffusion: checkpoint is at iter " +
                               std::to_string(saved) + ", not " +
                               std::to_string(cfg.start_iter));
    restore_tensor_values(trainable, ck.tensors);
    opt.import_state(filter_prefixed(ck.tensors, "opt::"));
  }

  std::ofstream csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::string csv_path =
        cfg.out_dir + "/diffusion_stage" + std::to_string(cfg.stage) + "_loss.csv";
    if (cfg.start_iter > 0) {
      csv.open(csv_path, std::ios::app);
    } else {
      csv.open(csv_path);
      csv << "iter,loss\n";
    }
  }

  auto save = [&](int iter_done) {
    if (cfg.out_dir.empty()) return;
    json cfg_meta = {{"latent_channels", net.cfg.latent_channels},
                     {"base_width", net.cfg.base_width},
                     {"level_mults", net.cfg.level_mults},
                     {"blocks_per_level", net.cfg.blocks_per_level},
                     {"ssm_state_size", net.cfg.ssm_state_size},
                     {"ssm_expand", net.cfg.ssm_expand},
                     {"conv1d_width", net.cfg.conv1d_width},
                     {"token_width", net.cfg.token_width},
                     {"time_embed_width", net.cfg.time_embed_width},
                     {"groups", net.cfg.groups},
                     {"bidirectional", net.cfg.bidirectional},
                     {"mixer", mixer_name(net.cfg.mixer)},
                     {"block_order", "res-mixer-cross_attention"}};
    json stats_meta = {{"age_mean", data.stats.age_mean},
                       {"age_std", data.stats.age_std},
                       {"vol_mean", data.stats.vol_mean},
                       {"vol_std", data.stats.vol_std}};
    char hex[17];
    if (cfg.stage == 1) {
      NamedTensors all;
      collect_params(net, all, "unet");
      std::snprintf(hex, sizeof hex, "%016llx",
                    static_cast<unsigned long long>(tensors_fingerprint(all)));
      json meta = {{"kind", "diffusion_stage1"}, {"iter", iter_done},
                   {"config", cfg_meta},        {"covariate_stats", stats_meta},
                   {"timesteps", sched.T()},    {"fingerprint", hex}};
      if (cfg.extra_meta.is_object())
        for (const auto& [k, v] : cfg.extra_meta.items()) meta[k] = v;
      for (const auto& [sname, st] : with_prefix(opt.export_state(), "opt::").items)
        all.add(sname, st);
      save_checkpoint(cfg.out_dir + "/diffusion_stage1.ckpt", all, meta);
    } else {
      NamedTensors ctl = control_trainable_params(*control);
      std::snprintf(hex, sizeof hex, "%016llx",
                    static_cast<unsigned long long>(control->stage1_fingerprint));
      json meta = {{"kind", "diffusion_stage2"}, {"iter", iter_done},
                   {"config", cfg_meta},         {"covariate_stats", stats_meta},
                   {"timesteps", sched.T()},     {"stage1_fingerprint", hex}};
      if (cfg.extra_meta.is_object())
        for (const auto& [k, v] : cfg.extra_meta.items()) meta[k] = v;
      for (const auto& [sname, st] : with_prefix(opt.export_state(), "opt::").items)
        ctl.add(sname, st);
      save_checkpoint(cfg.out_dir + "/diffusion_stage2.ckpt", ctl, meta);
    }
    if (cfg.on_checkpoint) cfg.on_checkpoint(iter_done);
  };

  DiffusionTrainResult result;
  for (int iter = cfg.start_iter; iter < cfg.iters; ++iter) {
    // Independent stream per iteration so a resumed run replays the same
    // draws an uninterrupted run would have made.
    Rng rng = base_rng.fork(static_cast<uint64_t>(iter));
    std::vector<int64_t> idx(static_cast<size_t>(cfg.batch));
    for (auto& i : idx) i = rng.uniform_int(0, n - 1);
    Tensor z0 = gather_rows(data.follow_latents, idx);
    std::vector<ConditioningVector> batch_conds(idx.size());
    std::vector<int> tvec(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) {
      batch_conds[j] = data.conds[static_cast<size_t>(idx[j])];
      tvec[j] = static_cast<int>(rng.uniform_int(0, sched.T() - 1));
    }
    Tensor eps = Tensor::randn(z0.shape(), rng);
    Tensor z_t = q_sample_per_sample(z0, tvec, eps, sched);

    DiffusionLossRow row;
    row.iter = iter;
    try {
      TapeScope tape;
      Tensor tokens = cond_tokens(net.cond, batch_conds, tvec);
      Tensor eps_hat;
      if (cfg.stage == 1) {
        eps_hat = unet_forward(net, z_t, tvec, tokens);
      } else {
        Tensor base = gather_rows(data.baseline_latents, idx);
        eps_hat = unet_forward(net, z_t, tvec, tokens, control, &base);
      }
      Tensor loss = eps_loss(eps, eps_hat);
      row.loss = loss.item();
      backward(loss);
      opt.step(trainable);
      if (cfg.stage == 2) {
        // gradients that reached the frozen denoiser are dropped, never applied
        for (auto& [name, tns] : main_params.items) tns.zero_grad();
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("train_diffusion: diverged at iter " + std::to_string(iter) +
                               ": " + e.what());
    }

    result.history.push_back(row);
    if (csv.is_open() && (iter % cfg.log_every == 0 || iter + 1 == cfg.iters)) {
      csv << row.iter << ',' << row.loss << '\n';
      csv.flush();
    }
    if (cfg.checkpoint_every > 0 &&
        ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iters)) {
      save(iter + 1);
    }
  }
  return result;
}

}  // namespace climb
