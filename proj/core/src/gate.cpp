#include "climb/gate.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "climb/checkpoint.hpp"

namespace climb {

ResBlock2d make_res_block2d(int channels, int groups, Rng& rng) {
  ResBlock2d block;
  block.n1 = GroupNorm::init(channels, groups);
  block.n2 = GroupNorm::init(channels, groups);
  block.c1 = Conv2dLayer::init(channels, channels, 3, 1, 1, rng);
  block.c2 = Conv2dLayer::init(channels, channels, 3, 1, 1, rng);
  return block;
}

Tensor res_block2d_forward(const Tensor& x, const ResBlock2d& block) {
  Tensor h = block.c1.forward(silu(block.n1.forward(x)));
  h = block.c2.forward(silu(block.n2.forward(h)));
  return x + h;
}

namespace {

void res_params(ResBlock2d& block, NamedTensors& out, const std::string& prefix) {
  block.n1.params(prefix + ".n1", out);
  block.c1.params(prefix + ".c1", out);
  block.n2.params(prefix + ".n2", out);
  block.c2.params(prefix + ".c2", out);
}

}  // namespace

GateModel make_gate_model(const GateConfig& cfg, Rng& rng) {
  if (cfg.image_size % 4 != 0)
    throw std::runtime_error("gate: image_size must be divisible by 4");
  int w = cfg.base_width;
  GateModel m;
  m.cfg = cfg;
  m.e_stem = Conv2dLayer::init(1, w, 3, 1, 1, rng);
  m.e_down1 = Conv2dLayer::init(w, w, 3, 2, 1, rng);
  m.e_res1 = make_res_block2d(w, cfg.groups, rng);
  m.e_down2 = Conv2dLayer::init(w, w, 3, 2, 1, rng);
  m.e_res2 = make_res_block2d(w, cfg.groups, rng);
  m.e_out_norm = GroupNorm::init(w, cfg.groups);
  m.e_head = Conv2dLayer::init(w, cfg.latent_channels, 3, 1, 1, rng);

  m.d_head = Conv2dLayer::init(cfg.latent_channels, w, 3, 1, 1, rng);
  m.d_res1 = make_res_block2d(w, cfg.groups, rng);
  m.d_up1 = ConvT2dLayer::init(w, w, 4, 2, 1, rng);
  m.d_res2 = make_res_block2d(w, cfg.groups, rng);
  m.d_up2 = ConvT2dLayer::init(w, w, 4, 2, 1, rng);
  m.d_out_norm = GroupNorm::init(w, cfg.groups);
  m.d_out = Conv2dLayer::init(w, 1, 3, 1, 1, rng);
  return m;
}

void collect_params(GateModel& m, NamedTensors& out, const std::string& prefix) {
  m.e_stem.params(prefix + ".e_stem", out);
  m.e_down1.params(prefix + ".e_down1", out);
  res_params(m.e_res1, out, prefix + ".e_res1");
  m.e_down2.params(prefix + ".e_down2", out);
  res_params(m.e_res2, out, prefix + ".e_res2");
  m.e_out_norm.params(prefix + ".e_out_norm", out);
  m.e_head.params(prefix + ".e_head", out);
  m.d_head.params(prefix + ".d_head", out);
  res_params(m.d_res1, out, prefix + ".d_res1");
  m.d_up1.params(prefix + ".d_up1", out);
  res_params(m.d_res2, out, prefix + ".d_res2");
  m.d_up2.params(prefix + ".d_up2", out);
  m.d_out_norm.params(prefix + ".d_out_norm", out);
  m.d_out.params(prefix + ".d_out", out);
}

Tensor gate_encode(const GateModel& m, const Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != m.cfg.image_size ||
      x.size(3) != m.cfg.image_size)
    throw std::runtime_error("gate_encode: expected [B,1,S,S] input matching config");
  Tensor h = silu(m.e_stem.forward(x));
  h = silu(m.e_down1.forward(h));
  h = res_block2d_forward(h, m.e_res1);
  h = silu(m.e_down2.forward(h));
  h = res_block2d_forward(h, m.e_res2);
  h = silu(m.e_out_norm.forward(h));
  return m.e_head.forward(h);
}

Tensor gate_decode(const GateModel& m, const Tensor& z) {
  int s = m.cfg.image_size / 4;
  if (z.dim() != 4 || z.size(1) != m.cfg.latent_channels || z.size(2) != s ||
      z.size(3) != s)
    throw std::runtime_error("gate_decode: latent shape does not match config");
  Tensor h = m.d_head.forward(z);
  h = res_block2d_forward(h, m.d_res1);
  h = m.d_up1.forward(h);
  h = res_block2d_forward(h, m.d_res2);
  h = m.d_up2.forward(h);
  h = silu(m.d_out_norm.forward(h));
  return sigmoid(m.d_out.forward(h));
}

Tensor recon_loss(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) throw std::runtime_error("recon_loss: shape mismatch");
  return mean_all(square(x - x_hat));
}

Tensor sample_directions(int k, int d, Rng& rng) {
  if (k < 1 || d < 1) throw std::runtime_error("sample_directions: need K >= 1, d >= 1");
  std::vector<double> rows(static_cast<size_t>(k) * d);
  for (int i = 0; i < k; ++i) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (int j = 0; j < d; ++j) {
        double g = rng.normal();
        rows[static_cast<size_t>(i) * d + j] = g;
        norm2 += g * g;
      }
    } while (norm2 < 1e-24);
    double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < d; ++j) rows[static_cast<size_t>(i) * d + j] *= inv;
  }
  return Tensor::from_values({k, d}, std::move(rows));
}

Tensor latent_positions_as_samples(const Tensor& z) {
  if (z.dim() != 4) throw std::runtime_error("latent samples: expected [B,C,H,W]");
  int64_t B = z.size(0), C = z.size(1), HW = z.size(2) * z.size(3);
  return reshape(transpose_last2(reshape(z, {B, C, HW})), {B * HW, C});
}

Tensor sliced_cdf_loss(const Tensor& z_samples, const Tensor& prior_samples,
                       const Tensor& dirs, double p) {
  if (z_samples.dim() != 2 || prior_samples.dim() != 2 || dirs.dim() != 2)
    throw std::runtime_error("sliced_cdf_loss: expected 2-D sample and direction sets");
  if (z_samples.shape() != prior_samples.shape())
    throw std::runtime_error("sliced_cdf_loss: sample counts must match");
  if (dirs.size(1) != z_samples.size(1))
    throw std::runtime_error("sliced_cdf_loss: direction dimension mismatch");
  int64_t K = dirs.size(0);
  if (K < 1) throw std::runtime_error("sliced_cdf_loss: need at least one direction");
  int64_t n = z_samples.size(0);
  Tensor dirs_t = transpose_last2(dirs);
  Tensor proj_z = matmul(z_samples, dirs_t);      // [n,K]
  Tensor proj_r = matmul(prior_samples, dirs_t);  // [n,K]
  Tensor acc;
  for (int64_t k = 0; k < K; ++k) {
    Tensor sz = sort_with_backward(reshape(slice(proj_z, 1, k, 1), {n})).first;
    Tensor sr = sort_with_backward(reshape(slice(proj_r, 1, k, 1), {n})).first;
    Tensor term = mean_all(abs_pow(sz - sr, p));
    acc = k == 0 ? term : acc + term;
  }
  return scale(acc, 1.0 / static_cast<double>(K));
}

RandomFeatureExtractor make_random_features(uint64_t seed) {
  Rng rng(seed);
  RandomFeatureExtractor phi;
  phi.seed = seed;
  phi.c1 = Conv2dLayer::init(1, 8, 3, 1, 1, rng);
  phi.c2 = Conv2dLayer::init(8, 16, 3, 2, 1, rng);
  phi.c3 = Conv2dLayer::init(16, 16, 3, 1, 1, rng);
  // frozen: features never train
  phi.c1.w.set_requires_grad(false);
  phi.c1.b.set_requires_grad(false);
  phi.c2.w.set_requires_grad(false);
  phi.c2.b.set_requires_grad(false);
  phi.c3.w.set_requires_grad(false);
  phi.c3.b.set_requires_grad(false);
  return phi;
}

Tensor random_features_forward(const RandomFeatureExtractor& phi, const Tensor& x) {
  Tensor h = silu(phi.c1.forward(x));
  h = silu(phi.c2.forward(h));
  return phi.c3.forward(h);
}

Tensor perceptual_loss(const Tensor& x, const Tensor& x_hat,
                       const RandomFeatureExtractor& phi) {
  if (x.shape() != x_hat.shape())
    throw std::runtime_error("perceptual_loss: shape mismatch");
  return mean_all(square(random_features_forward(phi, x) -
                         random_features_forward(phi, x_hat)));
}

PatchDiscriminator make_patch_discriminator(int base_width, Rng& rng) {
  PatchDiscriminator d;
  d.c1 = Conv2dLayer::init(1, base_width, 3, 2, 1, rng);
  d.c2 = Conv2dLayer::init(base_width, base_width * 2, 3, 2, 1, rng);
  d.c3 = Conv2dLayer::init(base_width * 2, base_width * 2, 3, 1, 1, rng);
  d.head = Conv2dLayer::init(base_width * 2, 1, 3, 1, 1, rng);
  return d;
}

void collect_params(PatchDiscriminator& d, NamedTensors& out, const std::string& prefix) {
  d.c1.params(prefix + ".c1", out);
  d.c2.params(prefix + ".c2", out);
  d.c3.params(prefix + ".c3", out);
  d.head.params(prefix + ".head", out);
}

Tensor disc_logits(const PatchDiscriminator& d, const Tensor& x) {
  // silu keeps the whole adversarial objective smooth for gradient checks
  Tensor h = silu(d.c1.forward(x));
  h = silu(d.c2.forward(h));
  h = silu(d.c3.forward(h));
  return d.head.forward(h);
}

AdversarialLosses adversarial_losses(const Tensor& x, const Tensor& x_hat,
                                     const PatchDiscriminator& disc) {
  Tensor real = disc_logits(disc, x);
  Tensor fake_detached = disc_logits(disc, x_hat.detach());
  Tensor fake_attached = disc_logits(disc, x_hat);
  AdversarialLosses out;
  // -log sigmoid(real) - log(1 - sigmoid(fake)) in softplus form
  out.loss_disc = mean_all(softplus(neg(real))) + mean_all(softplus(fake_detached));
  out.loss_gen = mean_all(softplus(neg(fake_attached)));
  return out;
}

Tensor gate_total_loss(const GateLossParts& parts, const GateLossWeights& w) {
  if (w.rec <= 0.0) throw std::runtime_error("gate loss: reconstruction weight must be positive");
  if (w.sd < 0.0 || w.perc < 0.0 || w.adv < 0.0)
    throw std::runtime_error("gate loss: weights must be nonnegative");
  Tensor total = scale(parts.rec, w.rec);
  if (w.sd > 0.0) total = total + scale(parts.sd, w.sd);
  if (w.perc > 0.0) total = total + scale(parts.perc, w.perc);
  if (w.adv > 0.0) total = total + scale(parts.adv_gen, w.adv);
  return total;
}

namespace {

Tensor gather_rows(const Tensor& stack, const std::vector<int64_t>& idx) {
  int64_t rows = static_cast<int64_t>(idx.size());
  int64_t inner = stack.numel() / stack.size(0);
  std::vector<double> out(static_cast<size_t>(rows * inner));
  for (int64_t r = 0; r < rows; ++r) {
    if (idx[static_cast<size_t>(r)] < 0 || idx[static_cast<size_t>(r)] >= stack.size(0))
      throw std::runtime_error("gather_rows: index out of range");
    std::copy_n(stack.values().data() + idx[static_cast<size_t>(r)] * inner, inner,
                out.data() + r * inner);
  }
  Shape shape = stack.shape();
  shape[0] = rows;
  return Tensor::from_values(std::move(shape), std::move(out));
}

}  // namespace

double gate_eval_mse(const GateModel& model, const Tensor& images, int batch) {
  NoGradScope ng;
  int64_t n = images.size(0);
  double sum = 0.0;
  for (int64_t at = 0; at < n; at += batch) {
    int64_t take = std::min<int64_t>(batch, n - at);
    Tensor x = slice(images, 0, at, take);
    Tensor xh = gate_decode(model, gate_encode(model, x));
    sum += recon_loss(x, xh).item() * static_cast<double>(take);
  }
  return sum / static_cast<double>(n);
}

GateTrainResult train_gate(const Tensor& images, const Tensor& val_images,
                           GateModel& model, PatchDiscriminator& disc,
                           const GateLossWeights& weights, const GateTrainConfig& cfg) {
  if (images.dim() != 4 || images.size(0) < 1)
    throw std::runtime_error("train_gate: empty dataset");
  if (weights.rec <= 0.0)
    throw std::runtime_error("train_gate: reconstruction weight must be positive");
  if (cfg.start_iter < 0 || cfg.start_iter >= cfg.iters)
    throw std::runtime_error("train_gate: start_iter must lie in [0, iters)");
  Rng base_rng(cfg.seed);
  NamedTensors ae_params;
  collect_params(model, ae_params, "gate");
  NamedTensors disc_params;
  collect_params(disc, disc_params, "disc");
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamOptimizer ae_opt(adam_cfg);
  AdamOptimizer disc_opt(adam_cfg);
  RandomFeatureExtractor phi = make_random_features(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  if (cfg.start_iter > 0) {
    if (cfg.out_dir.empty())
      throw std::runtime_error("train_gate: resuming requires out_dir");
    LoadedCheckpoint ck = load_checkpoint(cfg.out_dir + "/gate.ckpt");
    int saved = ck.meta.value("iter", -1);
    if (saved != cfg.start_iter)
      throw std::runtime_error("train_gate: checkpoint is at iter " +
                               std::to_string(saved) + ", not " +
                               std::to_string(cfg.start_iter));
    restore_tensor_values(ae_params, ck.tensors);
    restore_tensor_values(disc_params, ck.tensors);
    ae_opt.import_state(filter_prefixed(ck.tensors, "opt_ae::"));
    disc_opt.import_state(filter_prefixed(ck.tensors, "opt_disc::"));
  }

  std::ofstream csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    if (cfg.start_iter > 0) {
      csv.open(cfg.out_dir + "/gate_loss.csv", std::ios::app);
    } else {
      csv.open(cfg.out_dir + "/gate_loss.csv");
      csv << "iter,total,rec,sd,perc,adv_gen,adv_disc\n";
    }
  }

  GateTrainResult result;
  int64_t n = images.size(0);
  int64_t cz = model.cfg.latent_channels;
  for (int iter = cfg.start_iter; iter < cfg.iters; ++iter) {
    // Independent stream per iteration so a resumed run replays the same
    // draws an uninterrupted run would have made.
    Rng rng = base_rng.fork(static_cast<uint64_t>(iter));
    std::vector<int64_t> idx(static_cast<size_t>(cfg.batch));
    for (auto& i : idx) i = rng.uniform_int(0, n - 1);
    Tensor x = gather_rows(images, idx);

    GateLossRow row;
    row.iter = iter;
    try {
      if (weights.adv > 0.0) {
        // discriminator phase on the current reconstruction snapshot
        Tensor x_hat_const;
        {
          NoGradScope ng;
          x_hat_const = gate_decode(model, gate_encode(model, x));
        }
        TapeScope tape;
        AdversarialLosses adv = adversarial_losses(x, x_hat_const, disc);
        backward(adv.loss_disc);
        row.adv_disc = adv.loss_disc.item();
        disc_opt.step(disc_params);
        for (auto& [name, t] : ae_params.items) t.zero_grad();
      }

      TapeScope tape;
      Tensor z = gate_encode(model, x);
      Tensor x_hat = gate_decode(model, z);
      GateLossParts parts;
      parts.rec = recon_loss(x, x_hat);
      row.rec = parts.rec.item();
      if (weights.sd > 0.0) {
        Tensor zs = latent_positions_as_samples(z);
        Tensor prior = Tensor::randn(zs.shape(), rng);
        Tensor dirs = sample_directions(cfg.sliced.directions, static_cast<int>(cz), rng);
        parts.sd = sliced_cdf_loss(zs, prior, dirs, cfg.sliced.power);
        row.sd = parts.sd.item();
      }
      if (weights.perc > 0.0) {
        parts.perc = perceptual_loss(x, x_hat, phi);
        row.perc = parts.perc.item();
      }
      if (weights.adv > 0.0) {
        AdversarialLosses adv = adversarial_losses(x, x_hat, disc);
        parts.adv_gen = adv.loss_gen;
        row.adv_gen = adv.loss_gen.item();
      }
      Tensor total = gate_total_loss(parts, weights);
      row.total = total.item();
      backward(total);
      ae_opt.step(ae_params);
      // drop gradients the generator loss pushed into the discriminator
      for (auto& [name, t] : disc_params.items) t.zero_grad();
    } catch (const std::exception& e) {
      throw std::runtime_error("train_gate: diverged at iter " + std::to_string(iter) +
                               ": " + e.what());
    }

    result.history.push_back(row);
    if (csv.is_open() && (iter % cfg.log_every == 0 || iter + 1 == cfg.iters)) {
      csv << row.iter << ',' << row.total << ',' << row.rec << ',' << row.sd << ','
          << row.perc << ',' << row.adv_gen << ',' << row.adv_disc << '\n';
      csv.flush();
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iters)) {
      NamedTensors all;
      collect_params(model, all, "gate");
      for (const auto& [pname, pt] : disc_params.items) all.add(pname, pt);
      for (const auto& [sname, st] :
           with_prefix(ae_opt.export_state(), "opt_ae::").items)
        all.add(sname, st);
      for (const auto& [sname, st] :
           with_prefix(disc_opt.export_state(), "opt_disc::").items)
        all.add(sname, st);
      json meta = {{"kind", "gate"},
                   {"iter", iter + 1},
                   {"image_size", model.cfg.image_size},
                   {"latent_channels", model.cfg.latent_channels},
                   {"base_width", model.cfg.base_width},
                   {"groups", model.cfg.groups}};
      if (cfg.extra_meta.is_object())
        for (const auto& [k, v] : cfg.extra_meta.items()) meta[k] = v;
      save_checkpoint(cfg.out_dir + "/gate.ckpt", all, meta);
      if (cfg.on_checkpoint) cfg.on_checkpoint(iter + 1);
    }
  }
  result.final_val_mse = gate_eval_mse(model, val_images);
  return result;
}

double ks_statistic_vs_normal(std::vector<double> samples) {
  if (samples.empty()) throw std::runtime_error("ks: empty sample");
  std::sort(samples.begin(), samples.end());
  double n = static_cast<double>(samples.size());
  double worst = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    double cdf = 0.5 * std::erfc(-samples[i] / std::sqrt(2.0));
    double hi = (static_cast<double>(i) + 1.0) / n - cdf;
    double lo = cdf - static_cast<double>(i) / n;
    worst = std::max({worst, hi, lo});
  }
  return worst;
}

std::vector<double> latent_direction_ks(const GateModel& model, const Tensor& images,
                                        const Tensor& dirs, int batch) {
  NoGradScope ng;
  int64_t n = images.size(0);
  std::vector<Tensor> chunks;
  for (int64_t at = 0; at < n; at += batch) {
    int64_t take = std::min<int64_t>(batch, n - at);
    Tensor z = gate_encode(model, slice(images, 0, at, take));
    chunks.push_back(latent_positions_as_samples(z));
  }
  Tensor samples = chunks.size() == 1 ? chunks[0] : concat(chunks, 0);
  Tensor proj = matmul(samples, transpose_last2(dirs));  // [n_samples, K]
  int64_t K = dirs.size(0);
  int64_t rows = proj.size(0);
  std::vector<double> out(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) {
    std::vector<double> col(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r)
      col[static_cast<size_t>(r)] = proj.values()[static_cast<size_t>(r * K + k)];
    out[static_cast<size_t>(k)] = ks_statistic_vs_normal(std::move(col));
  }
  return out;
}

}  // namespace climb
