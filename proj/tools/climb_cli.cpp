// Command-line harness: dataset generation, the two training stages,
// sampling, evaluation and the diagnostic verbs, all driven by one JSON
// run configuration. Errors leave a machine-readable JSON line on stderr.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "climb/checkpoint.hpp"
#include "climb/config.hpp"
#include "climb/gate.hpp"
#include "climb/gradsuite.hpp"
#include "climb/metrics.hpp"
#include "climb/pgm.hpp"
#include "climb/phantom.hpp"
#include "climb/schedule.hpp"
#include "climb/ssm.hpp"
#include "climb/tensor.hpp"
#include "climb/thread_pool.hpp"
#include "climb/unet.hpp"

namespace fs = std::filesystem;
using namespace climb;

namespace {

// Frozen seed for the random perceptual features: reports stay comparable
// across runs and configs.
constexpr uint64_t kRpdFeatureSeed = 0x52504431;

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const char* diagnosis_name(Diagnosis d) {
  switch (d) {
    case Diagnosis::kCN: return "CN";
    case Diagnosis::kMCI: return "MCI";
    default: return "AD";
  }
}

// ---------------------------------------------------------------------------
// Shared option plumbing

struct CommonArgs {
  std::string config_path;
  std::string out_dir;  // overrides the config when set
  int64_t seed = -1;    // overrides when >= 0
  int threads = 0;      // overrides when > 0
  bool force = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "JSON run configuration file");
  sub->add_option("--out-dir", args.out_dir, "output directory (overrides config)");
  sub->add_option("--seed", args.seed, "seed (overrides config)");
  sub->add_option("--threads", args.threads, "worker threads; 1 = bit-exact");
  sub->add_flag("--force", args.force, "proceed past config-hash mismatches");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{}
                                           : RunConfig::from_file(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  if (args.threads > 0) cfg.threads = args.threads;
  std::vector<std::string> problems = cfg.validate();
  if (!problems.empty()) {
    std::string msg = "invalid config";
    for (const std::string& p : problems) msg += "; " + p;
    throw CliError(msg);
  }
  ThreadPool::instance().set_num_threads(cfg.threads);
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct Manifest {
  std::vector<ToySubject> cohort;
  Splits splits;
  CovariateStats stats;
  int image_size = 0;
  uint64_t seed = 0;
  std::string config_hash;
};

json subject_to_json(const ToySubject& s) {
  return json{{"id", s.id},
              {"sex", s.sex},
              {"genetic_flag", s.genetic_flag},
              {"diagnosis", static_cast<int>(s.disease_status)},
              {"baseline_age", s.baseline_age},
              {"visit_ages", s.visit_ages},
              {"atrophy_rate", s.atrophy_rate},
              {"shape_seed", s.shape_seed},
              {"image_size", s.image_size}};
}

ToySubject subject_from_json(const json& j) {
  ToySubject s;
  s.id = j.at("id").get<int>();
  s.sex = j.at("sex").get<int>();
  s.genetic_flag = j.at("genetic_flag").get<int>();
  s.disease_status = static_cast<Diagnosis>(j.at("diagnosis").get<int>());
  s.baseline_age = j.at("baseline_age").get<double>();
  s.visit_ages = j.at("visit_ages").get<std::vector<double>>();
  s.atrophy_rate = j.at("atrophy_rate").get<std::array<double, 4>>();
  s.shape_seed = j.at("shape_seed").get<uint64_t>();
  s.image_size = j.at("image_size").get<int>();
  return s;
}

json stats_to_json(const CovariateStats& st) {
  return json{{"age_mean", st.age_mean},
              {"age_std", st.age_std},
              {"vol_mean", st.vol_mean},
              {"vol_std", st.vol_std}};
}

CovariateStats stats_from_json(const json& j) {
  CovariateStats st;
  st.age_mean = j.at("age_mean").get<double>();
  st.age_std = j.at("age_std").get<double>();
  st.vol_mean = j.at("vol_mean").get<std::array<double, 5>>();
  st.vol_std = j.at("vol_std").get<std::array<double, 5>>();
  return st;
}

std::string data_dir_of(const RunConfig& cfg) { return cfg.out_dir + "/data"; }

std::string visit_pgm_name(int subject_id, size_t visit) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%03d_v%zu.pgm", subject_id, visit);
  return buf;
}

Manifest load_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.json";
  if (!fs::exists(path))
    throw CliError("missing artifact: " + path + " (run gen-data first)");
  json j = json::parse(read_file(path));
  Manifest m;
  m.image_size = j.at("image_size").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  for (const json& sj : j.at("subjects")) m.cohort.push_back(subject_from_json(sj));
  m.splits.train = j.at("splits").at("train").get<std::vector<int>>();
  m.splits.val = j.at("splits").at("val").get<std::vector<int>>();
  m.splits.test = j.at("splits").at("test").get<std::vector<int>>();
  m.stats = stats_from_json(j.at("covariate_stats"));
  return m;
}

Tensor load_visit(const std::string& dir, const ToySubject& s, size_t visit) {
  Tensor img = read_pgm(dir + "/" + visit_pgm_name(s.id, visit));  // [H,W]
  return reshape(img, {1, 1, img.shape()[0], img.shape()[1]});
}

// [N,1,S,S] stack of every visit of the chosen subjects, loaded from disk.
Tensor load_visit_stack(const std::string& dir, const Manifest& m,
                        const std::vector<int>& subject_idx) {
  std::vector<double> px;
  int64_t n = 0;
  for (int idx : subject_idx) {
    const ToySubject& s = m.cohort.at(static_cast<size_t>(idx));
    for (size_t v = 0; v < s.visit_ages.size(); ++v) {
      Tensor img = load_visit(dir, s, v);
      px.insert(px.end(), img.values().begin(), img.values().end());
      ++n;
    }
  }
  if (n == 0) throw CliError("no images in the requested split");
  return Tensor::from_values({n, 1, m.image_size, m.image_size}, std::move(px));
}

// Disk-backed counterpart of build_pairs: (first visit -> later visit) pairs
// with the images read back from the generated PGMs.
PairedDataset pairs_from_disk(const std::string& dir, const Manifest& m,
                              const std::vector<int>& subject_idx,
                              const CovariateStats& stats, double min_gap,
                              int max_pairs) {
  PairedDataset out;
  out.stats = stats;
  std::vector<double> base_px, tgt_px;
  for (int idx : subject_idx) {
    const ToySubject& s = m.cohort.at(static_cast<size_t>(idx));
    Tensor base_img;
    for (size_t v = 1; v < s.visit_ages.size(); ++v) {
      if (max_pairs > 0 && static_cast<int>(out.pairs.size()) >= max_pairs) break;
      double gap = s.visit_ages[v] - s.visit_ages[0];
      if (gap < min_gap - 1e-12) continue;
      if (!base_img.defined()) base_img = load_visit(dir, s, 0);
      Tensor tgt_img = load_visit(dir, s, v);
      base_px.insert(base_px.end(), base_img.values().begin(), base_img.values().end());
      tgt_px.insert(tgt_px.end(), tgt_img.values().begin(), tgt_img.values().end());
      out.conds.push_back(normalized(progress_covariates(s, s.visit_ages[v]), stats));
      out.pairs.push_back({idx, s.visit_ages[0], s.visit_ages[v]});
    }
  }
  int64_t n = static_cast<int64_t>(out.pairs.size());
  if (n == 0) throw CliError("no visit pairs satisfy the age-gap requirement");
  out.baseline_images = Tensor::from_values({n, 1, m.image_size, m.image_size},
                                            std::move(base_px));
  out.target_images = Tensor::from_values({n, 1, m.image_size, m.image_size},
                                          std::move(tgt_px));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint loading

void check_artifact_hash(const json& meta, const std::string& what,
                         const std::string& expect_hex, bool force) {
  const std::string got = meta.value("config_hash", "");
  if (got == expect_hex) return;
  std::string msg = what + " carries config hash " + (got.empty() ? "<none>" : got) +
                    " but the current config hashes to " + expect_hex;
  if (!force) throw CliError(msg + " (pass --force to evaluate anyway)");
  std::fprintf(stderr, "warning: %s (forced)\n", msg.c_str());
}

GateModel load_gate_model(const std::string& path) {
  if (!fs::exists(path))
    throw CliError("missing artifact: " + path + " (run train-gate first)");
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "gate")
    throw CliError(path + " is not an autoencoder checkpoint");
  GateConfig gc;
  gc.image_size = ck.meta.at("image_size").get<int>();
  gc.latent_channels = ck.meta.at("latent_channels").get<int>();
  gc.base_width = ck.meta.at("base_width").get<int>();
  gc.groups = ck.meta.at("groups").get<int>();
  Rng rng(0);
  GateModel model = make_gate_model(gc, rng);
  NamedTensors params;
  collect_params(model, params, "gate");
  restore_tensor_values(params, ck.tensors);
  return model;
}

UNetConfig unet_config_from_meta(const json& c) {
  UNetConfig uc;
  uc.latent_channels = c.at("latent_channels").get<int>();
  uc.base_width = c.at("base_width").get<int>();
  uc.level_mults = c.at("level_mults").get<std::vector<int>>();
  uc.blocks_per_level = c.at("blocks_per_level").get<int>();
  uc.ssm_state_size = c.at("ssm_state_size").get<int>();
  uc.ssm_expand = c.value("ssm_expand", uc.ssm_expand);
  uc.conv1d_width = c.at("conv1d_width").get<int>();
  uc.token_width = c.at("token_width").get<int>();
  uc.time_embed_width = c.at("time_embed_width").get<int>();
  uc.groups = c.at("groups").get<int>();
  uc.bidirectional = c.at("bidirectional").get<bool>();
  return uc;
}

struct LoadedStage1 {
  UNet net;
  json meta;
};

LoadedStage1 load_stage1(const std::string& path) {
  if (!fs::exists(path))
    throw CliError("missing artifact: " + path + " (run train-diffusion --stage 1 first)");
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "diffusion_stage1")
    throw CliError(path + " is not a stage-1 denoiser checkpoint");
  Rng rng(0);
  LoadedStage1 out{make_unet(unet_config_from_meta(ck.meta.at("config")), rng),
                   ck.meta};
  NamedTensors params;
  collect_params(out.net, params, "unet");
  restore_tensor_values(params, ck.tensors);
  const std::string want = ck.meta.value("fingerprint", "");
  if (!want.empty() && hash_hex(unet_fingerprint(out.net)) != want)
    throw CliError(path + " failed its weight fingerprint check after loading");
  return out;
}

struct LoadedStage2 {
  ControlBranch control;
  json meta;
};

// Rebuilds the control branch over the loaded stage-1 net and restores its
// trained tensors; the frozen duplicate is re-derived, so the stage-1
// fingerprint recorded at training time must match the net we build on.
LoadedStage2 load_stage2(UNet& stage1_net, const std::string& path, bool force) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "diffusion_stage2")
    throw CliError(path + " is not a stage-2 control checkpoint");
  LoadedStage2 out{build_control_branch(stage1_net), ck.meta};
  const std::string want = ck.meta.value("stage1_fingerprint", "");
  if (hash_hex(out.control.stage1_fingerprint) != want) {
    std::string msg = path + " was trained against a different stage-1 backbone (" +
                      want + " vs " + hash_hex(out.control.stage1_fingerprint) + ")";
    if (!force) throw CliError(msg);
    std::fprintf(stderr, "warning: %s (forced)\n", msg.c_str());
  }
  NamedTensors trainable = control_trainable_params(out.control);
  restore_tensor_values(trainable, ck.tensors);
  return out;
}

// ---------------------------------------------------------------------------
// Image grids

// Tiles [1,1,S,S] images row-major into a [rows*S, cols*S] sheet.
Tensor tile_grid(const std::vector<Tensor>& imgs, int cols) {
  if (imgs.empty()) throw CliError("tile_grid: no images");
  int64_t S = imgs[0].shape()[2];
  int rows = (static_cast<int>(imgs.size()) + cols - 1) / cols;
  std::vector<double> px(static_cast<size_t>(rows * S * cols * S), 0.0);
  for (size_t i = 0; i < imgs.size(); ++i) {
    int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    const auto& v = imgs[i].values();
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x)
        px[static_cast<size_t>((r * S + y) * cols * S + c * S + x)] =
            v[static_cast<size_t>(y * S + x)];
  }
  return Tensor::from_values({rows * S, cols * S}, std::move(px));
}

// ---------------------------------------------------------------------------
// Latent encoding for the diffusion stages

Tensor encode_stack(const GateModel& gate, const Tensor& images) {
  NoGradScope ng;
  const int64_t n = images.shape()[0];
  std::vector<Tensor> chunks;
  for (int64_t i = 0; i < n; i += 16)
    chunks.push_back(gate_encode(gate, slice(images, 0, i, std::min<int64_t>(16, n - i))));
  return chunks.size() == 1 ? chunks[0] : concat(chunks, 0);
}

DiffusionDataset diffusion_data_from_pairs(const GateModel& gate,
                                           const PairedDataset& pairs) {
  DiffusionDataset data;
  data.follow_latents = encode_stack(gate, pairs.target_images);
  data.baseline_latents = encode_stack(gate, pairs.baseline_images);
  data.conds = pairs.conds;
  data.stats = pairs.stats;
  return data;
}

// ---------------------------------------------------------------------------
// Sampling shared by cmd_sample, grids and evaluation

Tensor sample_decoded(const GateModel& gate, const UNet& net,
                      const ControlBranch* control, const Tensor& base_latent,
                      const ConditioningVector& cond, const NoiseSchedule& sched,
                      const SamplerConfig& sc, Rng& rng) {
  NoGradScope ng;
  EpsModel model = [&](const Tensor& z_t, const std::vector<int>& t,
                       const std::vector<ConditioningVector>& conds) {
    Tensor tokens = cond_tokens(net.cond, conds, t);
    Tensor base = base_latent;
    if (z_t.shape()[0] != base.shape()[0]) {
      std::vector<Tensor> reps(static_cast<size_t>(z_t.shape()[0]), base);
      base = concat(reps, 0);
    }
    return unet_forward(net, z_t, t, tokens, control, control ? &base : nullptr);
  };
  Shape latent_shape(base_latent.shape().begin() + 1, base_latent.shape().end());
  Tensor z = sample_latent(model, cond, sched, sc, rng, latent_shape);
  Shape batched = latent_shape;
  batched.insert(batched.begin(), 1);
  return gate_decode(gate, reshape(z, batched));  // [1,1,S,S]
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  CohortParams params;
  params.image_size = cfg.data.image_size;
  params.age_lo = cfg.data.baseline_age_lo;
  params.age_hi = cfg.data.baseline_age_hi;
  params.min_visits = cfg.data.min_visits;
  params.max_visits = cfg.data.max_visits;

  Rng rng(cfg.seed);
  std::vector<ToySubject> cohort = generate_cohort(cfg.data.n_subjects, rng, params);
  Splits splits = make_splits(
      cohort, {cfg.data.split_ratios[0], cfg.data.split_ratios[1], cfg.data.split_ratios[2]},
      rng);
  CovariateStats stats = covariate_stats_from(cohort, splits.train);

  const std::string dir = data_dir_of(cfg);
  fs::create_directories(dir);
  int n_images = 0;
  for (const ToySubject& s : cohort) {
    for (size_t v = 0; v < s.visit_ages.size(); ++v) {
      const std::string path = dir + "/" + visit_pgm_name(s.id, v);
      const std::string tmp = path + ".tmp";
      write_pgm(tmp, render_phantom(s, s.visit_ages[v]).image);
      fs::rename(tmp, path);  // readers never observe a partial image
      ++n_images;
    }
  }

  json manifest{{"config_hash", hash_hex(cfg.config_hash())},
                {"seed", cfg.seed},
                {"image_size", cfg.data.image_size},
                {"subjects", json::array()},
                {"splits",
                 {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}}},
                {"covariate_stats", stats_to_json(stats)}};
  for (const ToySubject& s : cohort) manifest["subjects"].push_back(subject_to_json(s));
  atomic_write_file(dir + "/manifest.json", manifest.dump(2) + "\n");

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("wrote %d images for %zu subjects to %s (%.1f s)\n", n_images,
              cohort.size(), dir.c_str(), secs);
  std::printf("splits: %zu train / %zu val / %zu test\n", splits.train.size(),
              splits.val.size(), splits.test.size());
  return 0;
}

// ---------------------------------------------------------------------------
// train-gate

int cmd_train_gate(const RunConfig& cfg, bool force) {
  const std::string dir = data_dir_of(cfg);
  Manifest m = load_manifest(dir);
  const std::string hash = hash_hex(cfg.config_hash());

  Tensor train_images = load_visit_stack(dir, m, m.splits.train);
  Tensor val_images = load_visit_stack(dir, m, m.splits.val);

  GateConfig gc;
  gc.image_size = m.image_size;
  gc.latent_channels = cfg.gate.latent_channels;
  gc.base_width = cfg.gate.base_width;
  gc.groups = cfg.gate.groups;
  Rng init_rng(cfg.seed);
  GateModel model = make_gate_model(gc, init_rng);
  PatchDiscriminator disc = make_patch_discriminator(gc.base_width, init_rng);

  GateLossWeights weights;
  weights.rec = cfg.gate.lambda_rec;
  weights.sd = cfg.gate.lambda_sd;
  weights.perc = cfg.gate.lambda_perc;
  weights.adv = cfg.gate.lambda_adv;

  GateTrainConfig tc;
  tc.batch = cfg.gate.batch_size;
  tc.iters = cfg.gate.iters;
  tc.lr = cfg.gate.lr;
  tc.checkpoint_every = cfg.gate.checkpoint_every;
  tc.log_every = 1;  // one CSV row per completed step
  tc.sliced.directions = cfg.gate.sliced_directions;
  tc.sliced.power = cfg.gate.sliced_power;
  tc.seed = cfg.seed;
  tc.out_dir = cfg.out_dir;
  tc.extra_meta = json{{"config_hash", hash}, {"seed", cfg.seed}};

  const std::string ckpt_path = cfg.out_dir + "/gate.ckpt";
  if (fs::exists(ckpt_path)) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    check_artifact_hash(ck.meta, ckpt_path, hash, force);
    int done = ck.meta.value("iter", 0);
    if (done >= tc.iters) {
      std::printf("%s already trained to %d iters; nothing to do\n", ckpt_path.c_str(),
                  done);
      return 0;
    }
    tc.start_iter = done;
    std::printf("resuming from %s at iter %d\n", ckpt_path.c_str(), done);
  }

  const int grid_n = static_cast<int>(std::min<int64_t>(8, val_images.shape()[0]));
  tc.on_checkpoint = [&](int iter) {
    NoGradScope ng;
    std::vector<Tensor> tiles;
    for (int i = 0; i < grid_n; ++i)
      tiles.push_back(slice(val_images, 0, i, 1));
    for (int i = 0; i < grid_n; ++i) {
      Tensor x = slice(val_images, 0, i, 1);
      tiles.push_back(gate_decode(model, gate_encode(model, x)));
    }
    write_pgm(cfg.out_dir + "/gate_recon_grid.pgm", tile_grid(tiles, grid_n));
    (void)iter;
  };

  GateTrainResult res = train_gate(train_images, val_images, model, disc, weights, tc);
  std::printf("train-gate done: %d iters, final val recon MSE %.6f\n", tc.iters,
              res.final_val_mse);
  return 0;
}

// ---------------------------------------------------------------------------
// train-diffusion

int cmd_train_diffusion(const RunConfig& cfg, int stage, bool force) {
  const std::string dir = data_dir_of(cfg);
  Manifest m = load_manifest(dir);
  const std::string hash = hash_hex(cfg.config_hash());

  GateModel gate = load_gate_model(cfg.out_dir + "/gate.ckpt");
  PairedDataset pairs = pairs_from_disk(dir, m, m.splits.train, m.stats, 0.0, 0);
  DiffusionDataset data = diffusion_data_from_pairs(gate, pairs);
  NoiseSchedule sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                      cfg.schedule.beta_end);

  UNetConfig uc;
  uc.latent_channels = cfg.gate.latent_channels;
  uc.base_width = cfg.denoiser.base_width;
  uc.level_mults = cfg.denoiser.level_mults;
  uc.blocks_per_level = cfg.denoiser.blocks_per_level;
  uc.ssm_state_size = cfg.denoiser.ssm_state_size;
  uc.ssm_expand = cfg.denoiser.ssm_expand;
  uc.conv1d_width = cfg.denoiser.conv1d_width;
  uc.token_width = cfg.denoiser.token_width;
  uc.time_embed_width = cfg.denoiser.time_embed_width;
  uc.groups = cfg.denoiser.groups;
  uc.bidirectional = cfg.denoiser.bidirectional;

  DiffusionTrainConfig tc;
  tc.stage = stage;
  tc.batch = cfg.train_diffusion.batch_size;
  tc.iters = stage == 1 ? cfg.train_diffusion.stage1_iters : cfg.train_diffusion.stage2_iters;
  tc.lr = cfg.train_diffusion.lr;
  tc.checkpoint_every = cfg.train_diffusion.checkpoint_every;
  tc.log_every = 1;  // one CSV row per completed step
  tc.seed = cfg.seed + static_cast<uint64_t>(stage);
  tc.out_dir = cfg.out_dir;
  tc.extra_meta = json{{"config_hash", hash}, {"seed", cfg.seed}};

  const std::string ckpt_path =
      cfg.out_dir + "/diffusion_stage" + std::to_string(stage) + ".ckpt";
  if (fs::exists(ckpt_path)) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    check_artifact_hash(ck.meta, ckpt_path, hash, force);
    int done = ck.meta.value("iter", 0);
    if (done >= tc.iters) {
      std::printf("%s already trained to %d iters; nothing to do\n", ckpt_path.c_str(),
                  done);
      return 0;
    }
    tc.start_iter = done;
    std::printf("resuming from %s at iter %d\n", ckpt_path.c_str(), done);
  }

  UNet net = [&] {
    if (stage == 2) return load_stage1(cfg.out_dir + "/diffusion_stage1.ckpt").net;
    Rng rng(cfg.seed);
    return make_unet(uc, rng);
  }();
  ControlBranch control;
  if (stage == 2) control = build_control_branch(net);

  const int grid_n = static_cast<int>(std::min<int64_t>(4, data.follow_latents.shape()[0]));
  SamplerConfig grid_sc{10, 0.0, 1};  // cheap preview chains
  tc.on_checkpoint = [&](int iter) {
    std::vector<Tensor> tiles;
    Rng grid_rng(cfg.seed ^ 0x6772696dULL);
    for (int i = 0; i < grid_n; ++i) {
      Tensor base = slice(data.baseline_latents, 0, i, 1);
      tiles.push_back(sample_decoded(gate, net, stage == 2 ? &control : nullptr, base,
                                     data.conds[static_cast<size_t>(i)], sched, grid_sc,
                                     grid_rng));
    }
    write_pgm(cfg.out_dir + "/diffusion_stage" + std::to_string(stage) + "_grid.pgm",
              tile_grid(tiles, grid_n));
    (void)iter;
  };

  DiffusionTrainResult res =
      train_diffusion(data, net, stage == 2 ? &control : nullptr, sched, tc);
  double last = res.history.empty() ? 0.0 : res.history.back().loss;
  std::printf("train-diffusion stage %d done: %d iters, last loss %.6f\n", stage,
              tc.iters, last);
  return 0;
}

// ---------------------------------------------------------------------------
// sample

int cmd_sample(const RunConfig& cfg, int subject, int visit, double target_age) {
  const std::string dir = data_dir_of(cfg);
  Manifest m = load_manifest(dir);

  if (subject < 0 || subject >= static_cast<int>(m.cohort.size()))
    throw CliError("subject index " + std::to_string(subject) + " outside cohort of " +
                   std::to_string(m.cohort.size()));
  const ToySubject& s = m.cohort[static_cast<size_t>(subject)];
  if (visit < 0 || visit >= static_cast<int>(s.visit_ages.size()))
    throw CliError("visit " + std::to_string(visit) + " outside subject's " +
                   std::to_string(s.visit_ages.size()) + " visits");
  if (target_age < s.baseline_age || target_age > s.baseline_age + kMaxElapsedYears)
    throw CliError("target age must lie in [" + std::to_string(s.baseline_age) + ", " +
                   std::to_string(s.baseline_age + kMaxElapsedYears) + "]");

  GateModel gate = load_gate_model(cfg.out_dir + "/gate.ckpt");
  LoadedStage1 s1 = load_stage1(cfg.out_dir + "/diffusion_stage1.ckpt");
  int ckpt_T = s1.meta.value("timesteps", 0);
  if (ckpt_T != cfg.schedule.timesteps)
    throw CliError("denoiser was trained with " + std::to_string(ckpt_T) +
                   " timesteps but the config says " +
                   std::to_string(cfg.schedule.timesteps));
  const std::string stage2_path = cfg.out_dir + "/diffusion_stage2.ckpt";
  bool with_control = fs::exists(stage2_path);
  LoadedStage2 s2;
  if (with_control) s2 = load_stage2(s1.net, stage2_path, false);

  CovariateStats stats = stats_from_json(s1.meta.at("covariate_stats"));
  ConditioningVector raw = progress_covariates(s, target_age);
  ConditioningVector cond = normalized(raw, stats);

  // Out-of-range covariates degrade quality but are not an error.
  json warnings = json::array();
  auto warn_z = [&](const char* field, double z) {
    if (std::abs(z) <= 3.0) return;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s z-score %.2f is outside [-3, 3]", field, z);
    std::fprintf(stderr, "warning: %s\n", buf);
    warnings.push_back(buf);
  };
  warn_z("projected_age", cond.projected_age);
  warn_z("acquisition_age", cond.acquisition_age);
  const char* vol_names[5] = {"gray", "hippocampus", "amygdala", "white", "ventricles"};
  for (int i = 0; i < 5; ++i)
    warn_z(vol_names[i], cond.volumes[static_cast<size_t>(i)]);

  NoiseSchedule sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                      cfg.schedule.beta_end);
  SamplerConfig sc{cfg.sampler.num_steps, cfg.sampler.eta, cfg.sampler.num_latent_samples};

  Tensor baseline = load_visit(dir, s, static_cast<size_t>(visit));
  Tensor base_latent;
  {
    NoGradScope ng;
    base_latent = gate_encode(gate, baseline);
  }
  Rng rng(cfg.seed);
  Tensor out = sample_decoded(gate, s1.net, with_control ? &s2.control : nullptr,
                              base_latent, cond, sched, sc, rng);

  fs::create_directories(cfg.out_dir + "/samples");
  char stem[96];
  std::snprintf(stem, sizeof stem, "s%03d_v%d_to_a%.1f", s.id, visit, target_age);
  const std::string pgm_path = cfg.out_dir + "/samples/" + stem + ".pgm";
  const std::string tmp = pgm_path + ".tmp";
  write_pgm(tmp, reshape(out, {out.shape()[2], out.shape()[3]}));
  fs::rename(tmp, pgm_path);

  json meta{{"verb", "sample"},
            {"config_hash", hash_hex(cfg.config_hash())},
            {"seed", cfg.seed},
            {"subject", s.id},
            {"baseline_visit", visit},
            {"baseline_age", s.visit_ages[static_cast<size_t>(visit)]},
            {"target_age", target_age},
            {"diagnosis_at_target", diagnosis_name(status_at(s, target_age))},
            {"sampler",
             {{"num_steps", sc.num_steps},
              {"eta", sc.eta},
              {"num_latent_samples", sc.num_latent_samples}}},
            {"timesteps", cfg.schedule.timesteps},
            {"control_branch", with_control},
            {"covariate_warnings", warnings},
            {"image", fs::path(pgm_path).filename().string()}};
  atomic_write_file(cfg.out_dir + "/samples/" + stem + ".json", meta.dump(2) + "\n");
  std::printf("wrote %s (%s)\n", pgm_path.c_str(),
              with_control ? "with control branch" : "stage-1 only");
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

int cmd_evaluate(const RunConfig& cfg, bool force) {
  const std::string dir = data_dir_of(cfg);
  Manifest m = load_manifest(dir);
  const std::string hash = hash_hex(cfg.config_hash());
  if (m.config_hash != hash) {
    std::string msg = dir + "/manifest.json carries config hash " + m.config_hash +
                      " but the current config hashes to " + hash;
    if (!force) throw CliError(msg + " (pass --force to evaluate anyway)");
    std::fprintf(stderr, "warning: %s (forced)\n", msg.c_str());
  }

  const std::string gate_path = cfg.out_dir + "/gate.ckpt";
  GateModel gate = load_gate_model(gate_path);
  check_artifact_hash(load_checkpoint(gate_path).meta, gate_path, hash, force);

  const std::string s1_path = cfg.out_dir + "/diffusion_stage1.ckpt";
  LoadedStage1 s1 = load_stage1(s1_path);
  check_artifact_hash(s1.meta, s1_path, hash, force);
  int ckpt_T = s1.meta.value("timesteps", 0);
  if (ckpt_T != cfg.schedule.timesteps)
    throw CliError("denoiser was trained with " + std::to_string(ckpt_T) +
                   " timesteps but the config says " +
                   std::to_string(cfg.schedule.timesteps));

  const std::string s2_path = cfg.out_dir + "/diffusion_stage2.ckpt";
  bool with_control = fs::exists(s2_path);
  LoadedStage2 s2;
  if (with_control) {
    s2 = load_stage2(s1.net, s2_path, force);
    check_artifact_hash(s2.meta, s2_path, hash, force);
  }

  CovariateStats stats = stats_from_json(s1.meta.at("covariate_stats"));
  if (m.splits.test.empty()) throw CliError("manifest has an empty test split");
  PairedDataset pairs = pairs_from_disk(dir, m, m.splits.test, stats,
                                        cfg.eval.min_age_gap, cfg.eval.max_pairs);

  NoiseSchedule sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                      cfg.schedule.beta_end);
  SamplerConfig sc{cfg.sampler.num_steps, cfg.sampler.eta, cfg.sampler.num_latent_samples};
  RandomFeatureExtractor phi = make_random_features(kRpdFeatureSeed);

  EvalReport report = evaluate_pipeline(pairs, gate, s1.net,
                                        with_control ? &s2.control : nullptr, sched, sc,
                                        phi, cfg.seed);
  save_report_json(cfg.out_dir + "/report.json", report);
  save_report_csv(cfg.out_dir + "/report.csv", report);
  std::printf("%zu test pairs (min gap %.1f), %s\n", report.records.size(),
              cfg.eval.min_age_gap, with_control ? "with control branch" : "stage-1 only");
  std::fputs(summary_table(report).c_str(), stdout);
  std::printf("wrote %s and %s\n", (cfg.out_dir + "/report.json").c_str(),
              (cfg.out_dir + "/report.csv").c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bench-scan

int cmd_bench_scan(const RunConfig& cfg) {
  constexpr int M = 64, N = 16;
  const std::vector<int64_t> lengths{256, 512, 1024, 2048};

  Rng rng(cfg.seed);
  SsmLayer selective = make_ssm_layer(M, N, rng);
  SsmLayer lti = make_lti_ssm_layer(M, N, rng);
  SelfAttention attn = make_self_attention(M, rng);

  struct Row {
    const char* mode;
    int64_t L;
    double seconds;
    int64_t peak_bytes;
  };
  std::vector<Row> rows;

  auto measure = [&](const char* mode, int64_t L, auto&& op) {
    Tensor x = Tensor::randn({L, M}, rng);
    Tensor xb = reshape(x, {1, L, M});
    NoGradScope ng;
    op(x, xb);  // warm-up
    int64_t base = AllocationStats::current_bytes();
    AllocationStats::reset_peak();
    op(x, xb);
    int64_t peak = AllocationStats::peak_bytes() - base;
    double best = 1e300;
    double spent = 0.0;
    for (int rep = 0; rep < 10 && spent < 0.5; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      op(x, xb);
      double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                      .count();
      best = std::min(best, dt);
      spent += dt;
    }
    rows.push_back({mode, L, best, peak});
  };

  for (int64_t L : lengths) {
    measure("selective_scan", L,
            [&](const Tensor& x, const Tensor&) { ssm_scan_recurrent(x, selective, true); });
    measure("lti_kernel_conv", L,
            [&](const Tensor& x, const Tensor&) { ssm_kernel_conv(x, lti); });
    measure("naive_attention", L,
            [&](const Tensor&, const Tensor& xb) { naive_self_attention(xb, attn); });
  }

  fs::create_directories(cfg.out_dir);
  std::string csv = "mode,L,seconds,peak_bytes\n";
  char line[128];
  for (const Row& r : rows) {
    std::snprintf(line, sizeof line, "%s,%lld,%.9f,%lld\n", r.mode,
                  static_cast<long long>(r.L), r.seconds,
                  static_cast<long long>(r.peak_bytes));
    csv += line;
  }
  atomic_write_file(cfg.out_dir + "/bench_scan.csv", csv);

  std::printf("%-16s %6s %12s %14s\n", "mode", "L", "seconds", "peak_bytes");
  for (const Row& r : rows)
    std::printf("%-16s %6lld %12.6f %14lld\n", r.mode, static_cast<long long>(r.L),
                r.seconds, static_cast<long long>(r.peak_bytes));

  auto time_of = [&](const char* mode, int64_t L) {
    for (const Row& r : rows)
      if (r.L == L && std::string(r.mode) == mode) return r.seconds;
    return 0.0;
  };
  std::printf("t(2048)/t(1024): selective_scan %.2f, naive_attention %.2f\n",
              time_of("selective_scan", 2048) / time_of("selective_scan", 1024),
              time_of("naive_attention", 2048) / time_of("naive_attention", 1024));
  std::printf("wrote %s\n", (cfg.out_dir + "/bench_scan.csv").c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

int cmd_grad_check(const RunConfig& cfg, int instances) {
  GradSuiteReport rep = run_grad_suite(cfg.seed, instances, 1e-4);
  std::fputs(grad_suite_text(rep).c_str(), stdout);
  if (!rep.all_pass) throw CliError("gradient suite reported failures");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale longitudinal image forecasting pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args, gate_args, diff_args, sample_args, eval_args, bench_args,
      grad_args;
  int diff_stage = 1;
  int sample_subject = 0, sample_visit = 0;
  double sample_target_age = 0.0;
  int grad_instances = 10;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic cohort");
  add_common(gen, gen_args);
  CLI::App* tg = app.add_subcommand("train-gate", "train the autoencoder");
  add_common(tg, gate_args);
  CLI::App* td = app.add_subcommand("train-diffusion", "train a denoiser stage");
  add_common(td, diff_args);
  td->add_option("--stage", diff_stage, "1 = denoiser, 2 = control branch")
      ->check(CLI::IsMember({1, 2}))
      ->required();
  CLI::App* sm = app.add_subcommand("sample", "forecast one follow-up image");
  add_common(sm, sample_args);
  sm->add_option("--subject", sample_subject, "cohort index")->required();
  sm->add_option("--visit", sample_visit, "baseline visit index (default 0)");
  sm->add_option("--target-age", sample_target_age, "age to forecast")->required();
  CLI::App* ev = app.add_subcommand("evaluate", "score the test split");
  add_common(ev, eval_args);
  CLI::App* bs = app.add_subcommand("bench-scan", "sequence-mixer scaling benchmark");
  add_common(bs, bench_args);
  CLI::App* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  add_common(gc, grad_args);
  gc->add_option("--instances", grad_instances, "random instances per op");

  CLI11_PARSE(app, argc, argv);

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    if (gen->parsed()) return cmd_gen_data(resolve_config(gen_args));
    if (tg->parsed()) return cmd_train_gate(resolve_config(gate_args), gate_args.force);
    if (td->parsed())
      return cmd_train_diffusion(resolve_config(diff_args), diff_stage, diff_args.force);
    if (sm->parsed())
      return cmd_sample(resolve_config(sample_args), sample_subject, sample_visit,
                        sample_target_age);
    if (ev->parsed()) return cmd_evaluate(resolve_config(eval_args), eval_args.force);
    if (bs->parsed()) return cmd_bench_scan(resolve_config(bench_args));
    if (gc->parsed()) return cmd_grad_check(resolve_config(grad_args), grad_instances);
  } catch (const std::exception& e) {
    json err{{"verb", verb}, {"error", e.what()}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  return 0;
}
