#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace climb {

using json = nlohmann::json;

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);

// Full run configuration. Every CLI verb reads one of these from JSON; unset
// fields keep their defaults, so a config file only names what it changes.
// config_hash() is embedded in every artifact a run writes, and evaluate
// refuses to mix artifacts whose hashes disagree.
struct RunConfig {
  uint64_t seed = 42;
  int threads = 1;
  std::string out_dir = "runs/default";

  struct Data {
    int n_subjects = 200;
    int image_size = 32;
    int min_visits = 2;
    int max_visits = 5;
    double baseline_age_lo = 55.0;
    double baseline_age_hi = 80.0;
    std::vector<double> split_ratios = {0.80, 0.05, 0.15};
  } data;

  struct Gate {
    int latent_channels = 4;
    int base_width = 24;
    int groups = 8;
    double lambda_rec = 1.0;
    double lambda_sd = 0.05;
    double lambda_perc = 0.1;
    double lambda_adv = 0.0;
    int sliced_directions = 64;   // K
    double sliced_power = 2.0;    // p
    int batch_size = 4;
    int iters = 2000;
    double lr = 1e-4;
    int checkpoint_every = 500;
  } gate;

  struct Schedule {
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
  } schedule;

  struct Denoiser {
    int base_width = 32;
    std::vector<int> level_mults = {1, 2};
    int blocks_per_level = 1;
    int ssm_state_size = 16;
    int ssm_expand = 2;
    int conv1d_width = 4;
    int token_width = 32;
    int time_embed_width = 32;
    int groups = 8;
    bool bidirectional = true;
  } denoiser;

  struct TrainDiffusion {
    int batch_size = 8;
    int stage1_iters = 2500;
    int stage2_iters = 1200;
    double lr = 1e-4;
    int checkpoint_every = 500;
  } train_diffusion;

  struct Sampler {
    int num_steps = 25;
    double eta = 0.0;
    int num_latent_samples = 10;
  } sampler;

  struct Eval {
    double min_age_gap = 0.0;
    int max_pairs = 0;  // 0 = no cap
  } eval;

  json to_json() const;
  static RunConfig from_json(const json& j);
  static RunConfig from_file(const std::string& path);

  // Field-level validation; returns one message per violated constraint,
  // empty when the config is usable.
  std::vector<std::string> validate() const;

  // FNV-1a over the canonical (key-sorted, compact) JSON form.
  uint64_t config_hash() const;
};

}  // namespace climb
