#include "climb/config.hpp"

#include <fstream>
#include <stdexcept>

namespace climb {

uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["out_dir"] = out_dir;
  j["data"] = {{"n_subjects", data.n_subjects},
               {"image_size", data.image_size},
               {"min_visits", data.min_visits},
               {"max_visits", data.max_visits},
               {"baseline_age_lo", data.baseline_age_lo},
               {"baseline_age_hi", data.baseline_age_hi},
               {"split_ratios", data.split_ratios}};
  j["gate"] = {{"latent_channels", gate.latent_channels},
               {"base_width", gate.base_width},
               {"groups", gate.groups},
               {"lambda_rec", gate.lambda_rec},
               {"lambda_sd", gate.lambda_sd},
               {"lambda_perc", gate.lambda_perc},
               {"lambda_adv", gate.lambda_adv},
               {"sliced_directions", gate.sliced_directions},
               {"sliced_power", gate.sliced_power},
               {"batch_size", gate.batch_size},
               {"iters", gate.iters},
               {"lr", gate.lr},
               {"checkpoint_every", gate.checkpoint_every}};
  j["schedule"] = {{"timesteps", schedule.timesteps},
                   {"beta_start", schedule.beta_start},
                   {"beta_end", schedule.beta_end}};
  j["denoiser"] = {{"base_width", denoiser.base_width},
                   {"level_mults", denoiser.level_mults},
                   {"blocks_per_level", denoiser.blocks_per_level},
                   {"ssm_state_size", denoiser.ssm_state_size},
                   {"ssm_expand", denoiser.ssm_expand},
                   {"conv1d_width", denoiser.conv1d_width},
                   {"token_width", denoiser.token_width},
                   {"time_embed_width", denoiser.time_embed_width},
                   {"groups", denoiser.groups},
                   {"bidirectional", denoiser.bidirectional}};
  j["train_diffusion"] = {{"batch_size", train_diffusion.batch_size},
                          {"stage1_iters", train_diffusion.stage1_iters},
                          {"stage2_iters", train_diffusion.stage2_iters},
                          {"lr", train_diffusion.lr},
                          {"checkpoint_every", train_diffusion.checkpoint_every}};
  j["sampler"] = {{"num_steps", sampler.num_steps},
                  {"eta", sampler.eta},
                  {"num_latent_samples", sampler.num_latent_samples}};
  j["eval"] = {{"min_age_gap", eval.min_age_gap}, {"max_pairs", eval.max_pairs}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("data")) {
    const json& d = j["data"];
    c.data.n_subjects = d.value("n_subjects", c.data.n_subjects);
    c.data.image_size = d.value("image_size", c.data.image_size);
    c.data.min_visits = d.value("min_visits", c.data.min_visits);
    c.data.max_visits = d.value("max_visits", c.data.max_visits);
    c.data.baseline_age_lo = d.value("baseline_age_lo", c.data.baseline_age_lo);
    c.data.baseline_age_hi = d.value("baseline_age_hi", c.data.baseline_age_hi);
    c.data.split_ratios = d.value("split_ratios", c.data.split_ratios);
  }
  if (j.contains("gate")) {
    const json& g = j["gate"];
    c.gate.latent_channels = g.value("latent_channels", c.gate.latent_channels);
    c.gate.base_width = g.value("base_width", c.gate.base_width);
    c.gate.groups = g.value("groups", c.gate.groups);
    c.gate.lambda_rec = g.value("lambda_rec", c.gate.lambda_rec);
    c.gate.lambda_sd = g.value("lambda_sd", c.gate.lambda_sd);
    c.gate.lambda_perc = g.value("lambda_perc", c.gate.lambda_perc);
    c.gate.lambda_adv = g.value("lambda_adv", c.gate.lambda_adv);
    c.gate.sliced_directions = g.value("sliced_directions", c.gate.sliced_directions);
    c.gate.sliced_power = g.value("sliced_power", c.gate.sliced_power);
    c.gate.batch_size = g.value("batch_size", c.gate.batch_size);
    c.gate.iters = g.value("iters", c.gate.iters);
    c.gate.lr = g.value("lr", c.gate.lr);
    c.gate.checkpoint_every = g.value("checkpoint_every", c.gate.checkpoint_every);
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    c.schedule.timesteps = s.value("timesteps", c.schedule.timesteps);
    c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
    c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
  }
  if (j.contains("denoiser")) {
    const json& d = j["denoiser"];
    c.denoiser.base_width = d.value("base_width", c.denoiser.base_width);
    c.denoiser.level_mults = d.value("level_mults", c.denoiser.level_mults);
    c.denoiser.blocks_per_level = d.value("blocks_per_level", c.denoiser.blocks_per_level);
    c.denoiser.ssm_state_size = d.value("ssm_state_size", c.denoiser.ssm_state_size);
    c.denoiser.ssm_expand = d.value("ssm_expand", c.denoiser.ssm_expand);
    c.denoiser.conv1d_width = d.value("conv1d_width", c.denoiser.conv1d_width);
    c.denoiser.token_width = d.value("token_width", c.denoiser.token_width);
    c.denoiser.time_embed_width = d.value("time_embed_width", c.denoiser.time_embed_width);
    c.denoiser.groups = d.value("groups", c.denoiser.groups);
    c.denoiser.bidirectional = d.value("bidirectional", c.denoiser.bidirectional);
  }
  if (j.contains("train_diffusion")) {
    const json& t = j["train_diffusion"];
    c.train_diffusion.batch_size = t.value("batch_size", c.train_diffusion.batch_size);
    c.train_diffusion.stage1_iters = t.value("stage1_iters", c.train_diffusion.stage1_iters);
    c.train_diffusion.stage2_iters = t.value("stage2_iters", c.train_diffusion.stage2_iters);
    c.train_diffusion.lr = t.value("lr", c.train_diffusion.lr);
    c.train_diffusion.checkpoint_every =
        t.value("checkpoint_every", c.train_diffusion.checkpoint_every);
  }
  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    c.sampler.num_steps = s.value("num_steps", c.sampler.num_steps);
    c.sampler.eta = s.value("eta", c.sampler.eta);
    c.sampler.num_latent_samples = s.value("num_latent_samples", c.sampler.num_latent_samples);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    c.eval.min_age_gap = e.value("min_age_gap", c.eval.min_age_gap);
    c.eval.max_pairs = e.value("max_pairs", c.eval.max_pairs);
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> errs;
  auto check = [&errs](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  check(threads >= 1, "threads must be >= 1");
  check(!out_dir.empty(), "out_dir must not be empty");
  check(data.n_subjects >= 1, "data.n_subjects must be >= 1");
  check(data.image_size >= 8 && data.image_size % 4 == 0,
        "data.image_size must be >= 8 and divisible by 4");
  check(data.min_visits >= 1 && data.max_visits >= data.min_visits,
        "data.min_visits/max_visits must satisfy 1 <= min <= max");
  check(data.baseline_age_lo < data.baseline_age_hi,
        "data.baseline_age_lo must be below baseline_age_hi");
  check(data.split_ratios.size() == 3, "data.split_ratios must have 3 entries");
  if (data.split_ratios.size() == 3) {
    double sum = data.split_ratios[0] + data.split_ratios[1] + data.split_ratios[2];
    check(std::abs(sum - 1.0) < 1e-9, "data.split_ratios must sum to 1");
    for (double r : data.split_ratios) check(r >= 0.0, "data.split_ratios must be nonnegative");
  }
  check(gate.latent_channels >= 1, "gate.latent_channels must be >= 1");
  check(gate.base_width >= 4, "gate.base_width must be >= 4");
  check(gate.groups >= 1, "gate.groups must be >= 1");
  check(gate.lambda_rec >= 0 && gate.lambda_sd >= 0 && gate.lambda_perc >= 0 &&
            gate.lambda_adv >= 0,
        "gate loss weights must be nonnegative");
  check(gate.sliced_directions >= 1, "gate.sliced_directions must be >= 1");
  check(gate.sliced_power >= 1.0, "gate.sliced_power must be >= 1");
  check(gate.batch_size >= 1, "gate.batch_size must be >= 1");
  check(gate.iters >= 1, "gate.iters must be >= 1");
  check(gate.lr > 0, "gate.lr must be positive");
  check(gate.checkpoint_every >= 1, "gate.checkpoint_every must be >= 1");
  check(schedule.timesteps >= 2, "schedule.timesteps must be >= 2");
  check(schedule.beta_start > 0 && schedule.beta_start < 1,
        "schedule.beta_start must lie in (0,1)");
  check(schedule.beta_end >= schedule.beta_start && schedule.beta_end < 1,
        "schedule.beta_end must lie in [beta_start,1)");
  check(denoiser.base_width >= 4, "denoiser.base_width must be >= 4");
  check(denoiser.level_mults.size() >= 2, "denoiser.level_mults needs at least 2 levels");
  for (int m : denoiser.level_mults)
    check(m >= 1, "denoiser.level_mults entries must be >= 1");
  check(denoiser.blocks_per_level >= 1, "denoiser.blocks_per_level must be >= 1");
  check(denoiser.ssm_state_size >= 1, "denoiser.ssm_state_size must be >= 1");
  check(denoiser.ssm_expand >= 1, "denoiser.ssm_expand must be >= 1");
  check(denoiser.conv1d_width >= 1, "denoiser.conv1d_width must be >= 1");
  check(denoiser.token_width >= 4, "denoiser.token_width must be >= 4");
  check(denoiser.time_embed_width >= 4, "denoiser.time_embed_width must be >= 4");
  check(denoiser.groups >= 1, "denoiser.groups must be >= 1");
  check(train_diffusion.batch_size >= 1, "train_diffusion.batch_size must be >= 1");
  check(train_diffusion.stage1_iters >= 1, "train_diffusion.stage1_iters must be >= 1");
  check(train_diffusion.stage2_iters >= 1, "train_diffusion.stage2_iters must be >= 1");
  check(train_diffusion.lr > 0, "train_diffusion.lr must be positive");
  check(sampler.num_steps >= 1, "sampler.num_steps must be >= 1");
  check(sampler.num_steps <= schedule.timesteps,
        "sampler.num_steps must not exceed schedule.timesteps");
  check(sampler.eta >= 0.0 && sampler.eta <= 1.0, "sampler.eta must lie in [0,1]");
  check(sampler.num_latent_samples >= 1, "sampler.num_latent_samples must be >= 1");
  check(eval.min_age_gap >= 0.0, "eval.min_age_gap must be nonnegative");
  check(eval.max_pairs >= 0, "eval.max_pairs must be nonnegative");
  return errs;
}

uint64_t RunConfig::config_hash() const {
  // nlohmann objects iterate key-sorted, so dump() is canonical here.
  return fnv1a64(to_json().dump());
}

}  // namespace climb
