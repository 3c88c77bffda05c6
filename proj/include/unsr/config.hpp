#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "unsr/envs.hpp"
#include "unsr/learner.hpp"

namespace unsr {

// Everything a training run needs, read from one JSON document. Unknown keys
// are errors, not warnings, so a typo cannot silently run a default
// experiment. total_steps defaults per environment when the key is absent.
struct TrainConfig {
  std::string env = "pp-grid";
  PpGridConfig pp;  // consulted only when env == "pp-grid"
  MixKind mixer = MixKind::kUnsr;
  ZVariant z_source = ZVariant::kFull;
  long total_steps = 0;  // 0 means per-env default
  double gamma = 0.99;
  double lr = 5e-4;
  long buffer_episodes = 5000;
  long batch_size = 32;
  long target_update = 200;
  double grad_clip = 10.0;
  double eps_start = 1.0;
  double eps_end = 0.05;
  long eps_anneal_steps = 5000;
  long test_interval = 2000;
  long test_episodes = 32;
  long d = 32;
  long d_z = 32;
  long enc_heads = 3;
  long enc_blocks = 2;
  long q_hidden = 64;
  long mix_embed = 32;
  long mix_heads = 4;
  long hyper_hidden = 64;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";

  long resolved_total_steps() const {
    if (total_steps > 0) return total_steps;
    return env == "pp-grid" ? 200000 : 20000;
  }

  void validate() const {
    auto pos = [](double v, const char* k) {
      if (!(v > 0)) throw UsageError(std::string("config: ") + k + " must be positive");
    };
    if (env != "pp-grid" && env != "coordination-game" && env != "nonmono-game")
      throw UsageError("config: unknown env \"" + env + "\"");
    if (env == "pp-grid") pp.validate();
    if (total_steps < 0) throw UsageError("config: total_steps must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw UsageError("config: gamma must be in (0, 1]");
    pos(lr, "lr");
    pos(static_cast<double>(buffer_episodes), "buffer_episodes");
    pos(static_cast<double>(batch_size), "batch_size");
    pos(static_cast<double>(target_update), "target_update");
    pos(grad_clip, "grad_clip");
    if (eps_start < 0.0 || eps_start > 1.0 || eps_end < 0.0 || eps_end > 1.0 ||
        eps_end > eps_start)
      throw UsageError("config: epsilon schedule must satisfy 0 <= eps_end <= eps_start <= 1");
    pos(static_cast<double>(eps_anneal_steps), "eps_anneal_steps");
    pos(static_cast<double>(test_interval), "test_interval");
    pos(static_cast<double>(test_episodes), "test_episodes");
    if (batch_size > buffer_episodes)
      throw UsageError("config: batch_size exceeds buffer_episodes");
    pos(static_cast<double>(d), "encoder.d");
    pos(static_cast<double>(d_z), "encoder.d_z");
    pos(static_cast<double>(enc_heads), "encoder.heads");
    pos(static_cast<double>(enc_blocks), "encoder.blocks");
    pos(static_cast<double>(q_hidden), "encoder.q_hidden");
    pos(static_cast<double>(mix_embed), "mixing.embed");
    pos(static_cast<double>(mix_heads), "mixing.heads");
    pos(static_cast<double>(hyper_hidden), "mixing.hyper_hidden");
    if (out_dir.empty()) throw UsageError("config: out_dir must be non-empty");
  }
};

namespace cfg_detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::set<std::string>& known,
                           const std::string& prefix) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw UsageError("config: unknown key \"" + prefix + it.key() + "\"");
}

inline double get_double(const json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number()) throw UsageError("config: key \"" + key + "\" must be a number");
  return v.get<double>();
}

inline long get_long(const json& j, const std::string& key, long fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (v.is_number_integer()) return v.get<long>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    const long r = static_cast<long>(d);
    if (static_cast<double>(r) == d) return r;
  }
  throw UsageError("config: key \"" + key + "\" must be an integer");
}

inline std::string get_string(const json& j, const std::string& key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_string()) throw UsageError("config: key \"" + key + "\" must be a string");
  return v.get<std::string>();
}

}  // namespace cfg_detail

inline TrainConfig parse_train_config(const std::string& text) {
  using cfg_detail::get_double;
  using cfg_detail::get_long;
  using cfg_detail::get_string;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: parse error: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("config: document root must be an object");
  cfg_detail::reject_unknown(
      j,
      {"env", "env_params", "mixer", "z_source", "total_steps", "gamma", "lr",
       "buffer_episodes", "batch_size", "target_update", "grad_clip", "eps_start", "eps_end",
       "eps_anneal_steps", "test_interval", "test_episodes", "encoder", "mixing", "seed",
       "out_dir"},
      "");

  TrainConfig c;
  c.env = get_string(j, "env", c.env);
  if (j.contains("env_params")) {
    if (c.env != "pp-grid")
      throw UsageError("config: env_params is only accepted for pp-grid");
    const auto& p = j.at("env_params");
    if (!p.is_object()) throw UsageError("config: env_params must be an object");
    cfg_detail::reject_unknown(
        p,
        {"size", "n_predators", "n_prey", "sight", "episode_limit", "capture_reward",
         "step_cost"},
        "env_params.");
    c.pp.size = get_long(p, "size", c.pp.size);
    c.pp.n_predators = get_long(p, "n_predators", c.pp.n_predators);
    c.pp.n_prey = get_long(p, "n_prey", c.pp.n_prey);
    c.pp.sight = get_long(p, "sight", c.pp.sight);
    c.pp.episode_limit = get_long(p, "episode_limit", c.pp.episode_limit);
    c.pp.capture_reward = get_double(p, "capture_reward", c.pp.capture_reward);
    c.pp.step_cost = get_double(p, "step_cost", c.pp.step_cost);
  }
  c.mixer = mix_kind_from(get_string(j, "mixer", mix_kind_name(c.mixer)));
  c.z_source = variant_from(get_string(j, "z_source", variant_name(c.z_source)));
  c.total_steps = get_long(j, "total_steps", c.total_steps);
  c.gamma = get_double(j, "gamma", c.gamma);
  c.lr = get_double(j, "lr", c.lr);
  c.buffer_episodes = get_long(j, "buffer_episodes", c.buffer_episodes);
  c.batch_size = get_long(j, "batch_size", c.batch_size);
  c.target_update = get_long(j, "target_update", c.target_update);
  c.grad_clip = get_double(j, "grad_clip", c.grad_clip);
  c.eps_start = get_double(j, "eps_start", c.eps_start);
  c.eps_end = get_double(j, "eps_end", c.eps_end);
  c.eps_anneal_steps = get_long(j, "eps_anneal_steps", c.eps_anneal_steps);
  c.test_interval = get_long(j, "test_interval", c.test_interval);
  c.test_episodes = get_long(j, "test_episodes", c.test_episodes);
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    if (!e.is_object()) throw UsageError("config: encoder must be an object");
    cfg_detail::reject_unknown(e, {"d", "d_z", "heads", "blocks", "q_hidden"}, "encoder.");
    c.d = get_long(e, "d", c.d);
    c.d_z = get_long(e, "d_z", c.d_z);
    c.enc_heads = get_long(e, "heads", c.enc_heads);
    c.enc_blocks = get_long(e, "blocks", c.enc_blocks);
    c.q_hidden = get_long(e, "q_hidden", c.q_hidden);
  }
  if (j.contains("mixing")) {
    const auto& m = j.at("mixing");
    if (!m.is_object()) throw UsageError("config: mixing must be an object");
    cfg_detail::reject_unknown(m, {"embed", "heads", "hyper_hidden"}, "mixing.");
    c.mix_embed = get_long(m, "embed", c.mix_embed);
    c.mix_heads = get_long(m, "heads", c.mix_heads);
    c.hyper_hidden = get_long(m, "hyper_hidden", c.hyper_hidden);
  }
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    if (s.is_number_unsigned())
      c.seed = s.get<std::uint64_t>();
    else if (s.is_number_integer() && s.get<long long>() >= 0)
      c.seed = static_cast<std::uint64_t>(s.get<long long>());
    else
      throw UsageError("config: key \"seed\" must be a non-negative integer");
  }
  c.out_dir = get_string(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("config: cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_train_config(buf.str());
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["env"] = c.env;
  if (c.env == "pp-grid")
    j["env_params"] = {{"size", c.pp.size},
                       {"n_predators", c.pp.n_predators},
                       {"n_prey", c.pp.n_prey},
                       {"sight", c.pp.sight},
                       {"episode_limit", c.pp.episode_limit},
                       {"capture_reward", c.pp.capture_reward},
                       {"step_cost", c.pp.step_cost}};
  j["mixer"] = mix_kind_name(c.mixer);
  j["z_source"] = variant_name(c.z_source);
  j["total_steps"] = c.resolved_total_steps();
  j["gamma"] = c.gamma;
  j["lr"] = c.lr;
  j["buffer_episodes"] = c.buffer_episodes;
  j["batch_size"] = c.batch_size;
  j["target_update"] = c.target_update;
  j["grad_clip"] = c.grad_clip;
  j["eps_start"] = c.eps_start;
  j["eps_end"] = c.eps_end;
  j["eps_anneal_steps"] = c.eps_anneal_steps;
  j["test_interval"] = c.test_interval;
  j["test_episodes"] = c.test_episodes;
  j["encoder"] = {{"d", c.d},
                  {"d_z", c.d_z},
                  {"heads", c.enc_heads},
                  {"blocks", c.enc_blocks},
                  {"q_hidden", c.q_hidden}};
  j["mixing"] = {{"embed", c.mix_embed}, {"heads", c.mix_heads}, {"hyper_hidden", c.hyper_hidden}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j;
}

inline std::unique_ptr<Env> make_env_from(const TrainConfig& c) { return make_env(c.env, c.pp); }

inline LearnConfig learn_config_from(const TrainConfig& c) {
  LearnConfig l;
  l.mixer = c.mixer;
  l.variant = c.z_source;
  l.gamma = c.gamma;
  l.lr = c.lr;
  l.clip_norm = c.grad_clip;
  l.batch_size = c.batch_size;
  l.target_interval = c.target_update;
  l.eps_start = c.eps_start;
  l.eps_end = c.eps_end;
  l.eps_anneal_steps = c.eps_anneal_steps;
  l.d = c.d;
  l.d_z = c.d_z;
  l.enc_heads = c.enc_heads;
  l.enc_blocks = c.enc_blocks;
  l.q_hidden = c.q_hidden;
  l.mix_embed = c.mix_embed;
  l.mix_heads = c.mix_heads;
  l.hyper_hidden = c.hyper_hidden;
  return l;
}

}  // namespace unsr
