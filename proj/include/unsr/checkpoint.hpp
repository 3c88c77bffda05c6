#pragma once

#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unsr/config.hpp"

namespace unsr {

inline constexpr long kCheckpointVersion = 1;

// Run state alongside the learner: counters and the serialized sub-streams.
struct RunState {
  long env_steps = 0;
  long episodes = 0;
  std::string rng_env;
  std::string rng_explore;
  std::string rng_sample;
};

namespace ckpt_detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["data"] = t.values();
  return j;
}

inline void tensor_from_json(const nlohmann::json& j, const std::string& name, Tensor& out) {
  if (!j.contains("shape") || !j.contains("data"))
    throw RuntimeError("checkpoint: array \"" + name + "\" is missing shape or data");
  const auto shape = j.at("shape").get<std::vector<long>>();
  if (shape != out.shape()) {
    std::ostringstream os;
    os << "checkpoint: \"" << name << "\" has shape [";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "], expected " << out.shape_str();
    throw RuntimeError(os.str());
  }
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != out.numel())
    throw RuntimeError("checkpoint: \"" + name + "\" data length does not match its shape");
  std::copy(data.begin(), data.end(), out.values().begin());
}

inline nlohmann::json param_set_to_json(const ParamSet& ps) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < ps.size(); ++i) j[ps[i].name] = tensor_to_json(ps[i].value);
  return j;
}

inline void param_set_from_json(const nlohmann::json& j, const std::string& section,
                                ParamSet& ps) {
  if (!j.is_object()) throw RuntimeError("checkpoint: section \"" + section + "\" malformed");
  if (j.size() != ps.size())
    throw RuntimeError("checkpoint: section \"" + section + "\" holds " +
                       std::to_string(j.size()) + " arrays, expected " +
                       std::to_string(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!j.contains(ps[i].name))
      throw RuntimeError("checkpoint: section \"" + section + "\" is missing \"" + ps[i].name +
                         "\"");
    tensor_from_json(j.at(ps[i].name), section + "." + ps[i].name, ps[i].value);
  }
}

}  // namespace ckpt_detail

inline nlohmann::json checkpoint_to_json(const TrainConfig& cfg, Learner& ln,
                                         const RunState& rs) {
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  j["config"] = train_config_to_json(cfg);
  j["env_steps"] = rs.env_steps;
  j["episodes"] = rs.episodes;
  j["grad_steps"] = ln.grad_steps();
  j["params"] = ckpt_detail::param_set_to_json(ln.live());
  j["target_params"] = ckpt_detail::param_set_to_json(ln.target());
  nlohmann::json acc = nlohmann::json::object();
  for (std::size_t i = 0; i < ln.live().size(); ++i)
    acc[ln.live()[i].name] = ckpt_detail::tensor_to_json(ln.rms_state()[i]);
  j["rms_acc"] = acc;
  j["rng"] = {{"env", rs.rng_env}, {"explore", rs.rng_explore}, {"sample", rs.rng_sample}};
  return j;
}

inline void save_checkpoint(const std::string& path, const TrainConfig& cfg, Learner& ln,
                            const RunState& rs) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("checkpoint: cannot write " + path);
  out << checkpoint_to_json(cfg, ln, rs).dump() << '\n';
  if (!out) throw RuntimeError("checkpoint: write failed on " + path);
}

struct LoadedRun {
  TrainConfig config;
  RunState run;
  std::unique_ptr<Env> env;
  std::unique_ptr<Learner> learner;
};

inline LoadedRun load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("checkpoint: cannot read " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError("checkpoint: parse error in " + path + ": " + e.what());
  }
  if (!j.contains("format_version") || !j.at("format_version").is_number_integer())
    throw RuntimeError("checkpoint: " + path + " lacks a format_version field");
  const long ver = j.at("format_version").get<long>();
  if (ver != kCheckpointVersion)
    throw RuntimeError("checkpoint: format version " + std::to_string(ver) +
                       " is not supported; this build reads version " +
                       std::to_string(kCheckpointVersion));
  for (const char* key : {"config", "env_steps", "episodes", "grad_steps", "params",
                          "target_params", "rms_acc", "rng"})
    if (!j.contains(key))
      throw RuntimeError("checkpoint: " + path + " is missing \"" + std::string(key) + "\"");

  LoadedRun lr;
  lr.config = parse_train_config(j.at("config").dump());
  lr.env = make_env_from(lr.config);
  lr.learner = std::make_unique<Learner>(lr.env->spec(), learn_config_from(lr.config),
                                         lr.config.seed);
  ckpt_detail::param_set_from_json(j.at("params"), "params", lr.learner->live());
  ckpt_detail::param_set_from_json(j.at("target_params"), "target_params",
                                   lr.learner->target());
  const auto& acc = j.at("rms_acc");
  for (std::size_t i = 0; i < lr.learner->live().size(); ++i) {
    const std::string& name = lr.learner->live()[i].name;
    if (!acc.contains(name))
      throw RuntimeError("checkpoint: rms_acc is missing \"" + name + "\"");
    ckpt_detail::tensor_from_json(acc.at(name), "rms_acc." + name,
                                  lr.learner->rms_state()[i]);
  }
  lr.run.env_steps = j.at("env_steps").get<long>();
  lr.run.episodes = j.at("episodes").get<long>();
  lr.learner->set_grad_steps(j.at("grad_steps").get<long>());
  const auto& rng = j.at("rng");
  lr.run.rng_env = rng.at("env").get<std::string>();
  lr.run.rng_explore = rng.at("explore").get<std::string>();
  lr.run.rng_sample = rng.at("sample").get<std::string>();
  return lr;
}

}  // namespace unsr
