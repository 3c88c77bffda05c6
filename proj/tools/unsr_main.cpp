#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unsr/config.hpp"
#include "unsr/gradcheck.hpp"
#include "unsr/model_check.hpp"
#include "unsr/oracle.hpp"
#include "unsr/trainer.hpp"

namespace {

int cmd_gradcheck() {
  bool all_pass = true;
  for (const unsr::OpCheck& c : unsr::run_op_gradchecks(0, 100)) {
    std::printf("%-22s max err %.3e  tol %.0e  [%s]\n", c.name.c_str(), c.max_err, c.tol,
                c.pass ? "pass" : "FAIL");
    all_pass = all_pass && c.pass;
  }
  const unsr::OpCheck full = unsr::full_model_gradcheck(0);
  std::printf("%-22s max err %.3e  tol %.0e  [%s]\n", full.name.c_str(), full.max_err, full.tol,
              full.pass ? "pass" : "FAIL");
  all_pass = all_pass && full.pass;
  return all_pass ? 0 : 2;
}

int cmd_train(const std::string& config_path, long seed, const std::string& out_dir) {
  unsr::TrainConfig cfg = unsr::load_train_config(config_path);
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  unsr::TrainRunResult r = unsr::run_train(cfg, &std::cout);
  std::printf("done: %ld env steps, %ld episodes\n", r.env_steps, r.episodes);
  std::printf("final test_return_mean %s  success_rate %s\n",
              unsr::format_double(r.final_eval.return_mean).c_str(),
              unsr::format_double(r.final_eval.success_rate).c_str());
  std::printf("metrics: %s\ncheckpoint: %s\n", r.metrics_path.c_str(),
              r.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, long episodes) {
  unsr::EvalSummary s = unsr::run_eval(checkpoint_path, episodes);
  std::printf("episodes %zu\n", s.returns.size());
  std::printf("return_mean %s\n", unsr::format_double(s.return_mean).c_str());
  std::printf("success_rate %s\n", unsr::format_double(s.success_rate).c_str());
  std::printf("length_mean %s\n", unsr::format_double(s.length_mean).c_str());
  std::printf("lengths:");
  for (long v : s.lengths) std::printf(" %ld", v);
  std::printf("\n");
  return 0;
}

int cmd_oracle(const std::string& env_name, const std::string& out_dir, long episodes) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw unsr::RuntimeError("oracle: cannot create output directory " + out_dir);

  if (env_name == "coordination-game" || env_name == "nonmono-game") {
    auto env = unsr::make_env(env_name);
    unsr::JointPayoff table = unsr::enumerate_joint_payoffs(*env);
    std::printf("env %s\n", env_name.c_str());
    std::printf("payoff table (rows: agent 0, cols: agent 1):\n");
    for (long a = 0; a < table.payoff.rows(); ++a) {
      for (long b = 0; b < table.payoff.cols(); ++b)
        std::printf("%10s", unsr::format_double(table.payoff(a, b)).c_str());
      std::printf("\n");
    }
    std::printf("argmax (%ld,%ld) value %s\n", table.argmax[0], table.argmax[1],
                unsr::format_double(table.best).c_str());
    const std::string path = out_dir + "/oracle_" + env_name + ".csv";
    std::ofstream out(path);
    if (!out) throw unsr::RuntimeError("oracle: cannot write " + path);
    out << "action_0,action_1,payoff\n";
    for (long a = 0; a < table.payoff.rows(); ++a)
      for (long b = 0; b < table.payoff.cols(); ++b)
        out << a << ',' << b << ',' << unsr::format_double(table.payoff(a, b)) << '\n';
    std::printf("table: %s\n", path.c_str());
    return 0;
  }
  if (env_name == "pp-grid") {
    unsr::PpGridConfig cfg;
    unsr::PpGrid env(cfg);
    nlohmann::json doc;
    doc["env"] = "pp-grid";
    doc["eval_seed_base"] = unsr::kEvalSeedBase;
    doc["episodes"] = episodes;
    nlohmann::json entries = nlohmann::json::array();
    double o_sum = 0.0;
    std::printf("env pp-grid, optimal capture times for the %ld fixed test starts\n", episodes);
    for (long j = 0; j < episodes; ++j) {
      env.reset(unsr::kEvalSeedBase + static_cast<std::uint64_t>(j));
      unsr::CaptureSearch r = unsr::astar_capture_time(cfg, env.state());
      if (!r.found)
        throw unsr::RuntimeError("oracle: no capture plan for seed offset " + std::to_string(j));
      const double o_star = unsr::optimal_return(cfg, r.steps);
      o_sum += o_star;
      std::printf("  seed +%-3ld t* %-3ld o* %s\n", j, r.steps,
                  unsr::format_double(o_star).c_str());
      entries.push_back({{"seed_offset", j}, {"t_star", r.steps}, {"o_star", o_star}});
    }
    doc["entries"] = entries;
    doc["o_star_mean"] = o_sum / static_cast<double>(episodes);
    std::printf("o_star_mean %s\n", unsr::format_double(o_sum / episodes).c_str());
    const std::string path = out_dir + "/oracle_pp-grid.json";
    std::ofstream out(path);
    if (!out) throw unsr::RuntimeError("oracle: cannot write " + path);
    out << doc.dump(1) << '\n';
    std::printf("table: %s\n", path.c_str());
    return 0;
  }
  throw unsr::UsageError("oracle: unknown environment " + env_name);
}

int cmd_plot(const std::string& metrics_path, const std::string& out_path,
             const std::string& series_arg) {
  std::vector<std::string> series;
  std::stringstream ss(series_arg);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) series.push_back(item);
  unsr::emit_plot(unsr::read_metrics(metrics_path), series, out_path);
  std::printf("plot: %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative multi-agent Q-learning lab"};
  app.require_subcommand(1);

  CLI::App* train = app.add_subcommand("train", "Run a training experiment");
  std::string train_config;
  long train_seed = -1;
  std::string train_out;
  train->add_option("--config", train_config, "Config file path")->required();
  train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--out", train_out, "Override the output directory");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint greedily");
  std::string eval_ckpt;
  long eval_episodes = 32;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file path")->required();
  eval->add_option("--episodes", eval_episodes, "Number of test episodes")
      ->check(CLI::PositiveNumber);

  CLI::App* oracle = app.add_subcommand("oracle", "Print exact solutions for an environment");
  std::string oracle_env;
  std::string oracle_out = ".";
  long oracle_episodes = 32;
  oracle->add_option("--env", oracle_env, "Environment name")->required();
  oracle->add_option("--out", oracle_out, "Directory for the emitted table");
  oracle->add_option("--episodes", oracle_episodes, "Fixed test starts to solve (pp-grid)")
      ->check(CLI::PositiveNumber);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op");

  CLI::App* plot = app.add_subcommand("plot", "Render metrics as an SVG chart");
  std::string plot_metrics, plot_out;
  std::string plot_series = "test_return_mean,test_success_rate";
  plot->add_option("--metrics", plot_metrics, "Metrics CSV path")->required();
  plot->add_option("--out", plot_out, "Output SVG path")->required();
  plot->add_option("--series", plot_series, "Comma-separated column names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(train_config, train_seed, train_out);
    if (app.got_subcommand(eval)) return cmd_eval(eval_ckpt, eval_episodes);
    if (app.got_subcommand(oracle)) return cmd_oracle(oracle_env, oracle_out, oracle_episodes);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck();
    if (app.got_subcommand(plot)) return cmd_plot(plot_metrics, plot_out, plot_series);
  } catch (const unsr::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
