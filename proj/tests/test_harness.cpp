#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "unsr/checkpoint.hpp"
#include "unsr/config.hpp"
#include "unsr/metrics.hpp"
#include "unsr/trainer.hpp"

using namespace unsr;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("unsr_harness_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

long count_occurrences(const std::string& hay, const std::string& needle) {
  long n = 0;
  for (std::size_t pos = hay.find(needle); pos != std::string::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

// Forwards a real environment but hides every full-state channel: reading the
// global state throws and the state rows in step results are zeroed.
class BlindEnv : public Env {
 public:
  explicit BlindEnv(std::unique_ptr<Env> inner) : inner_(std::move(inner)) {}
  const EnvSpec& spec() const override { return inner_->spec(); }
  ResetResult reset(std::uint64_t seed) override {
    ResetResult r = inner_->reset(seed);
    r.state = Tensor(1, spec().d_state);
    return r;
  }
  StepResult step(const std::vector<long>& joint) override {
    StepResult r = inner_->step(joint);
    r.state = Tensor(1, spec().d_state);
    return r;
  }
  std::vector<int> avail_actions(long agent) const override {
    return inner_->avail_actions(agent);
  }
  Tensor global_state() const override {
    throw ContractError("global state read during decentralized execution");
  }

 private:
  std::unique_ptr<Env> inner_;
};

TrainConfig tiny_coord_config(const std::string& out_dir) {
  TrainConfig c;
  c.env = "coordination-game";
  c.total_steps = 600;
  c.test_interval = 200;
  c.test_episodes = 8;
  c.buffer_episodes = 64;
  c.batch_size = 8;
  c.target_update = 40;
  c.eps_anneal_steps = 300;
  c.d = 8;
  c.d_z = 8;
  c.enc_heads = 2;
  c.enc_blocks = 1;
  c.q_hidden = 16;
  c.mix_embed = 8;
  c.mix_heads = 2;
  c.hyper_hidden = 16;
  c.seed = 7;
  c.out_dir = out_dir;
  return c;
}

}  // namespace

TEST_CASE("config parses, defaults, and rejects unknown keys") {
  TrainConfig c = parse_train_config(R"({
    "env": "pp-grid",
    "env_params": {"size": 5, "n_predators": 2, "n_prey": 1},
    "mixer": "qmix",
    "z_source": "H",
    "gamma": 0.95,
    "encoder": {"d": 16, "heads": 2},
    "seed": 11,
    "out_dir": "runs/x"
  })");
  CHECK(c.env == "pp-grid");
  CHECK(c.pp.size == 5);
  CHECK(c.pp.n_predators == 2);
  CHECK(c.pp.n_prey == 1);
  CHECK(c.pp.sight == 2);
  CHECK(c.mixer == MixKind::kQmix);
  CHECK(c.z_source == ZVariant::kHidden);
  CHECK(c.gamma == 0.95);
  CHECK(c.d == 16);
  CHECK(c.enc_heads == 2);
  CHECK(c.d_z == 32);
  CHECK(c.seed == 11);
  CHECK(c.resolved_total_steps() == 200000);

  TrainConfig m = parse_train_config(R"({"env": "coordination-game"})");
  CHECK(m.resolved_total_steps() == 20000);
  CHECK(m.mixer == MixKind::kUnsr);
  CHECK(m.z_source == ZVariant::kFull);

  CHECK_THROWS_WITH(parse_train_config(R"({"env": "pp-grid", "learning_rate": 0.1})"),
                    Catch::Matchers::ContainsSubstring("learning_rate"));
  CHECK_THROWS_WITH(
      parse_train_config(R"({"env": "pp-grid", "env_params": {"grid": 9}})"),
      Catch::Matchers::ContainsSubstring("env_params.grid"));
  CHECK_THROWS_WITH(
      parse_train_config(R"({"env": "pp-grid", "encoder": {"width": 8}})"),
      Catch::Matchers::ContainsSubstring("encoder.width"));
  CHECK_THROWS_AS(parse_train_config(R"({"env": "coordination-game", "env_params": {}})"),
                  UsageError);
  CHECK_THROWS_AS(parse_train_config(R"({"env": "flatland"})"), UsageError);
  CHECK_THROWS_AS(parse_train_config(R"({"env": "pp-grid", "lr": -1.0})"), UsageError);
  CHECK_THROWS_AS(parse_train_config(R"({"env": "pp-grid", "lr": "fast"})"), UsageError);
  CHECK_THROWS_AS(parse_train_config(R"({"env": "pp-grid", "batch_size": 2.5})"), UsageError);
  CHECK_THROWS_AS(parse_train_config(R"({"env": "pp-grid", "seed": -3})"), UsageError);
  CHECK_THROWS_AS(parse_train_config("not json"), UsageError);
  CHECK_THROWS_AS(
      parse_train_config(R"({"env": "pp-grid", "batch_size": 64, "buffer_episodes": 16})"),
      UsageError);
}

TEST_CASE("config echo reparses to the same document") {
  TrainConfig c = parse_train_config(R"({"env": "nonmono-game", "mixer": "vdn", "seed": 3})");
  const std::string echo = train_config_to_json(c).dump();
  TrainConfig back = parse_train_config(echo);
  CHECK(train_config_to_json(back).dump() == echo);
  CHECK(back.resolved_total_steps() == c.resolved_total_steps());
  CHECK(back.mixer == MixKind::kVdn);
}

TEST_CASE("metrics round-trip exactly") {
  const std::string dir = temp_dir("metrics");
  const std::string path = dir + "/m.csv";
  std::vector<MetricsRow> rows(3);
  rows[0] = {200, 17, 0.62, 1.0 / 3.0, 2.5e-17, -0.05, 10.0, 1.0, 9.999999999999998};
  rows[1] = {400, 35, 0.43, 0.1, 3.14159, 4.9, 0.0, 0.25, -2.0e-9};
  rows[2] = {600, 51, 0.05, 7e300, 1e-300, 0.3, 19.65, 0.96875, 0.0};
  {
    MetricsWriter w(path);
    for (const auto& r : rows) w.append(r);
  }
  std::vector<MetricsRow> back = read_metrics(path);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].step == rows[i].step);
    CHECK(back[i].episodes == rows[i].episodes);
    for (const char* s : metrics_series_names())
      CHECK(metrics_value(back[i], s) == metrics_value(rows[i], s));
  }

  std::istringstream bad_header("steps,foo\n1,2\n");
  CHECK_THROWS_AS(parse_metrics(bad_header), UsageError);
  std::istringstream short_row(std::string(kMetricsHeader) + "\n1,2,3\n");
  CHECK_THROWS_AS(parse_metrics(short_row), UsageError);
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_metrics(empty), UsageError);
}

TEST_CASE("plot renders points and enforces the schema") {
  std::vector<MetricsRow> rows(2);
  rows[0] = {100, 9, 0.8, 0.5, 1.0, 2.0, 3.0, 0.5, 4.0};
  rows[1] = {200, 22, 0.6, 0.4, 0.9, 2.5, 5.0, 0.75, 4.5};
  const std::string svg = render_plot(rows, {"test_return_mean", "test_success_rate"});
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(count_occurrences(svg, "<circle") == 4);
  CHECK(count_occurrences(svg, "<polyline") == 2);
  CHECK(count_occurrences(svg, "</svg>") == 1);
  CHECK(svg.find("environment steps") != std::string::npos);
  CHECK(svg.find("test_return_mean") != std::string::npos);

  CHECK_THROWS_AS(render_plot({}, {"loss"}), UsageError);
  CHECK_THROWS_AS(render_plot(rows, {}), UsageError);
  CHECK_THROWS_AS(render_plot(rows, {"not_a_column"}), UsageError);
  std::vector<MetricsRow> unsorted = {rows[1], rows[0]};
  CHECK_THROWS_AS(render_plot(unsorted, {"loss"}), UsageError);
  std::vector<MetricsRow> dup = {rows[0], rows[0]};
  CHECK_THROWS_AS(render_plot(dup, {"loss"}), UsageError);

  const std::string dir = temp_dir("plot");
  emit_plot(rows, {"loss"}, dir + "/out.svg");
  CHECK(std::filesystem::exists(dir + "/out.svg"));
}

TEST_CASE("training on the coordination game is deterministic and well formed") {
  const std::string dir_a = temp_dir("train_a");
  const std::string dir_b = temp_dir("train_b");
  TrainConfig ca = tiny_coord_config(dir_a);
  TrainConfig cb = tiny_coord_config(dir_b);

  TrainRunResult ra = run_train(ca);
  TrainRunResult rb = run_train(cb);

  CHECK(ra.env_steps == 600);
  CHECK(ra.episodes == 600);
  CHECK(ra.metrics_rows == 3);

  const std::string ma = slurp(ra.metrics_path);
  CHECK(ma == slurp(rb.metrics_path));

  std::vector<MetricsRow> rows = read_metrics(ra.metrics_path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].step == 200);
  CHECK(rows[1].step == 400);
  CHECK(rows[2].step == 600);
  for (const auto& r : rows) {
    CHECK(r.episodes == r.step);
    CHECK(r.test_success_rate >= 0.0);
    CHECK(r.test_success_rate <= 1.0);
    CHECK(std::isfinite(r.loss));
    CHECK(std::isfinite(r.test_return_mean));
  }
  CHECK(rows[0].epsilon < 1.0);
  CHECK(rows[2].epsilon == 0.05);

  emit_plot(rows, {"test_return_mean"}, dir_a + "/curve.svg");
  CHECK(std::filesystem::exists(dir_a + "/curve.svg"));
}

TEST_CASE("checkpoints round-trip bitwise and reproduce behavior") {
  const std::string dir = temp_dir("ckpt");
  TrainConfig cfg = tiny_coord_config(dir);
  cfg.total_steps = 250;
  TrainRunResult r = run_train(cfg);

  const std::string first = slurp(r.checkpoint_path);
  LoadedRun lr = load_checkpoint(r.checkpoint_path);
  CHECK(lr.run.env_steps == 250);
  CHECK(lr.run.episodes == 250);
  CHECK(lr.config.env == "coordination-game");

  const std::string resaved = dir + "/resaved.json";
  save_checkpoint(resaved, lr.config, *lr.learner, lr.run);
  CHECK(slurp(resaved) == first);

  EvalSummary e1 = run_eval(r.checkpoint_path, 16);
  EvalSummary e2 = run_eval(r.checkpoint_path, 16);
  CHECK(e1.return_mean == e2.return_mean);
  CHECK(e1.success_rate == e2.success_rate);
  CHECK(e1.lengths == e2.lengths);
  for (long len : e1.lengths) CHECK(len == 1);
  CHECK(e1.success_rate >= 0.0);
  CHECK(e1.success_rate <= 1.0);

  // greedy actions preserved on 100 probe observations
  auto probe_env = make_env_from(lr.config);
  const long n = probe_env->spec().n_agents;
  const long n_actions = probe_env->spec().n_actions;
  std::vector<std::vector<long>> before;
  {
    LoadedRun a = load_checkpoint(r.checkpoint_path);
    for (int k = 0; k < 100; ++k) {
      ResetResult rr = probe_env->reset(5000 + static_cast<std::uint64_t>(k));
      TeamForward tf = a.learner->team_forward(rr.obs, init_hidden(a.learner->enc_dims(), n));
      RngStream dummy("probe", 0);
      std::vector<long> joint;
      for (long i = 0; i < n; ++i) {
        Tensor row(1, n_actions);
        for (long q = 0; q < n_actions; ++q) row(0, q) = tf.q(i, q);
        joint.push_back(act(row, probe_env->avail_actions(i), 0.0, dummy));
      }
      before.push_back(joint);
    }
  }
  {
    LoadedRun b = load_checkpoint(resaved);
    for (int k = 0; k < 100; ++k) {
      ResetResult rr = probe_env->reset(5000 + static_cast<std::uint64_t>(k));
      TeamForward tf = b.learner->team_forward(rr.obs, init_hidden(b.learner->enc_dims(), n));
      RngStream dummy("probe", 0);
      std::vector<long> joint;
      for (long i = 0; i < n; ++i) {
        Tensor row(1, n_actions);
        for (long q = 0; q < n_actions; ++q) row(0, q) = tf.q(i, q);
        joint.push_back(act(row, probe_env->avail_actions(i), 0.0, dummy));
      }
      CHECK(joint == before[static_cast<std::size_t>(k)]);
    }
  }
}

TEST_CASE("checkpoint refuses tampering and version drift") {
  const std::string dir = temp_dir("ckpt_bad");
  TrainConfig cfg = tiny_coord_config(dir);
  cfg.total_steps = 60;
  cfg.test_interval = 60;
  TrainRunResult r = run_train(cfg);
  const std::string text = slurp(r.checkpoint_path);

  {
    nlohmann::json j = nlohmann::json::parse(text);
    j["format_version"] = 2;
    std::ofstream(dir + "/v2.json") << j.dump();
    CHECK_THROWS_WITH(load_checkpoint(dir + "/v2.json"),
                      Catch::Matchers::ContainsSubstring("version 2") &&
                          Catch::Matchers::ContainsSubstring("version 1"));
  }
  {
    nlohmann::json j = nlohmann::json::parse(text);
    j["params"]["enc.emb.w"]["shape"] = {1, 1};
    std::ofstream(dir + "/shape.json") << j.dump();
    CHECK_THROWS_WITH(load_checkpoint(dir + "/shape.json"),
                      Catch::Matchers::ContainsSubstring("enc.emb.w"));
  }
  {
    nlohmann::json j = nlohmann::json::parse(text);
    j.erase("rms_acc");
    std::ofstream(dir + "/missing.json") << j.dump();
    CHECK_THROWS_WITH(load_checkpoint(dir + "/missing.json"),
                      Catch::Matchers::ContainsSubstring("rms_acc"));
  }
  {
    std::ofstream(dir + "/corrupt.json") << "{ definitely not json";
    CHECK_THROWS_WITH(load_checkpoint(dir + "/corrupt.json"),
                      Catch::Matchers::ContainsSubstring("parse error"));
  }
  CHECK_THROWS_AS(load_checkpoint(dir + "/does_not_exist.json"), RuntimeError);
}

TEST_CASE("evaluation runs decentralized") {
  const std::string dir = temp_dir("blind");
  TrainConfig cfg = tiny_coord_config(dir);
  cfg.total_steps = 120;
  cfg.test_interval = 120;
  TrainRunResult r = run_train(cfg);
  LoadedRun lr = load_checkpoint(r.checkpoint_path);

  EvalSummary seeing = evaluate_greedy(*lr.env, *lr.learner, 12);
  BlindEnv blind(make_env_from(lr.config));
  EvalSummary blinded = evaluate_greedy(blind, *lr.learner, 12);
  CHECK(seeing.return_mean == blinded.return_mean);
  CHECK(seeing.success_rate == blinded.success_rate);
  CHECK(seeing.lengths == blinded.lengths);

  BlindEnv pp(make_env("pp-grid"));
  LearnConfig tiny;
  tiny.d = 8;
  tiny.d_z = 8;
  tiny.enc_heads = 2;
  tiny.enc_blocks = 1;
  tiny.q_hidden = 8;
  tiny.mix_embed = 8;
  tiny.mix_heads = 2;
  tiny.hyper_hidden = 8;
  Learner fresh(pp.spec(), tiny, 9);
  EvalSummary s = evaluate_greedy(pp, fresh, 4);
  CHECK(std::isfinite(s.return_mean));
  for (long len : s.lengths) CHECK(len <= pp.spec().episode_limit);
}

TEST_CASE("pp-grid smoke run with an ablation source") {
  const std::string dir = temp_dir("pp_smoke");
  TrainConfig cfg = parse_train_config(R"({
    "env": "pp-grid",
    "env_params": {"size": 5, "n_predators": 2, "n_prey": 1, "episode_limit": 12},
    "mixer": "unsr",
    "z_source": "O",
    "total_steps": 150,
    "test_interval": 50,
    "test_episodes": 4,
    "buffer_episodes": 32,
    "batch_size": 4,
    "target_update": 10,
    "eps_anneal_steps": 100,
    "encoder": {"d": 8, "d_z": 8, "heads": 2, "blocks": 1, "q_hidden": 8},
    "mixing": {"embed": 8, "heads": 2, "hyper_hidden": 8},
    "seed": 2
  })");
  cfg.out_dir = dir;
  TrainRunResult r = run_train(cfg);
  CHECK(r.env_steps >= 150);
  std::vector<MetricsRow> rows = read_metrics(r.metrics_path);
  CHECK(!rows.empty());
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].step > rows[i - 1].step);
  for (const auto& row : rows) {
    CHECK(row.test_success_rate >= 0.0);
    CHECK(row.test_success_rate <= 1.0);
    CHECK(row.episodes > 0);
  }
  CHECK(std::filesystem::exists(r.checkpoint_path));
}

TEST_CASE("named rng streams are independent and reproducible") {
  RngStream a1("env", 42), a2("env", 42), b("explore", 42);
  std::vector<std::uint64_t> seq1, seq2;
  for (int i = 0; i < 8; ++i) {
    seq1.push_back(a1.next_u64());
    b.next_u64();
    b.next_u64();
  }
  for (int i = 0; i < 8; ++i) seq2.push_back(a2.next_u64());
  CHECK(seq1 == seq2);
  RngStream c("explore", 42);
  CHECK(b.serialize() != c.serialize());

  RngStream d("env", 42);
  RngStream e("env", 43);
  CHECK(d.next_u64() != e.next_u64());

  RngStream f("env", 1);
  f.next_u64();
  f.uniform();
  RngStream g("other", 0);
  g.deserialize(f.serialize());
  for (int i = 0; i < 4; ++i) CHECK(f.next_u64() == g.next_u64());
  CHECK_THROWS_AS(g.deserialize("zz not an engine"), RuntimeError);
}
