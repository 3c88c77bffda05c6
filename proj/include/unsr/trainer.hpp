#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "unsr/checkpoint.hpp"
#include "unsr/metrics.hpp"

namespace unsr {

// Test episodes always start from the same seeds so learning curves from
// different runs, and the oracle values they are compared against, describe
// the same episode set. Episode j uses seed kEvalSeedBase + j.
inline constexpr std::uint64_t kEvalSeedBase = 900000000ull;

struct EvalSummary {
  double return_mean = 0.0;
  double success_rate = 0.0;
  double length_mean = 0.0;
  std::vector<double> returns;
  std::vector<long> lengths;
};

// Greedy decentralized rollouts on fixed seeds. This path consumes only local
// observations, availability masks, and the learner's recurrent state; the
// environment's full state never enters it.
inline EvalSummary evaluate_greedy(Env& env, Learner& ln, long episodes,
                                   std::uint64_t seed_base = kEvalSeedBase) {
  if (episodes <= 0) throw UsageError("evaluate_greedy: episodes must be positive");
  const long n = env.spec().n_agents;
  const long n_actions = env.spec().n_actions;
  RngStream rng("eval", seed_base);  // act() draws once per call; greedy ignores it
  EvalSummary s;
  for (long j = 0; j < episodes; ++j) {
    ResetResult rr = env.reset(seed_base + static_cast<std::uint64_t>(j));
    std::vector<EntityObservation> obs = rr.obs;
    Tensor h = init_hidden(ln.enc_dims(), n);
    double ep_return = 0.0;
    long t = 0;
    bool success = false;
    for (;;) {
      TeamForward tf = ln.team_forward(obs, h);
      std::vector<long> joint(static_cast<std::size_t>(n));
      for (long i = 0; i < n; ++i) {
        Tensor row(1, n_actions);
        for (long a = 0; a < n_actions; ++a) row(0, a) = tf.q(i, a);
        joint[static_cast<std::size_t>(i)] = act(row, env.avail_actions(i), 0.0, rng);
      }
      StepResult sr = env.step(joint);
      ep_return += sr.reward;
      ++t;
      if (sr.terminated || sr.truncated) {
        success = sr.terminated;
        break;
      }
      obs = sr.obs;
      h = tf.h_next;
    }
    s.returns.push_back(ep_return);
    s.lengths.push_back(t);
    s.return_mean += ep_return;
    s.length_mean += static_cast<double>(t);
    s.success_rate += success ? 1.0 : 0.0;
  }
  const double k = static_cast<double>(episodes);
  s.return_mean /= k;
  s.length_mean /= k;
  s.success_rate /= k;
  return s;
}

struct TrainRunResult {
  std::string metrics_path;
  std::string checkpoint_path;
  long env_steps = 0;
  long episodes = 0;
  long metrics_rows = 0;
  EvalSummary final_eval;
};

// One full training run: episode collection with annealed epsilon-greedy, one
// gradient step per collected episode once the buffer can fill a batch,
// periodic greedy evaluation with metrics and checkpoints. Single logical
// thread; determinism comes from the named sub-streams of the run seed.
inline TrainRunResult run_train(const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw RuntimeError("train: cannot create output directory " + cfg.out_dir);

  auto env = make_env_from(cfg);
  auto eval_env = make_env_from(cfg);
  const EnvSpec& spec = env->spec();
  const long n = spec.n_agents;
  LearnConfig lc = learn_config_from(cfg);
  Learner ln(spec, lc, cfg.seed);

  RngStream env_rng("env", cfg.seed);
  RngStream explore_rng("explore", cfg.seed);
  RngStream sample_rng("sample", cfg.seed);
  ReplayBuffer buffer(static_cast<std::size_t>(cfg.buffer_episodes));

  TrainRunResult out;
  out.metrics_path = cfg.out_dir + "/metrics.csv";
  out.checkpoint_path = cfg.out_dir + "/checkpoint.json";
  MetricsWriter metrics(out.metrics_path);

  const long total = cfg.resolved_total_steps();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  long steps = 0, episodes = 0, next_eval = cfg.test_interval, last_row_step = -1;
  double last_loss = nan, last_grad_norm = nan, last_q_tot = nan;
  double window_return = 0.0;
  long window_episodes = 0;

  auto all_avail = [&]() {
    std::vector<std::vector<int>> av;
    for (long i = 0; i < n; ++i) av.push_back(env->avail_actions(i));
    return av;
  };

  auto emit_row = [&](const EvalSummary& ev) {
    MetricsRow r;
    r.step = steps;
    r.episodes = episodes;
    r.epsilon = epsilon_at(lc, steps);
    r.loss = last_loss;
    r.grad_norm = last_grad_norm;
    r.train_return_mean = window_episodes > 0 ? window_return / window_episodes : nan;
    r.test_return_mean = ev.return_mean;
    r.test_success_rate = ev.success_rate;
    r.q_tot_mean = last_q_tot;
    metrics.append(r);
    ++out.metrics_rows;
    last_row_step = steps;
    window_return = 0.0;
    window_episodes = 0;
    if (log)
      (*log) << "step " << r.step << "  episodes " << r.episodes << "  eps "
             << format_double(r.epsilon) << "  loss " << format_double(r.loss)
             << "  test_return " << format_double(r.test_return_mean) << "  success "
             << format_double(r.test_success_rate) << "\n";
  };

  auto snapshot = [&](const EvalSummary& ev) {
    RunState rs;
    rs.env_steps = steps;
    rs.episodes = episodes;
    rs.rng_env = env_rng.serialize();
    rs.rng_explore = explore_rng.serialize();
    rs.rng_sample = sample_rng.serialize();
    save_checkpoint(out.checkpoint_path, cfg, ln, rs);
    out.final_eval = ev;
  };

  while (steps < total) {
    const std::uint64_t episode_seed = env_rng.next_u64();
    ResetResult rr = env->reset(episode_seed);
    Episode ep;
    ep.obs.push_back(rr.obs);
    ep.states.push_back(rr.state);
    ep.avail.push_back(all_avail());
    Tensor h = init_hidden(ln.enc_dims(), n);
    std::vector<EntityObservation> obs = rr.obs;
    double ep_return = 0.0;
    for (;;) {
      const double eps = epsilon_at(lc, steps);
      TeamForward tf = ln.team_forward(obs, h);
      std::vector<long> joint(static_cast<std::size_t>(n));
      for (long i = 0; i < n; ++i) {
        Tensor row(1, spec.n_actions);
        for (long a = 0; a < spec.n_actions; ++a) row(0, a) = tf.q(i, a);
        joint[static_cast<std::size_t>(i)] =
            act(row, ep.avail.back()[static_cast<std::size_t>(i)], eps, explore_rng);
      }
      StepResult sr = env->step(joint);
      ++steps;
      ep_return += sr.reward;
      ep.actions.push_back(joint);
      ep.rewards.push_back(sr.reward);
      ep.obs.push_back(sr.obs);
      ep.states.push_back(sr.state);
      ep.avail.push_back(all_avail());
      obs = sr.obs;
      h = tf.h_next;
      if (sr.terminated || sr.truncated) {
        ep.terminated = sr.terminated;
        break;
      }
    }
    buffer.add(std::move(ep));
    ++episodes;
    window_return += ep_return;
    ++window_episodes;

    if (buffer.size() >= static_cast<std::size_t>(cfg.batch_size)) {
      TrainStats st = ln.train_step(buffer.sample(static_cast<std::size_t>(cfg.batch_size),
                                                  sample_rng));
      last_loss = st.loss;
      last_grad_norm = st.grad_norm;
      last_q_tot = st.q_tot_mean;
    }

    if (steps >= next_eval) {
      EvalSummary ev = evaluate_greedy(*eval_env, ln, cfg.test_episodes, kEvalSeedBase);
      emit_row(ev);
      snapshot(ev);
      while (next_eval <= steps) next_eval += cfg.test_interval;
    }
  }

  if (last_row_step < steps) {
    EvalSummary ev = evaluate_greedy(*eval_env, ln, cfg.test_episodes, kEvalSeedBase);
    emit_row(ev);
    snapshot(ev);
  }
  out.env_steps = steps;
  out.episodes = episodes;
  return out;
}

// Loads a checkpoint and reports greedy performance on the fixed eval seeds.
inline EvalSummary run_eval(const std::string& checkpoint_path, long episodes) {
  LoadedRun lr = load_checkpoint(checkpoint_path);
  return evaluate_greedy(*lr.env, *lr.learner, episodes, kEvalSeedBase);
}

}  // namespace unsr
