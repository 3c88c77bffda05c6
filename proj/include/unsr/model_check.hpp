#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "unsr/envs.hpp"
#include "unsr/gradcheck.hpp"
#include "unsr/learner.hpp"

namespace unsr {

namespace model_check_detail {

// A two-step truncated episode on a small grid, so the audited loss exercises
// recurrence, masking, mixing, and the bootstrap term at once.
inline Episode two_step_episode(std::uint64_t seed) {
  PpGridConfig cfg;
  cfg.size = 4;
  cfg.n_predators = 2;
  cfg.n_prey = 1;
  cfg.episode_limit = 2;
  PpGrid env(cfg);
  RngStream rng("model-check", seed);
  for (int attempt = 0; attempt < 64; ++attempt) {
    ResetResult rr = env.reset(seed * 64 + static_cast<std::uint64_t>(attempt));
    Episode ep;
    auto all_avail = [&]() {
      std::vector<std::vector<int>> av;
      for (long i = 0; i < cfg.n_predators; ++i) av.push_back(env.avail_actions(i));
      return av;
    };
    ep.obs.push_back(rr.obs);
    ep.states.push_back(rr.state);
    ep.avail.push_back(all_avail());
    bool terminated = false;
    for (long t = 0; t < 2 && !terminated; ++t) {
      std::vector<long> joint;
      for (long i = 0; i < cfg.n_predators; ++i) {
        const auto av = env.avail_actions(i);
        long a = 0;
        do {
          a = static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(av.size())));
        } while (!av[static_cast<std::size_t>(a)]);
        joint.push_back(a);
      }
      StepResult sr = env.step(joint);
      ep.actions.push_back(joint);
      ep.rewards.push_back(sr.reward);
      ep.obs.push_back(sr.obs);
      ep.states.push_back(sr.state);
      ep.avail.push_back(all_avail());
      terminated = sr.terminated;
    }
    if (!terminated && ep.length() == 2) {
      ep.terminated = false;
      return ep;
    }
  }
  throw RuntimeError("model check: could not sample a two-step episode");
}

}  // namespace model_check_detail

// End-to-end gradient audit: the TD loss of the complete pipeline against
// central differences. Every parameter tensor is probed at a bounded sample
// of coordinates; the worst relative error is reported.
inline OpCheck full_model_gradcheck(std::uint64_t seed = 0, long coords_per_param = 6,
                                    double h = 1e-5) {
  Episode ep = model_check_detail::two_step_episode(seed + 1);
  PpGridConfig cfg;
  cfg.size = 4;
  cfg.n_predators = 2;
  cfg.n_prey = 1;
  cfg.episode_limit = 2;
  PpGrid env(cfg);
  LearnConfig lc;
  Learner ln(env.spec(), lc, seed);
  std::vector<const Episode*> batch{&ep};

  ln.loss_and_grads(batch);
  RngStream pick("model-check-coords", seed);
  double max_err = 0.0;
  for (std::size_t p = 0; p < ln.live().size(); ++p) {
    Parameter& par = ln.live()[p];
    const std::size_t n = par.value.numel();
    const long probes = std::min<long>(coords_per_param, static_cast<long>(n));
    for (long k = 0; k < probes; ++k) {
      const std::size_t j = static_cast<std::size_t>(pick.uniform_int(n));
      const double saved = par.value.values()[j];
      par.value.values()[j] = saved + h;
      const double up = ln.loss_only(batch);
      par.value.values()[j] = saved - h;
      const double dn = ln.loss_only(batch);
      par.value.values()[j] = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double an = par.grad.values()[j];
      max_err = std::max(max_err, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
    }
  }
  OpCheck c;
  c.name = "full_model";
  c.max_err = max_err;
  c.tol = 1e-4;
  c.pass = max_err <= c.tol;
  return c;
}

}  // namespace unsr
