#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "unsr/env.hpp"

namespace unsr {

struct PpGridConfig {
  long size = 7;
  long n_predators = 3;
  long n_prey = 2;
  long sight = 2;  // Chebyshev radius
  long episode_limit = 50;
  double capture_reward = 10.0;
  double step_cost = 0.05;

  void validate() const {
    if (size < 2 || n_predators < 2 || n_prey < 1 || sight < 0 || episode_limit < 1)
      throw UsageError("PpGridConfig: size>=2, predators>=2, prey>=1, sight>=0, limit>=1");
  }
};

namespace pp {

enum Action : long { kStay = 0, kUp = 1, kDown = 2, kLeft = 3, kRight = 4, kCapture = 5 };

struct Cell {
  long x = 0;
  long y = 0;
  friend bool operator==(Cell a, Cell b) { return a.x == b.x && a.y == b.y; }
};

struct Prey {
  Cell pos;
  bool alive = true;
};

struct State {
  std::vector<Cell> preds;
  std::vector<Prey> prey;

  bool all_captured() const {
    for (const Prey& p : prey)
      if (p.alive) return false;
    return true;
  }
};

inline long cheb(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }
inline long manh(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

inline bool move_legal(const PpGridConfig& cfg, Cell c, long action) {
  switch (action) {
    case kStay: return true;
    case kUp: return c.y > 0;
    case kDown: return c.y < cfg.size - 1;
    case kLeft: return c.x > 0;
    case kRight: return c.x < cfg.size - 1;
    default: return false;
  }
}

inline Cell apply_move(Cell c, long action) {
  switch (action) {
    case kUp: return {c.x, c.y - 1};
    case kDown: return {c.x, c.y + 1};
    case kLeft: return {c.x - 1, c.y};
    case kRight: return {c.x + 1, c.y};
    default: return c;
  }
}

inline std::vector<int> avail(const PpGridConfig& cfg, const State& s, long agent) {
  const Cell c = s.preds[static_cast<std::size_t>(agent)];
  std::vector<int> m(6, 0);
  for (long a = kStay; a <= kRight; ++a) m[static_cast<std::size_t>(a)] = move_legal(cfg, c, a);
  for (const Prey& p : s.prey)
    if (p.alive && p.pos == c) m[kCapture] = 1;
  return m;
}

struct Transition {
  State next;
  long captures = 0;
  double reward = 0.0;
  bool terminated = false;
};

// One joint step. Captures resolve on decision-time positions, prey flee from
// the pre-move predator positions, predator moves land last. All inputs must
// be available actions; the environment wrapper enforces that for agents.
inline Transition step(const PpGridConfig& cfg, const State& s, const std::vector<long>& joint) {
  if (joint.size() != s.preds.size()) throw UsageError("pp::step: joint action arity");
  Transition t;
  t.next = s;

  // capture phase
  for (std::size_t q = 0; q < s.prey.size(); ++q) {
    const Prey& p = s.prey[q];
    if (!p.alive) continue;
    bool done = false;
    for (std::size_t i = 0; i < s.preds.size() && !done; ++i) {
      if (joint[i] != kCapture || !(s.preds[i] == p.pos)) continue;
      for (std::size_t j = 0; j < s.preds.size(); ++j)
        if (j != i && manh(s.preds[j], p.pos) == 1) {
          done = true;
          break;
        }
    }
    if (done) {
      t.next.prey[q].alive = false;
      ++t.captures;
    }
  }

  // flee phase: surviving prey step away from the nearest visible predator
  for (std::size_t q = 0; q < t.next.prey.size(); ++q) {
    Prey& p = t.next.prey[q];
    if (!p.alive) continue;
    long best_i = -1, best_d = 0;
    for (std::size_t i = 0; i < s.preds.size(); ++i) {
      const long d = cheb(p.pos, s.preds[i]);
      if (d <= cfg.sight && (best_i < 0 || d < best_d)) {
        best_i = static_cast<long>(i);
        best_d = d;
      }
    }
    if (best_i < 0) continue;
    const Cell threat = s.preds[static_cast<std::size_t>(best_i)];
    long best_a = kStay;
    long best_gain = cheb(p.pos, threat);
    for (long a = kUp; a <= kRight; ++a) {
      if (!move_legal(cfg, p.pos, a)) continue;
      const long d = cheb(apply_move(p.pos, a), threat);
      if (d > best_gain) {
        best_gain = d;
        best_a = a;
      }
    }
    p.pos = apply_move(p.pos, best_a);
  }

  // predator moves
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (joint[i] >= kUp && joint[i] <= kRight) {
      if (!move_legal(cfg, s.preds[i], joint[i]))
        throw ContractError("pp::step: illegal move into a wall");
      t.next.preds[i] = apply_move(s.preds[i], joint[i]);
    }
  }

  t.reward = cfg.capture_reward * static_cast<double>(t.captures) - cfg.step_cost;
  t.terminated = t.next.all_captured();
  return t;
}

}  // namespace pp

// Partially observable predator-prey gridworld. Predators are the learning
// agents; prey are scripted to flee. Observations list entities within the
// sight radius; everything else is a zero row with visibility 0.
class PpGrid : public Env {
 public:
  explicit PpGrid(PpGridConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    spec_.name = "pp-grid";
    spec_.n_agents = cfg_.n_predators;
    spec_.n_actions = 6;
    spec_.d_f = 6;
    spec_.n_others = cfg_.n_prey;
    spec_.episode_limit = cfg_.episode_limit;
    spec_.d_state = (cfg_.n_predators + cfg_.n_prey) * spec_.d_f;
    spec_.gamma = 0.99;
  }

  const EnvSpec& spec() const override { return spec_; }
  const PpGridConfig& config() const { return cfg_; }
  const pp::State& state() const { return state_; }

  ResetResult reset(std::uint64_t seed) override {
    RngStream rng("pp-reset", seed);
    std::vector<pp::Cell> cells;
    while (cells.size() < static_cast<std::size_t>(cfg_.n_predators + cfg_.n_prey)) {
      pp::Cell c{static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(cfg_.size))),
                 static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(cfg_.size)))};
      if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
    }
    state_.preds.assign(cells.begin(), cells.begin() + cfg_.n_predators);
    state_.prey.clear();
    for (long q = 0; q < cfg_.n_prey; ++q)
      state_.prey.push_back({cells[static_cast<std::size_t>(cfg_.n_predators + q)], true});
    steps_ = 0;
    live_ = true;
    return {observations(), global_state()};
  }

  StepResult step(const std::vector<long>& joint) override {
    if (!live_) throw UsageError("PpGrid::step: episode is over; call reset");
    if (static_cast<long>(joint.size()) != cfg_.n_predators)
      throw UsageError("PpGrid::step: joint action arity");
    for (long i = 0; i < cfg_.n_predators; ++i) {
      if (joint[static_cast<std::size_t>(i)] < 0 || joint[static_cast<std::size_t>(i)] >= 6)
        throw ContractError("PpGrid::step: action id out of range");
      if (!avail_actions(i)[static_cast<std::size_t>(joint[static_cast<std::size_t>(i)])])
        throw ContractError("PpGrid::step: unavailable action for agent " + std::to_string(i));
    }
    pp::Transition t = pp::step(cfg_, state_, joint);
    state_ = t.next;
    ++steps_;

    StepResult r;
    r.reward = t.reward;
    r.terminated = t.terminated;
    r.truncated = !t.terminated && steps_ >= cfg_.episode_limit;
    r.obs = observations();
    r.state = global_state();
    if (r.terminated || r.truncated) live_ = false;
    return r;
  }

  std::vector<int> avail_actions(long agent) const override {
    if (agent < 0 || agent >= cfg_.n_predators) throw UsageError("PpGrid: bad agent index");
    return pp::avail(cfg_, state_, agent);
  }

  Tensor global_state() const override {
    Tensor s(1, spec_.d_state);
    long c = 0;
    const double denom = static_cast<double>(cfg_.size - 1);
    for (const pp::Cell& p : state_.preds) {
      s(0, c + 0) = static_cast<double>(p.x) / denom;
      s(0, c + 1) = static_cast<double>(p.y) / denom;
      s(0, c + 3) = 1.0;  // is_ally
      s(0, c + 5) = 1.0;  // alive
      c += spec_.d_f;
    }
    for (const pp::Prey& p : state_.prey) {
      s(0, c + 0) = static_cast<double>(p.pos.x) / denom;
      s(0, c + 1) = static_cast<double>(p.pos.y) / denom;
      s(0, c + 4) = 1.0;  // is_prey
      s(0, c + 5) = p.alive ? 1.0 : 0.0;
      c += spec_.d_f;
    }
    return s;
  }

  // Test and oracle hook: overwrite positions without touching the episode clock.
  void force_state(const pp::State& s) {
    if (static_cast<long>(s.preds.size()) != cfg_.n_predators ||
        static_cast<long>(s.prey.size()) != cfg_.n_prey)
      throw UsageError("PpGrid::force_state: entity counts");
    state_ = s;
    live_ = true;
  }

 private:
  std::vector<EntityObservation> observations() const {
    std::vector<EntityObservation> out;
    const double denom = static_cast<double>(cfg_.size - 1);
    for (long i = 0; i < cfg_.n_predators; ++i) {
      const pp::Cell me = state_.preds[static_cast<std::size_t>(i)];
      EntityObservation o;
      o.self_row = Tensor(1, spec_.d_f);
      o.self_row(0, 0) = static_cast<double>(me.x) / denom;
      o.self_row(0, 1) = static_cast<double>(me.y) / denom;
      o.self_row(0, 2) = 1.0;  // is_self
      o.self_row(0, 5) = 1.0;  // alive
      o.ally_rows = Tensor(cfg_.n_predators - 1, spec_.d_f);
      long r = 0;
      for (long j = 0; j < cfg_.n_predators; ++j) {
        if (j == i) continue;
        const pp::Cell them = state_.preds[static_cast<std::size_t>(j)];
        if (pp::cheb(me, them) <= cfg_.sight) {
          o.ally_rows(r, 0) = static_cast<double>(them.x) / denom;
          o.ally_rows(r, 1) = static_cast<double>(them.y) / denom;
          o.ally_rows(r, 3) = 1.0;  // is_ally
          o.ally_rows(r, 5) = 1.0;
          o.visibility.push_back(1.0);
        } else {
          o.visibility.push_back(0.0);
        }
        ++r;
      }
      o.other_rows = Tensor(cfg_.n_prey, spec_.d_f);
      for (long q = 0; q < cfg_.n_prey; ++q) {
        const pp::Prey& p = state_.prey[static_cast<std::size_t>(q)];
        if (p.alive && pp::cheb(me, p.pos) <= cfg_.sight) {
          o.other_rows(q, 0) = static_cast<double>(p.pos.x) / denom;
          o.other_rows(q, 1) = static_cast<double>(p.pos.y) / denom;
          o.other_rows(q, 4) = 1.0;  // is_prey
          o.other_rows(q, 5) = 1.0;
          o.visibility.push_back(1.0);
        } else {
          o.visibility.push_back(0.0);
        }
      }
      out.push_back(std::move(o));
    }
    return out;
  }

  PpGridConfig cfg_;
  EnvSpec spec_;
  pp::State state_;
  long steps_ = 0;
  bool live_ = false;
};

}  // namespace unsr
