#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "unsr/env.hpp"
#include "unsr/pp_grid.hpp"

namespace unsr {

// ---- one-shot games --------------------------------------------------------

struct JointPayoff {
  Tensor payoff;             // n_actions x n_actions
  std::vector<long> argmax;  // lexicographically first among ties
  double best = 0.0;
};

// Exhaustive payoff table for a two-agent single-step game, straight from the
// environment by resetting and stepping every joint action.
inline JointPayoff enumerate_joint_payoffs(Env& env) {
  const EnvSpec& sp = env.spec();
  if (sp.n_agents != 2 || sp.episode_limit != 1)
    throw UsageError("enumerate_joint_payoffs: needs a 2-agent one-shot game");
  JointPayoff out;
  out.payoff = Tensor(sp.n_actions, sp.n_actions);
  out.best = -std::numeric_limits<double>::infinity();
  for (long a0 = 0; a0 < sp.n_actions; ++a0)
    for (long a1 = 0; a1 < sp.n_actions; ++a1) {
      env.reset(0);
      StepResult r = env.step({a0, a1});
      out.payoff(a0, a1) = r.reward;
      if (r.reward > out.best) {
        out.best = r.reward;
        out.argmax = {a0, a1};
      }
    }
  return out;
}

// ---- grid state packing ----------------------------------------------------

namespace pp {

inline long cell_bits(const PpGridConfig& cfg) {
  const long cells = cfg.size * cfg.size;
  long bits = 1;
  while ((1L << bits) < cells) ++bits;
  return bits;
}

inline std::uint64_t pack_state(const PpGridConfig& cfg, const State& s) {
  if (static_cast<long>(s.preds.size()) != cfg.n_predators ||
      static_cast<long>(s.prey.size()) != cfg.n_prey)
    throw UsageError("pack_state: entity counts do not match the config");
  const long bits = cell_bits(cfg);
  const long total = bits * static_cast<long>(s.preds.size()) +
                     (bits + 1) * static_cast<long>(s.prey.size());
  if (total > 64) throw UsageError("pack_state: state does not fit in 64 bits");
  std::uint64_t key = 0;
  long shift = 0;
  auto put = [&](std::uint64_t v, long w) {
    key |= v << shift;
    shift += w;
  };
  for (const Cell& c : s.preds)
    put(static_cast<std::uint64_t>(c.y * cfg.size + c.x), bits);
  for (const Prey& p : s.prey) {
    put(static_cast<std::uint64_t>(p.pos.y * cfg.size + p.pos.x), bits);
    put(p.alive ? 1u : 0u, 1);
  }
  return key;
}

inline State unpack_state(const PpGridConfig& cfg, std::uint64_t key) {
  const long bits = cell_bits(cfg);
  const std::uint64_t mask = (1ull << bits) - 1;
  State s;
  auto take = [&](long w) {
    std::uint64_t v = key & ((1ull << w) - 1);
    key >>= w;
    return v;
  };
  for (long i = 0; i < cfg.n_predators; ++i) {
    const long c = static_cast<long>(take(bits) & mask);
    s.preds.push_back({c % cfg.size, c / cfg.size});
  }
  for (long q = 0; q < cfg.n_prey; ++q) {
    const long c = static_cast<long>(take(bits) & mask);
    const bool alive = take(1) != 0;
    s.prey.push_back({{c % cfg.size, c / cfg.size}, alive});
  }
  return s;
}

// All joint actions whose components are available in s.
inline std::vector<std::vector<long>> available_joints(const PpGridConfig& cfg, const State& s) {
  const std::size_t n = s.preds.size();
  std::vector<std::vector<long>> per(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto m = avail(cfg, s, static_cast<long>(i));
    for (long a = 0; a < static_cast<long>(m.size()); ++a)
      if (m[static_cast<std::size_t>(a)] != 0) per[i].push_back(a);
  }
  std::vector<std::vector<long>> joints;
  std::vector<std::size_t> odo(n, 0);
  while (true) {
    std::vector<long> j(n);
    for (std::size_t i = 0; i < n; ++i) j[i] = per[i][odo[i]];
    joints.push_back(std::move(j));
    std::size_t i = n;
    while (i > 0) {
      --i;
      if (++odo[i] < per[i].size()) break;
      odo[i] = 0;
      if (i == 0) return joints;
    }
  }
}

}  // namespace pp

// ---- exact value iteration --------------------------------------------------

struct ValueIterationResult {
  std::vector<std::uint64_t> keys;  // insertion (BFS) order
  std::unordered_map<std::uint64_t, std::size_t> index;
  std::vector<double> v;
  long sweeps = 0;

  double value_of(const PpGridConfig& cfg, const pp::State& s) const {
    auto it = index.find(pp::pack_state(cfg, s));
    if (it == index.end()) throw UsageError("value_of: state outside the reachable closure");
    return v[it->second];
  }
};

// Exact centralized control values over the reachable closure of the given
// start states. Deterministic dynamics, full availability. Refuses instead of
// thrashing when the state space is out of reach: first on the combinatorial
// bound, then again if the breadth-first closure outgrows max_states.
inline ValueIterationResult q_iteration(const PpGridConfig& cfg,
                                        const std::vector<pp::State>& starts, double gamma,
                                        double tol = 1e-9, std::size_t max_states = 10000000,
                                        long max_sweeps = 100000) {
  cfg.validate();
  if (starts.empty()) throw UsageError("q_iteration: no start states");
  const double cells = static_cast<double>(cfg.size * cfg.size);
  const double bound = std::pow(cells, static_cast<double>(cfg.n_predators)) *
                       std::pow(2.0 * cells, static_cast<double>(cfg.n_prey));
  if (bound > static_cast<double>(max_states))
    throw RuntimeError("q_iteration: state space bound " + std::to_string(bound) +
                       " exceeds the cap of " + std::to_string(max_states) +
                       " states; refusing");

  ValueIterationResult out;
  auto intern = [&](std::uint64_t key) {
    auto it = out.index.find(key);
    if (it != out.index.end()) return it->second;
    if (out.keys.size() >= max_states)
      throw RuntimeError("q_iteration: reachable closure exceeds the cap of " +
                         std::to_string(max_states) + " states; refusing");
    out.keys.push_back(key);
    out.index.emplace(key, out.keys.size() - 1);
    return out.keys.size() - 1;
  };

  struct Edge {
    double reward;
    std::uint32_t next;
    bool terminal;
  };
  std::vector<std::vector<Edge>> edges;
  std::vector<bool> is_goal;

  for (const pp::State& s : starts) intern(pp::pack_state(cfg, s));
  for (std::size_t i = 0; i < out.keys.size(); ++i) {
    const pp::State s = pp::unpack_state(cfg, out.keys[i]);
    edges.emplace_back();
    is_goal.push_back(s.all_captured());
    if (is_goal.back()) continue;
    for (const auto& joint : pp::available_joints(cfg, s)) {
      pp::Transition t = pp::step(cfg, s, joint);
      const std::size_t j = intern(pp::pack_state(cfg, t.next));
      edges[i].push_back({t.reward, static_cast<std::uint32_t>(j), t.terminated});
    }
  }

  out.v.assign(out.keys.size(), 0.0);
  for (out.sweeps = 1; out.sweeps <= max_sweeps; ++out.sweeps) {
    double delta = 0.0;
    for (std::size_t i = 0; i < out.keys.size(); ++i) {
      if (is_goal[static_cast<std::size_t>(i)]) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (const Edge& e : edges[i]) {
        const double val = e.reward + (e.terminal ? 0.0 : gamma * out.v[e.next]);
        best = std::max(best, val);
      }
      delta = std::max(delta, std::abs(best - out.v[i]));
      out.v[i] = best;
    }
    if (delta <= tol) return out;
  }
  throw RuntimeError("q_iteration: no convergence after " + std::to_string(max_sweeps) +
                     " sweeps");
}

// ---- shortest capture search -------------------------------------------------

struct CaptureSearch {
  bool found = false;
  long steps = -1;
  std::size_t expanded = 0;
};

// Lower bound on the steps left: per live prey, the two nearest distinct
// predators must reach distance 0 and 1; gaps close by at most 2 per step.
// Each term drops by at most one per step, so the bound is consistent.
inline long capture_heuristic(const PpGridConfig& cfg, const pp::State& s) {
  (void)cfg;
  long h = 0;
  for (const pp::Prey& p : s.prey) {
    if (!p.alive) continue;
    long d1 = std::numeric_limits<long>::max(), d2 = d1;
    for (const pp::Cell& c : s.preds) {
      const long d = pp::manh(c, p.pos);
      if (d < d1) {
        d2 = d1;
        d1 = d;
      } else if (d < d2) {
        d2 = d;
      }
    }
    const long hp = std::max({(d1 + 1) / 2, d2 / 2, 1L});
    h = std::max(h, hp);
  }
  return h;
}

// A* over joint actions with unit step cost; returns the minimal number of
// steps until every prey is captured.
inline CaptureSearch astar_capture_time(const PpGridConfig& cfg, const pp::State& start,
                                        std::size_t max_expansions = 20000000) {
  cfg.validate();
  CaptureSearch out;
  if (start.all_captured()) {
    out.found = true;
    out.steps = 0;
    return out;
  }

  using Entry = std::tuple<long, std::uint64_t, std::uint64_t>;  // f, seq, key
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> open;
  std::unordered_map<std::uint64_t, long> best_g;
  std::uint64_t seq = 0;

  const std::uint64_t start_key = pp::pack_state(cfg, start);
  best_g[start_key] = 0;
  open.emplace(capture_heuristic(cfg, start), seq++, start_key);

  while (!open.empty()) {
    const auto [f, order, key] = open.top();
    (void)order;
    open.pop();
    const long g = best_g[key];
    const pp::State s = pp::unpack_state(cfg, key);
    if (f > g + capture_heuristic(cfg, s)) continue;  // stale entry
    if (s.all_captured()) {
      out.found = true;
      out.steps = g;
      return out;
    }
    if (++out.expanded > max_expansions)
      throw RuntimeError("astar_capture_time: expansion cap of " +
                         std::to_string(max_expansions) + " hit; refusing");
    for (const auto& joint : pp::available_joints(cfg, s)) {
      pp::Transition t = pp::step(cfg, s, joint);
      const std::uint64_t nk = pp::pack_state(cfg, t.next);
      const long ng = g + 1;
      auto it = best_g.find(nk);
      if (it != best_g.end() && it->second <= ng) continue;
      best_g[nk] = ng;
      open.emplace(ng + capture_heuristic(cfg, t.next), seq++, nk);
    }
  }
  return out;
}

// Undiscounted return of a minimal-time capture episode.
inline double optimal_return(const PpGridConfig& cfg, long t_star) {
  return cfg.capture_reward * static_cast<double>(cfg.n_prey) -
         cfg.step_cost * static_cast<double>(t_star);
}

// ---- greedy consistency audit -------------------------------------------------

struct IgmReport {
  bool consistent = true;
  std::vector<long> greedy;  // per-agent argmax tuple
  std::vector<long> best;    // joint argmax of the combined value
  double greedy_value = 0.0;
  double best_value = 0.0;
  long joints_checked = 0;
};

// Checks that the tuple of per-agent argmaxes also maximizes the combined
// value over every available joint action. `qtot` maps a joint action to the
// combined value; ties break to the lexicographically first joint.
template <class F>
IgmReport igm_audit(const Tensor& q, const std::vector<std::vector<int>>& avail, F&& qtot,
                    double tol = 1e-9) {
  const long n = q.rows();
  const long actions = q.cols();
  if (static_cast<long>(avail.size()) != n)
    throw UsageError("igm_audit: one availability mask per agent");

  IgmReport rep;
  for (long i = 0; i < n; ++i) {
    long best = -1;
    for (long a = 0; a < actions; ++a)
      if (avail[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] != 0 &&
          (best < 0 || q(i, a) > q(i, best)))
        best = a;
    if (best < 0) throw ContractError("igm_audit: agent with no available action");
    rep.greedy.push_back(best);
  }

  rep.best_value = -std::numeric_limits<double>::infinity();
  std::vector<long> joint(static_cast<std::size_t>(n), 0);
  auto first_avail = [&](long i, long from) {
    for (long a = from; a < actions; ++a)
      if (avail[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] != 0) return a;
    return -1L;
  };
  for (long i = 0; i < n; ++i) joint[static_cast<std::size_t>(i)] = first_avail(i, 0);
  while (true) {
    const double val = qtot(joint);
    ++rep.joints_checked;
    if (val > rep.best_value) {
      rep.best_value = val;
      rep.best = joint;
    }
    long i = n;
    bool rolled = true;
    while (i > 0) {
      --i;
      const long nxt = first_avail(i, joint[static_cast<std::size_t>(i)] + 1);
      if (nxt >= 0) {
        joint[static_cast<std::size_t>(i)] = nxt;
        rolled = false;
        break;
      }
      joint[static_cast<std::size_t>(i)] = first_avail(i, 0);
    }
    if (rolled) break;
  }

  rep.greedy_value = qtot(rep.greedy);
  rep.consistent = rep.greedy_value >= rep.best_value - tol;
  return rep;
}

}  // namespace unsr
