#pragma once

#include <utility>

#include "unsr/env.hpp"

namespace unsr {

// One-shot two-player common-payoff game. Observations are constant one-hot
// agent ids; the global state stacks both id rows.
class MatrixGame : public Env {
 public:
  MatrixGame(std::string name, Tensor payoff) : payoff_(std::move(payoff)) {
    if (payoff_.rows() != payoff_.cols()) throw UsageError("MatrixGame: payoff must be square");
    spec_.name = std::move(name);
    spec_.n_agents = 2;
    spec_.n_actions = payoff_.rows();
    spec_.d_f = 2;
    spec_.n_others = 0;
    spec_.episode_limit = 1;
    spec_.d_state = spec_.n_agents * spec_.d_f;
    spec_.gamma = 0.99;
  }

  const EnvSpec& spec() const override { return spec_; }

  ResetResult reset(std::uint64_t) override {
    live_ = true;
    return {observations(), global_state()};
  }

  StepResult step(const std::vector<long>& joint) override {
    if (!live_) throw UsageError("MatrixGame::step: episode is over; call reset");
    if (static_cast<long>(joint.size()) != 2) throw UsageError("MatrixGame::step: need 2 actions");
    for (long a : joint)
      if (a < 0 || a >= spec_.n_actions)
        throw ContractError("MatrixGame::step: action id out of range");
    live_ = false;
    StepResult r;
    r.reward = payoff_(joint[0], joint[1]);
    r.terminated = true;
    r.truncated = false;
    r.obs = observations();
    r.state = global_state();
    return r;
  }

  std::vector<int> avail_actions(long agent) const override {
    if (agent < 0 || agent >= 2) throw UsageError("MatrixGame: bad agent index");
    return std::vector<int>(static_cast<std::size_t>(spec_.n_actions), 1);
  }

  Tensor global_state() const override {
    Tensor s(1, spec_.d_state);
    s(0, 0) = 1.0;  // agent 0 one-hot
    s(0, 3) = 1.0;  // agent 1 one-hot
    return s;
  }

  const Tensor& payoff() const { return payoff_; }

 private:
  std::vector<EntityObservation> observations() const {
    std::vector<EntityObservation> obs;
    for (long i = 0; i < 2; ++i) {
      EntityObservation o;
      o.self_row = Tensor(1, 2);
      o.self_row(0, i) = 1.0;
      o.ally_rows = Tensor(1, 2);
      o.ally_rows(0, 1 - i) = 1.0;
      o.other_rows = Tensor(0, 2);
      o.visibility = {1.0};
      obs.push_back(std::move(o));
    }
    return obs;
  }

  EnvSpec spec_;
  Tensor payoff_;
  bool live_ = false;
};

inline MatrixGame make_coordination_game() {
  return MatrixGame("coordination-game", Tensor::from_rows({{10, 0}, {0, 5}}));
}

inline MatrixGame make_nonmono_game() {
  return MatrixGame("nonmono-game",
                    Tensor::from_rows({{8, -12, -12}, {-12, 0, 0}, {-12, 0, 0}}));
}

}  // namespace unsr
