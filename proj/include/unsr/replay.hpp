#pragma once

#include <deque>
#include <vector>

#include "unsr/env.hpp"
#include "unsr/rng.hpp"

namespace unsr {

// One finished episode. T transitions plus T+1 frames of observations, global
// states and availability masks; the trailing frame exists for bootstrapping.
struct Episode {
  std::vector<std::vector<EntityObservation>> obs;  // (T+1) x n_agents
  std::vector<Tensor> states;                       // (T+1), each 1 x d_state
  std::vector<std::vector<std::vector<int>>> avail; // (T+1) x n_agents x n_actions
  std::vector<std::vector<long>> actions;           // T x n_agents
  std::vector<double> rewards;                      // T
  bool terminated = false;

  long length() const { return static_cast<long>(rewards.size()); }

  void validate() const {
    const std::size_t t = rewards.size();
    if (t == 0) throw UsageError("Episode: empty");
    if (obs.size() != t + 1 || states.size() != t + 1 || avail.size() != t + 1 ||
        actions.size() != t)
      throw UsageError("Episode: frame bookkeeping out of sync");
  }
};

// FIFO episode store with uniform sampling without replacement.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw UsageError("ReplayBuffer: zero capacity");
  }

  void add(Episode ep) {
    ep.validate();
    if (episodes_.size() == capacity_) episodes_.pop_front();
    episodes_.push_back(std::move(ep));
  }

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Episode& at(std::size_t i) const { return episodes_.at(i); }

  std::vector<const Episode*> sample(std::size_t k, RngStream& rng) const {
    if (k == 0 || k > episodes_.size())
      throw UsageError("ReplayBuffer: cannot sample " + std::to_string(k) + " of " +
                       std::to_string(episodes_.size()));
    std::vector<std::size_t> idx(episodes_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<const Episode*> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(idx.size() - i));
      std::swap(idx[i], idx[j]);
      out.push_back(&episodes_[idx[i]]);
    }
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

}  // namespace unsr
