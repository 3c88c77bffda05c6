#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unsr/rng.hpp"
#include "unsr/tensor.hpp"

namespace unsr {

struct EnvSpec {
  std::string name;
  long n_agents = 0;
  long n_actions = 0;
  long d_f = 0;       // entity feature width
  long n_others = 0;  // non-agent entities
  long episode_limit = 0;
  long d_state = 0;
  double gamma = 0.99;

  // rows of one observation: self + allies + others
  long entity_rows() const { return 1 + (n_agents - 1) + n_others; }
};

// One agent's view, decomposed into self / ally / other-entity feature rows.
// Rows for invisible entities are zero and flagged 0 in `visibility`.
struct EntityObservation {
  Tensor self_row;    // 1 x d_f
  Tensor ally_rows;   // (n-1) x d_f
  Tensor other_rows;  // k x d_f
  std::vector<double> visibility;  // length (n-1)+k, 0/1, self excluded

  // [self; allies; others] stacked, (1+m) x d_f.
  Tensor stacked() const {
    Tensor out(1 + ally_rows.rows() + other_rows.rows(), self_row.cols());
    long r = 0;
    auto put = [&](const Tensor& t) {
      for (long i = 0; i < t.rows(); ++i, ++r)
        for (long j = 0; j < t.cols(); ++j) out(r, j) = t(i, j);
    };
    put(self_row);
    put(ally_rows);
    put(other_rows);
    return out;
  }

  // 1 x (1+m) key mask over [self; allies; others]; self always 1.
  Tensor entity_mask() const {
    Tensor m(1, 1 + static_cast<long>(visibility.size()));
    m(0, 0) = 1.0;
    for (std::size_t i = 0; i < visibility.size(); ++i) m(0, 1 + static_cast<long>(i)) = visibility[i];
    return m;
  }
};

struct StepResult {
  double reward = 0.0;
  bool terminated = false;  // goal reached
  bool truncated = false;   // episode limit hit
  std::vector<EntityObservation> obs;
  Tensor state;  // 1 x d_state, full information
};

struct ResetResult {
  std::vector<EntityObservation> obs;
  Tensor state;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual ResetResult reset(std::uint64_t seed) = 0;
  virtual StepResult step(const std::vector<long>& joint_action) = 0;
  virtual std::vector<int> avail_actions(long agent) const = 0;
  virtual Tensor global_state() const = 0;
};

}  // namespace unsr
