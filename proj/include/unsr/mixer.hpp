#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "unsr/param.hpp"
#include "unsr/tape.hpp"

namespace unsr {

struct MixerDims {
  long d_state = 0;
  long d_z = 0;       // width of the per-agent mixing embedding
  long n_agents = 0;
  long heads = 4;
  long embed = 32;
  long hyper_hidden = 64;
};

namespace mix_detail {
inline std::string hname(long j, const char* leaf) {
  return "mix.head" + std::to_string(j) + "." + leaf;
}
}  // namespace mix_detail

// Attentive monotonic mixer. Per head, state and unit-state embeddings score
// each agent; the softmax over agents mixes the chosen per-agent Q values.
// Head outputs combine under absolute hypernetwork weights, so Q_tot is
// non-decreasing in every Q_i. No state-value bias term.
inline void register_unsr_mixer(ParamSet& ps, const MixerDims& dm, RngStream& rng) {
  using mix_detail::hname;
  for (long j = 0; j < dm.heads; ++j) {
    ps.add_linear(hname(j, "ws"), {dm.d_state, dm.embed}, dm.d_state, rng);
    ps.add_linear(hname(j, "wz"), {dm.d_z, dm.embed}, dm.d_z, rng);
  }
  ps.add_linear("mix.hyper.w1", {dm.d_state, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("mix.hyper.b1", {1, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("mix.hyper.w2", {dm.hyper_hidden, dm.heads}, dm.hyper_hidden, rng);
  ps.add_linear("mix.hyper.b2", {1, dm.heads}, dm.hyper_hidden, rng);
}

struct MixResult {
  Ref q_tot;                  // B x 1
  Ref head_weights;           // B x heads
  std::vector<Ref> alphas;    // per head, B x n_agents
  std::vector<Ref> q_heads;   // per head, B x 1
};

// q: B x n chosen per-agent values, z: (B*n) x d_z stacked embeddings,
// s: B x d_state. `abs_weights=false` drops the monotonicity guarantee and
// exists only so audits can prove they would catch a broken combiner.
inline MixResult mix_unsr(Tape& tp, ParamSet& ps, const MixerDims& dm, Ref q, Ref z, Ref s,
                          bool abs_weights = true) {
  using mix_detail::hname;
  const long b = q.rows;
  if (q.cols != dm.n_agents || z.rows != b * dm.n_agents || z.cols != dm.d_z ||
      s.rows != b || s.cols != dm.d_state)
    throw DimError("mix_unsr: q " + std::to_string(q.rows) + "x" + std::to_string(q.cols) +
                   ", z " + std::to_string(z.rows) + "x" + std::to_string(z.cols) + ", s " +
                   std::to_string(s.rows) + "x" + std::to_string(s.cols));

  MixResult out;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dm.embed));
  std::vector<Ref> parts;
  for (long j = 0; j < dm.heads; ++j) {
    Ref sp = tp.matmul(s, tp.param(ps.at(hname(j, "ws"))));
    Ref zp = tp.matmul(z, tp.param(ps.at(hname(j, "wz"))));
    Ref logits = tp.scale(tp.group_matmul_nt(sp, zp, 1, dm.n_agents), inv_sqrt);
    Ref alpha = tp.softmax_rows(logits);
    out.alphas.push_back(alpha);
    Ref qh = tp.row_sum(tp.hadamard(alpha, q));
    out.q_heads.push_back(qh);
    parts.push_back(qh);
  }
  Ref hidden = tp.relu(tp.linear(s, tp.param(ps.at("mix.hyper.w1")),
                                 tp.param(ps.at("mix.hyper.b1"))));
  Ref raw = tp.linear(hidden, tp.param(ps.at("mix.hyper.w2")), tp.param(ps.at("mix.hyper.b2")));
  out.head_weights = abs_weights ? tp.abs_val(raw) : raw;
  out.q_tot = tp.row_sum(tp.hadamard(out.head_weights, tp.concat_cols(parts)));
  return out;
}

inline Ref mix_vdn(Tape& tp, Ref q) { return tp.row_sum(q); }

// Standard monotonic baseline: one ELU hidden layer of width `embed` whose
// weights come from absolute two-layer hypernetworks on the state, plus a
// state-value bias path.
inline void register_qmix_mixer(ParamSet& ps, const MixerDims& dm, RngStream& rng) {
  ps.add_linear("qmix.w1.a", {dm.d_state, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("qmix.w1.ab", {1, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("qmix.w1.b", {dm.hyper_hidden, dm.n_agents * dm.embed}, dm.hyper_hidden, rng);
  ps.add_linear("qmix.w1.bb", {1, dm.n_agents * dm.embed}, dm.hyper_hidden, rng);
  ps.add_linear("qmix.b1.w", {dm.d_state, dm.embed}, dm.d_state, rng);
  ps.add_linear("qmix.b1.b", {1, dm.embed}, dm.d_state, rng);
  ps.add_linear("qmix.w2.a", {dm.d_state, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("qmix.w2.ab", {1, dm.hyper_hidden}, dm.d_state, rng);
  ps.add_linear("qmix.w2.b", {dm.hyper_hidden, dm.embed}, dm.hyper_hidden, rng);
  ps.add_linear("qmix.w2.bb", {1, dm.embed}, dm.hyper_hidden, rng);
  ps.add_linear("qmix.b2.w1", {dm.d_state, dm.embed}, dm.d_state, rng);
  ps.add_linear("qmix.b2.b1", {1, dm.embed}, dm.d_state, rng);
  ps.add_linear("qmix.b2.w2", {dm.embed, 1}, dm.embed, rng);
  ps.add_linear("qmix.b2.b2", {1, 1}, dm.embed, rng);
}

inline Ref mix_qmix(Tape& tp, ParamSet& ps, const MixerDims& dm, Ref q, Ref s) {
  const long b = q.rows;
  if (q.cols != dm.n_agents || s.rows != b || s.cols != dm.d_state)
    throw DimError("mix_qmix: q " + std::to_string(q.rows) + "x" + std::to_string(q.cols) +
                   ", s " + std::to_string(s.rows) + "x" + std::to_string(s.cols));
  auto hyper = [&](const char* a, const char* ab, const char* w, const char* wb) {
    Ref h = tp.relu(tp.linear(s, tp.param(ps.at(a)), tp.param(ps.at(ab))));
    return tp.abs_val(tp.linear(h, tp.param(ps.at(w)), tp.param(ps.at(wb))));
  };
  Ref w1 = hyper("qmix.w1.a", "qmix.w1.ab", "qmix.w1.b", "qmix.w1.bb");
  Ref b1 = tp.linear(s, tp.param(ps.at("qmix.b1.w")), tp.param(ps.at("qmix.b1.b")));
  Ref hidden = tp.elu(tp.add(tp.row_bmm(q, w1, dm.embed), b1));
  Ref w2 = hyper("qmix.w2.a", "qmix.w2.ab", "qmix.w2.b", "qmix.w2.bb");
  Ref vh = tp.relu(tp.linear(s, tp.param(ps.at("qmix.b2.w1")), tp.param(ps.at("qmix.b2.b1"))));
  Ref v = tp.linear(vh, tp.param(ps.at("qmix.b2.w2")), tp.param(ps.at("qmix.b2.b2")));
  return tp.add(tp.row_bmm(hidden, w2, 1), v);
}

// Central-difference sensitivity of a scalar combiner to each per-agent value.
// Returns the smallest observed derivative; monotone combiners stay >= 0 up to
// finite-difference noise.
template <class F>
double monotonicity_probe(F&& qtot_of, const Tensor& q0, double h = 1e-4) {
  if (q0.rows() != 1) throw UsageError("monotonicity_probe: expects a single row of values");
  double min_deriv = std::numeric_limits<double>::infinity();
  Tensor q = q0;
  for (long i = 0; i < q.numel(); ++i) {
    const double orig = q[i];
    q[i] = orig + h;
    const double up = qtot_of(q);
    q[i] = orig - h;
    const double dn = qtot_of(q);
    q[i] = orig;
    min_deriv = std::min(min_deriv, (up - dn) / (2.0 * h));
  }
  return min_deriv;
}

}  // namespace unsr
