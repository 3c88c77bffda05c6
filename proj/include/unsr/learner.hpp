#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unsr/encoder.hpp"
#include "unsr/mixer.hpp"
#include "unsr/replay.hpp"

namespace unsr {

enum class MixKind { kUnsr, kVdn, kQmix };

// What feeds the mixer's per-agent embedding slot. kFull is the standard
// unit state; the others are the O/H/E ablations (raw flattened observation,
// recurrent hidden state, unit state without the hidden slot).
enum class ZVariant { kFull, kRawObs, kHidden, kObsOnly };

inline MixKind mix_kind_from(const std::string& s) {
  if (s == "unsr") return MixKind::kUnsr;
  if (s == "vdn") return MixKind::kVdn;
  if (s == "qmix") return MixKind::kQmix;
  throw UsageError("unknown mixer: " + s);
}

inline ZVariant variant_from(const std::string& s) {
  if (s == "full" || s == "Z") return ZVariant::kFull;
  if (s == "O") return ZVariant::kRawObs;
  if (s == "H") return ZVariant::kHidden;
  if (s == "E") return ZVariant::kObsOnly;
  throw UsageError("unknown variant: " + s);
}

inline std::string variant_name(ZVariant v) {
  switch (v) {
    case ZVariant::kFull: return "Z";
    case ZVariant::kRawObs: return "O";
    case ZVariant::kHidden: return "H";
    case ZVariant::kObsOnly: return "E";
  }
  return "Z";
}

inline std::string mix_kind_name(MixKind m) {
  switch (m) {
    case MixKind::kUnsr: return "unsr";
    case MixKind::kVdn: return "vdn";
    case MixKind::kQmix: return "qmix";
  }
  return "unsr";
}

struct LearnConfig {
  MixKind mixer = MixKind::kUnsr;
  ZVariant variant = ZVariant::kFull;
  double gamma = 0.99;
  double lr = 5e-4;
  double rms_decay = 0.99;
  double rms_eps = 1e-5;
  double clip_norm = 10.0;
  long batch_size = 32;
  long target_interval = 200;
  double eps_start = 1.0;
  double eps_end = 0.05;
  long eps_anneal_steps = 5000;
  // network widths; env-derived dims come from the EnvSpec instead
  long d = 32;
  long d_z = 32;
  long enc_heads = 3;
  long enc_blocks = 2;
  long q_hidden = 64;
  long mix_embed = 32;
  long mix_heads = 4;
  long hyper_hidden = 64;
};

// Linear anneal from eps_start to eps_end over eps_anneal_steps env steps.
inline double epsilon_at(const LearnConfig& c, long env_steps) {
  if (env_steps < 0) throw UsageError("epsilon_at: negative step");
  if (env_steps >= c.eps_anneal_steps) return c.eps_end;
  const double frac = static_cast<double>(env_steps) / static_cast<double>(c.eps_anneal_steps);
  return c.eps_start + (c.eps_end - c.eps_start) * frac;
}

inline long mixer_z_width(const EncoderDims& ed, ZVariant v) {
  switch (v) {
    case ZVariant::kFull:
    case ZVariant::kObsOnly: return ed.d_z;
    case ZVariant::kHidden: return ed.d;
    case ZVariant::kRawObs: return ed.entities * ed.d_f;
  }
  return ed.d_z;
}

// Scales every gradient so the global L2 norm is at most max_norm. Returns
// the pre-clip norm.
inline double clip_global_norm(ParamSet& ps, double max_norm) {
  const double norm = ps.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (double& g : ps[i].grad.values()) g *= s;
  }
  return norm;
}

inline void rmsprop_step(ParamSet& ps, std::vector<Tensor>& acc, double lr, double decay,
                         double eps) {
  if (acc.size() != ps.size()) throw UsageError("rmsprop_step: accumulator count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& a = acc[i].values();
    auto& g = ps[i].grad.values();
    auto& v = ps[i].value.values();
    if (a.size() != g.size())
      throw UsageError("rmsprop_step: accumulator shape mismatch at " + ps[i].name);
    for (std::size_t j = 0; j < g.size(); ++j) {
      a[j] = decay * a[j] + (1.0 - decay) * g[j] * g[j];
      v[j] -= lr * g[j] / std::sqrt(a[j] + eps);
    }
  }
}

struct TrainStats {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double q_tot_mean = 0.0;
  bool synced = false;
};

struct TeamForward {
  Tensor q;       // n_agents x n_actions
  Tensor h_next;  // n_agents x d
  Tensor z_mix;   // n_agents x mixer width; empty unless the mixer wants it
};

// Owns live and target networks plus the optimizer state and runs one TD step
// per call. Batches are re-evaluated from stored observations: hidden states
// and unit states are recomputed from scratch on every pass, live and target
// alike. Episodes are processed stacked; sorting by length makes every
// frame's active set a prefix, so the recurrent carry is a row slice.
class Learner {
 public:
  Learner(const EnvSpec& spec, const LearnConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), enc_(EncoderDims::from_spec(spec)) {
    enc_.d = cfg.d;
    enc_.d_z = cfg.d_z;
    enc_.heads = cfg.enc_heads;
    enc_.blocks = cfg.enc_blocks;
    enc_.q_hidden = cfg.q_hidden;
    mix_.embed = cfg.mix_embed;
    mix_.heads = cfg.mix_heads;
    mix_.hyper_hidden = cfg.hyper_hidden;
    mix_.d_state = spec.d_state;
    mix_.n_agents = spec.n_agents;
    mix_.d_z = mixer_z_width(enc_, cfg.variant);
    RngStream rng("init", seed);
    register_all(live_, rng);
    RngStream rng_t("init", seed);
    register_all(target_, rng_t);
    target_.copy_values_from(live_);
    for (std::size_t i = 0; i < live_.size(); ++i) acc_.emplace_back(live_[i].value.shape());
  }

  const EncoderDims& enc_dims() const { return enc_; }
  const MixerDims& mix_dims() const { return mix_; }
  const LearnConfig& config() const { return cfg_; }
  ParamSet& live() { return live_; }
  const ParamSet& live() const { return live_; }
  ParamSet& target() { return target_; }
  const ParamSet& target() const { return target_; }
  std::vector<Tensor>& rms_state() { return acc_; }
  long grad_steps() const { return grad_steps_; }
  void set_grad_steps(long n) { grad_steps_ = n; }

  void sync_target() { target_.copy_values_from(live_); }

  // Per-step rollout forward for one team; no gradients kept.
  TeamForward team_forward(const std::vector<EntityObservation>& obs, const Tensor& h_prev,
                           bool use_target = false) {
    const long n = mix_.n_agents;
    if (static_cast<long>(obs.size()) != n)
      throw UsageError("team_forward: expected one observation per agent");
    if (h_prev.rows() != n || h_prev.cols() != enc_.d)
      throw DimError("team_forward: hidden state " + h_prev.shape_str());
    FrameTensors f{Tensor(n * enc_.entities, enc_.d_f), Tensor(n, enc_.tokens()),
                   Tensor(1, mix_.d_state)};
    for (long i = 0; i < n; ++i) fill_group(obs[static_cast<std::size_t>(i)], i, f.ents, f.mask);
    scratch_.clear();
    ParamSet& ps = use_target ? target_ : live_;
    FramePass fp = frame_forward(scratch_, ps, f, scratch_.leaf(h_prev));
    TeamForward out;
    out.q = scratch_.value_tensor(fp.q_all);
    out.h_next = scratch_.value_tensor(fp.h_next);
    if (cfg_.mixer == MixKind::kUnsr) out.z_mix = scratch_.value_tensor(fp.z_mix);
    scratch_.clear();
    return out;
  }

  // Mixes one row of chosen per-agent values outside of training; z_mix comes
  // from team_forward and is ignored by vdn/qmix.
  double mix_value(const Tensor& chosen, const Tensor& z_mix, const Tensor& state,
                   bool use_target = false) {
    if (chosen.rows() != 1 || chosen.cols() != mix_.n_agents)
      throw DimError("mix_value: chosen " + chosen.shape_str());
    Tape tp;
    Ref c = tp.leaf(chosen);
    ParamSet& ps = use_target ? target_ : live_;
    switch (cfg_.mixer) {
      case MixKind::kVdn: return tp.scalar(mix_vdn(tp, c));
      case MixKind::kQmix: return tp.scalar(mix_qmix(tp, ps, mix_, c, tp.leaf(state)));
      case MixKind::kUnsr:
        return tp.scalar(mix_unsr(tp, ps, mix_, c, tp.leaf(z_mix), tp.leaf(state)).q_tot);
    }
    throw UsageError("mix_value: bad mixer kind");
  }

  // TD targets for a batch, longest episode first. y[b][t] = r_t at a
  // terminal step and r_t + gamma * Q_tot(target greedy) everywhere else,
  // including truncation.
  std::vector<std::vector<double>> compute_targets(const std::vector<const Episode*>& batch) {
    check_batch(batch);
    const long n = mix_.n_agents;
    const long bsz = static_cast<long>(batch.size());
    const long max_t = batch[0]->length();

    std::vector<std::vector<double>> boot(static_cast<std::size_t>(bsz));
    for (long b = 0; b < bsz; ++b)
      boot[static_cast<std::size_t>(b)].assign(
          static_cast<std::size_t>(batch[static_cast<std::size_t>(b)]->length()) + 1, 0.0);

    scratch_.clear();
    Tape& tp = scratch_;
    Ref h = tp.leaf(Tensor(bsz * n, enc_.d));
    for (long t = 0; t <= max_t; ++t) {
      const long a = count_with_length_at_least(batch, t);
      if (a * n != h.rows) h = tp.slice_rows(h, 0, a * n);
      FrameTensors f = gather_frame(batch, t, a);
      FramePass fp = frame_forward(tp, target_, f, h);
      h = fp.h_next;
      if (t == 0) continue;
      Tensor qv = tp.value_tensor(fp.q_all);
      Tensor greedy(a, n);
      for (long b = 0; b < a; ++b) {
        const Episode& ep = *batch[static_cast<std::size_t>(b)];
        for (long i = 0; i < n; ++i) {
          const auto& av = ep.avail[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
          long best = -1;
          for (long j = 0; j < enc_.n_actions; ++j)
            if (av[static_cast<std::size_t>(j)] != 0 &&
                (best < 0 || qv(b * n + i, j) > qv(b * n + i, best)))
              best = j;
          if (best < 0) throw ContractError("compute_targets: agent with no available action");
          greedy(b, i) = qv(b * n + i, best);
        }
      }
      Ref qtot = mix_chosen(tp, target_, tp.leaf(greedy), fp, tp.leaf(f.state));
      Tensor qt = tp.value_tensor(qtot);
      for (long b = 0; b < a; ++b) boot[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] = qt(b, 0);
    }
    scratch_.clear();

    std::vector<std::vector<double>> y(static_cast<std::size_t>(bsz));
    for (long b = 0; b < bsz; ++b) {
      const Episode& ep = *batch[static_cast<std::size_t>(b)];
      const long len = ep.length();
      y[static_cast<std::size_t>(b)].resize(static_cast<std::size_t>(len));
      for (long t = 0; t < len; ++t) {
        const double r = ep.rewards[static_cast<std::size_t>(t)];
        const bool terminal = ep.terminated && t == len - 1;
        y[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] =
            terminal ? r : r + cfg_.gamma * boot[static_cast<std::size_t>(b)][static_cast<std::size_t>(t) + 1];
      }
    }
    return y;
  }

  // Builds the live TD loss, runs backward, leaves gradients in live().
  // No clipping, no update; callers that want a full step use train_step.
  TrainStats loss_and_grads(std::vector<const Episode*> batch) {
    sort_batch(batch);
    const auto y = compute_targets(batch);
    TrainStats st = live_pass(batch, y, true);
    return st;
  }

  // Loss value only; never touches gradients. Targets still come from the
  // target network, so this is a pure function of the live parameters.
  double loss_only(std::vector<const Episode*> batch) {
    sort_batch(batch);
    const auto y = compute_targets(batch);
    return live_pass(batch, y, false).loss;
  }

  TrainStats train_step(std::vector<const Episode*> batch) {
    TrainStats st = loss_and_grads(std::move(batch));
    st.grad_norm = clip_global_norm(live_, cfg_.clip_norm);
    rmsprop_step(live_, acc_, cfg_.lr, cfg_.rms_decay, cfg_.rms_eps);
    ++grad_steps_;
    if (cfg_.target_interval > 0 && grad_steps_ % cfg_.target_interval == 0) {
      sync_target();
      st.synced = true;
    }
    return st;
  }

 private:
  struct FrameTensors {
    Tensor ents;   // (A*n*entities) x d_f
    Tensor mask;   // (A*n) x tokens
    Tensor state;  // A x d_state
  };

  struct FramePass {
    Ref q_all;   // (A*n) x n_actions
    Ref h_next;  // (A*n) x d
    Ref z_mix;   // (A*n) x mixer width, set only for the unsr mixer
  };

  void register_all(ParamSet& ps, RngStream& rng) {
    register_encoder(ps, enc_, rng);
    if (cfg_.mixer == MixKind::kUnsr) register_unsr_mixer(ps, mix_, rng);
    if (cfg_.mixer == MixKind::kQmix) register_qmix_mixer(ps, mix_, rng);
  }

  static void sort_batch(std::vector<const Episode*>& batch) {
    std::stable_sort(batch.begin(), batch.end(),
                     [](const Episode* a, const Episode* b) { return a->length() > b->length(); });
  }

  void check_batch(const std::vector<const Episode*>& batch) const {
    if (batch.empty()) throw UsageError("Learner: empty batch");
    for (std::size_t b = 0; b < batch.size(); ++b) {
      batch[b]->validate();
      if (b > 0 && batch[b]->length() > batch[b - 1]->length())
        throw UsageError("Learner: batch must be sorted longest first");
    }
  }

  static long count_with_length_at_least(const std::vector<const Episode*>& batch, long t) {
    long a = 0;
    while (a < static_cast<long>(batch.size()) &&
           batch[static_cast<std::size_t>(a)]->length() >= t)
      ++a;
    return a;
  }

  static long count_with_length_above(const std::vector<const Episode*>& batch, long t) {
    long a = 0;
    while (a < static_cast<long>(batch.size()) && batch[static_cast<std::size_t>(a)]->length() > t)
      ++a;
    return a;
  }

  void fill_group(const EntityObservation& o, long group, Tensor& ents, Tensor& mask) const {
    Tensor rows = o.stacked();
    if (rows.rows() != enc_.entities || rows.cols() != enc_.d_f)
      throw DimError("Learner: observation shape " + rows.shape_str());
    for (long r = 0; r < enc_.entities; ++r)
      for (long c = 0; c < enc_.d_f; ++c) ents(group * enc_.entities + r, c) = rows(r, c);
    Tensor tm = token_mask(o);
    for (long c = 0; c < enc_.tokens(); ++c) mask(group, c) = tm(0, c);
  }

  FrameTensors gather_frame(const std::vector<const Episode*>& batch, long t, long a) const {
    const long n = mix_.n_agents;
    FrameTensors f{Tensor(a * n * enc_.entities, enc_.d_f), Tensor(a * n, enc_.tokens()),
                   Tensor(a, mix_.d_state)};
    for (long b = 0; b < a; ++b) {
      const Episode& ep = *batch[static_cast<std::size_t>(b)];
      const Tensor& st = ep.states[static_cast<std::size_t>(t)];
      for (long c = 0; c < mix_.d_state; ++c) f.state(b, c) = st(0, c);
      for (long i = 0; i < n; ++i)
        fill_group(ep.obs[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)], b * n + i,
                   f.ents, f.mask);
    }
    return f;
  }

  FramePass frame_forward(Tape& tp, ParamSet& ps, const FrameTensors& f, Ref h_prev) {
    Ref emb =
        tp.linear(tp.leaf(f.ents), tp.param(ps.at("enc.emb.w")), tp.param(ps.at("enc.emb.b")));
    EncoderCore core = encoder_core(tp, ps, enc_, h_prev, emb, f.mask);
    Ref z = unit_state(tp, ps, enc_, core.f, enc_.tokens());
    FramePass out;
    out.q_all = q_head(tp, ps, z);
    out.h_next = core.h_next;
    if (cfg_.mixer == MixKind::kUnsr) {
      switch (cfg_.variant) {
        case ZVariant::kFull:
          out.z_mix = z;
          break;
        case ZVariant::kHidden:
          out.z_mix = core.h_next;
          break;
        case ZVariant::kObsOnly: {
          Tensor em(f.mask.rows(), enc_.entities);
          for (long r = 0; r < em.rows(); ++r)
            for (long c = 0; c < enc_.entities; ++c) em(r, c) = f.mask(r, c + 1);
          out.z_mix = unit_state_obs_only(tp, ps, enc_, emb, em);
          break;
        }
        case ZVariant::kRawObs: {
          Tensor flat(f.mask.rows(), enc_.entities * enc_.d_f);
          for (long g = 0; g < flat.rows(); ++g)
            for (long r = 0; r < enc_.entities; ++r)
              for (long c = 0; c < enc_.d_f; ++c)
                flat(g, r * enc_.d_f + c) = f.ents(g * enc_.entities + r, c);
          out.z_mix = tp.leaf(flat);
          break;
        }
      }
    }
    return out;
  }

  Ref mix_chosen(Tape& tp, ParamSet& ps, Ref chosen, const FramePass& fp, Ref state) {
    switch (cfg_.mixer) {
      case MixKind::kVdn: return mix_vdn(tp, chosen);
      case MixKind::kQmix: return mix_qmix(tp, ps, mix_, chosen, state);
      case MixKind::kUnsr: return mix_unsr(tp, ps, mix_, chosen, fp.z_mix, state).q_tot;
    }
    throw UsageError("mix_chosen: bad mixer kind");
  }

  TrainStats live_pass(const std::vector<const Episode*>& batch,
                       const std::vector<std::vector<double>>& y, bool with_grads) {
    const long n = mix_.n_agents;
    const long bsz = static_cast<long>(batch.size());
    const long max_t = batch[0]->length();

    scratch_.clear();
    Tape& tp = scratch_;
    Ref h = tp.leaf(Tensor(bsz * n, enc_.d));
    Ref total{};
    long count = 0;
    double qtot_sum = 0.0;
    for (long t = 0; t < max_t; ++t) {
      const long a = count_with_length_above(batch, t);
      if (a * n != h.rows) h = tp.slice_rows(h, 0, a * n);
      FrameTensors f = gather_frame(batch, t, a);
      FramePass fp = frame_forward(tp, live_, f, h);
      h = fp.h_next;

      std::vector<long> idx(static_cast<std::size_t>(a * n));
      for (long b = 0; b < a; ++b)
        for (long i = 0; i < n; ++i)
          idx[static_cast<std::size_t>(b * n + i)] =
              batch[static_cast<std::size_t>(b)]->actions[static_cast<std::size_t>(t)]
                                                 [static_cast<std::size_t>(i)];
      Ref chosen = tp.reshape(tp.gather_cols(fp.q_all, idx), a, n);
      Ref qtot = mix_chosen(tp, live_, chosen, fp, tp.leaf(f.state));

      Tensor yt(a, 1);
      for (long b = 0; b < a; ++b)
        yt(b, 0) = y[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
      Ref err = tp.sub(qtot, tp.leaf(yt));
      Ref se = tp.sum_all(tp.hadamard(err, err));
      total = t == 0 ? se : tp.add(total, se);
      count += a;

      Tensor qv = tp.value_tensor(qtot);
      for (long b = 0; b < a; ++b) qtot_sum += qv(b, 0);
    }

    Ref loss = tp.scale(total, 1.0 / static_cast<double>(count));
    TrainStats st;
    st.loss = tp.scalar(loss);
    st.q_tot_mean = qtot_sum / static_cast<double>(count);
    if (with_grads) {
      live_.zero_grads();
      tp.backward(loss);
    }
    scratch_.clear();
    return st;
  }

  LearnConfig cfg_;
  EncoderDims enc_;
  MixerDims mix_;
  ParamSet live_;
  ParamSet target_;
  std::vector<Tensor> acc_;
  Tape scratch_;
  long grad_steps_ = 0;
};

}  // namespace unsr
