#pragma once

#include <string>
#include <vector>

#include "unsr/env.hpp"
#include "unsr/param.hpp"
#include "unsr/tape.hpp"

namespace unsr {

// Width bookkeeping for the unit-wise attentive encoder. `entities` counts
// observation rows (self + allies + others); the hidden slot adds one token.
struct EncoderDims {
  long d_f = 0;
  long n_actions = 0;
  long entities = 0;
  long d = 32;
  long d_z = 32;
  long heads = 3;
  long blocks = 2;
  long q_hidden = 64;

  // Head width floor(d/heads); the concat width heads*d_h need not equal d,
  // the output projection maps it back to d.
  long d_h() const { return d / heads; }
  long tokens() const { return entities + 1; }

  static EncoderDims from_spec(const EnvSpec& s) {
    EncoderDims dm;
    dm.d_f = s.d_f;
    dm.n_actions = s.n_actions;
    dm.entities = s.entity_rows();
    return dm;
  }
};

namespace enc_detail {
inline std::string bname(long b, long h, const char* leaf) {
  return "enc.block" + std::to_string(b) + ".head" + std::to_string(h) + "." + leaf;
}
inline std::string bname(long b, const char* leaf) {
  return "enc.block" + std::to_string(b) + "." + leaf;
}
}  // namespace enc_detail

// One shared parameter set serves every agent; identity enters only through
// observation content.
inline void register_encoder(ParamSet& ps, const EncoderDims& dm, RngStream& rng) {
  using enc_detail::bname;
  if (dm.d_h() < 1) throw UsageError("register_encoder: more heads than model width");
  ps.add_linear("enc.emb.w", {dm.d_f, dm.d}, dm.d_f, rng);
  ps.add_linear("enc.emb.b", {1, dm.d}, dm.d_f, rng);
  for (long b = 0; b < dm.blocks; ++b) {
    for (long h = 0; h < dm.heads; ++h) {
      ps.add_linear(bname(b, h, "wq"), {dm.d, dm.d_h()}, dm.d, rng);
      ps.add_linear(bname(b, h, "wk"), {dm.d, dm.d_h()}, dm.d, rng);
      ps.add_linear(bname(b, h, "wv"), {dm.d, dm.d_h()}, dm.d, rng);
    }
    ps.add_linear(bname(b, "mha.w"), {dm.heads * dm.d_h(), dm.d}, dm.heads * dm.d_h(), rng);
    ps.add(bname(b, "ln1.g"), {1, dm.d}).value.fill(1.0);
    ps.add(bname(b, "ln1.b"), {1, dm.d});
    ps.add_linear(bname(b, "mlp.w1"), {dm.d, dm.d}, dm.d, rng);
    ps.add_linear(bname(b, "mlp.b1"), {1, dm.d}, dm.d, rng);
    ps.add_linear(bname(b, "mlp.w2"), {dm.d, dm.d}, dm.d, rng);
    ps.add_linear(bname(b, "mlp.b2"), {1, dm.d}, dm.d, rng);
    ps.add(bname(b, "ln2.g"), {1, dm.d}).value.fill(1.0);
    ps.add(bname(b, "ln2.b"), {1, dm.d});
  }
  ps.add_linear("enc.zemb.w", {dm.d, dm.d_z}, dm.d, rng);
  ps.add_linear("enc.zemb.b", {1, dm.d_z}, dm.d, rng);
  ps.add_linear("enc.q1.w", {dm.d_z, dm.q_hidden}, dm.d_z, rng);
  ps.add_linear("enc.q1.b", {1, dm.q_hidden}, dm.d_z, rng);
  ps.add_linear("enc.q2.w", {dm.q_hidden, dm.n_actions}, dm.q_hidden, rng);
  ps.add_linear("enc.q2.b", {1, dm.n_actions}, dm.q_hidden, rng);
}

// Expands per-group key masks (G x gsize) to one row per query (G*gsize x gsize).
inline Tensor expand_key_mask(const Tensor& group_mask, long gsize) {
  const long g = group_mask.rows();
  Tensor full(g * gsize, gsize);
  for (long i = 0; i < g; ++i)
    for (long r = 0; r < gsize; ++r)
      for (long c = 0; c < gsize; ++c) full(i * gsize + r, c) = group_mask(i, c);
  return full;
}

// N post-norm transformer blocks over stacked token groups of uniform size.
// Masked tokens never contribute as keys/values but remain query rows.
inline Ref encoder_blocks(Tape& tp, ParamSet& ps, const EncoderDims& dm, Ref x, long gsize,
                          const Tensor& full_mask, std::vector<Ref>* attn_out) {
  using enc_detail::bname;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dm.d_h()));
  for (long b = 0; b < dm.blocks; ++b) {
    std::vector<Ref> ctx;
    for (long h = 0; h < dm.heads; ++h) {
      Ref q = tp.matmul(x, tp.param(ps.at(bname(b, h, "wq"))));
      Ref k = tp.matmul(x, tp.param(ps.at(bname(b, h, "wk"))));
      Ref v = tp.matmul(x, tp.param(ps.at(bname(b, h, "wv"))));
      Ref scores = tp.scale(tp.group_matmul_nt(q, k, gsize, gsize), inv_sqrt_dh);
      Ref probs = tp.softmax_rows_masked(scores, full_mask);
      if (attn_out != nullptr) attn_out->push_back(probs);
      ctx.push_back(tp.group_matmul(probs, v, gsize, gsize));
    }
    Ref att = tp.matmul(tp.concat_cols(ctx), tp.param(ps.at(bname(b, "mha.w"))));
    x = tp.layer_norm_affine(tp.add(x, att), tp.param(ps.at(bname(b, "ln1.g"))),
                             tp.param(ps.at(bname(b, "ln1.b"))));
    Ref hidden = tp.relu(tp.linear(x, tp.param(ps.at(bname(b, "mlp.w1"))),
                                   tp.param(ps.at(bname(b, "mlp.b1")))));
    Ref mlp = tp.linear(hidden, tp.param(ps.at(bname(b, "mlp.w2"))),
                        tp.param(ps.at(bname(b, "mlp.b2"))));
    x = tp.layer_norm_affine(tp.add(x, mlp), tp.param(ps.at(bname(b, "ln2.g"))),
                             tp.param(ps.at(bname(b, "ln2.b"))));
  }
  return x;
}

struct EncoderCore {
  Ref f;       // (G*tokens) x d
  Ref h_next;  // G x d, row 0 of each group
  std::vector<Ref> attn;  // blocks*heads attention probability nodes
};

// Stacked forward over G (episode, agent) pairs. `emb` holds the embedded
// entity rows ((G*entities) x d); `group_mask` is G x tokens with the hidden
// slot in column 0 (always 1) followed by per-entity visibility.
inline EncoderCore encoder_core(Tape& tp, ParamSet& ps, const EncoderDims& dm, Ref h_prev,
                                Ref emb, const Tensor& group_mask) {
  const long g = h_prev.rows;
  if (h_prev.cols != dm.d || emb.rows != g * dm.entities || emb.cols != dm.d)
    throw DimError("encoder_core: hidden " + std::to_string(h_prev.rows) + "x" +
                   std::to_string(h_prev.cols) + ", emb " + std::to_string(emb.rows) + "x" +
                   std::to_string(emb.cols));
  if (group_mask.rows() != g || group_mask.cols() != dm.tokens())
    throw DimError("encoder_core: group mask shape " + group_mask.shape_str());
  for (long i = 0; i < g; ++i)
    if (group_mask(i, 0) != 1.0) throw UsageError("encoder_core: hidden slot must be unmasked");

  EncoderCore out;
  Ref x = tp.interleave_rows(h_prev, emb, dm.entities);
  Tensor full = expand_key_mask(group_mask, dm.tokens());
  out.f = encoder_blocks(tp, ps, dm, x, dm.tokens(), full, &out.attn);
  out.h_next = tp.rows_every(out.f, dm.tokens(), 0);
  return out;
}

// Mean-pool token rows (hidden slot included) then the Emb layer with ReLU.
inline Ref unit_state(Tape& tp, ParamSet& ps, const EncoderDims& dm, Ref f, long gsize) {
  Ref pooled = tp.group_mean_rows(f, gsize);
  return tp.relu(tp.linear(pooled, tp.param(ps.at("enc.zemb.w")), tp.param(ps.at("enc.zemb.b"))));
}

// Ablation variant E: unit state from an encoder pass without the hidden slot.
inline Ref unit_state_obs_only(Tape& tp, ParamSet& ps, const EncoderDims& dm, Ref emb,
                               const Tensor& entity_mask) {
  Tensor full = expand_key_mask(entity_mask, dm.entities);
  Ref f = encoder_blocks(tp, ps, dm, emb, dm.entities, full, nullptr);
  return unit_state(tp, ps, dm, f, dm.entities);
}

inline Ref q_head(Tape& tp, ParamSet& ps, Ref z) {
  Ref hidden = tp.relu(tp.linear(z, tp.param(ps.at("enc.q1.w")), tp.param(ps.at("enc.q1.b"))));
  return tp.linear(hidden, tp.param(ps.at("enc.q2.w")), tp.param(ps.at("enc.q2.b")));
}

inline Tensor init_hidden(const EncoderDims& dm, long groups = 1) {
  return Tensor(groups, dm.d);
}

// Single-observation wrappers.

inline Ref embed_entities(Tape& tp, ParamSet& ps, const EncoderDims& dm,
                          const EntityObservation& obs) {
  Tensor rows = obs.stacked();
  if (rows.cols() != dm.d_f || rows.rows() != dm.entities)
    throw DimError("embed_entities: observation shape " + rows.shape_str());
  return tp.linear(tp.leaf(rows), tp.param(ps.at("enc.emb.w")), tp.param(ps.at("enc.emb.b")));
}

// 1 x tokens mask: hidden slot, self, then per-entity visibility.
inline Tensor token_mask(const EntityObservation& obs) {
  Tensor em = obs.entity_mask();
  Tensor m(1, em.cols() + 1);
  m(0, 0) = 1.0;
  for (long j = 0; j < em.cols(); ++j) m(0, j + 1) = em(0, j);
  return m;
}

inline EncoderCore encoder_forward(Tape& tp, ParamSet& ps, const EncoderDims& dm, Ref entities,
                                   Ref h_prev, const Tensor& mask) {
  return encoder_core(tp, ps, dm, h_prev, entities, mask);
}

// Epsilon-greedy action over the available set; greedy ties break low.
inline long act(const Tensor& q, const std::vector<int>& avail, double eps, RngStream& rng) {
  if (q.rows() != 1 || q.cols() != static_cast<long>(avail.size()))
    throw DimError("act: q is " + q.shape_str() + " for " + std::to_string(avail.size()) +
                   " actions");
  long n_avail = 0;
  for (int a : avail) n_avail += a != 0;
  if (n_avail == 0) throw ContractError("act: no available action");
  if (rng.uniform() < eps) {
    long pick = static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(n_avail)));
    for (long j = 0; j < q.cols(); ++j)
      if (avail[static_cast<std::size_t>(j)] != 0 && pick-- == 0) return j;
  }
  long best = -1;
  for (long j = 0; j < q.cols(); ++j)
    if (avail[static_cast<std::size_t>(j)] != 0 && (best < 0 || q(0, j) > q(0, best))) best = j;
  return best;
}

}  // namespace unsr
