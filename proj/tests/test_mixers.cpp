#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "unsr/gradcheck.hpp"
#include "unsr/mixer.hpp"

using namespace unsr;

namespace {

MixerDims small_dims() {
  MixerDims dm;
  dm.d_state = 5;
  dm.d_z = 4;
  dm.n_agents = 3;
  dm.heads = 2;
  dm.embed = 6;
  dm.hyper_hidden = 7;
  return dm;
}

struct UnsrEval {
  Tensor q_tot;
  Tensor head_weights;
  std::vector<Tensor> alphas;
  std::vector<Tensor> q_heads;
};

UnsrEval eval_unsr(ParamSet& ps, const MixerDims& dm, const Tensor& q, const Tensor& z,
                   const Tensor& s, bool abs_weights = true) {
  Tape tp;
  MixResult r = mix_unsr(tp, ps, dm, tp.leaf(q), tp.leaf(z), tp.leaf(s), abs_weights);
  UnsrEval out;
  out.q_tot = tp.value_tensor(r.q_tot);
  out.head_weights = tp.value_tensor(r.head_weights);
  for (const Ref& a : r.alphas) out.alphas.push_back(tp.value_tensor(a));
  for (const Ref& h : r.q_heads) out.q_heads.push_back(tp.value_tensor(h));
  return out;
}

}  // namespace

TEST_CASE("mixer registration shapes") {
  MixerDims dm;
  dm.d_state = 30;
  dm.d_z = 32;
  dm.n_agents = 3;

  ParamSet ps;
  RngStream rng("init", 3);
  register_unsr_mixer(ps, dm, rng);
  CHECK(ps.size() == 12);
  CHECK(ps.at("mix.head0.ws").value.rows() == 30);
  CHECK(ps.at("mix.head0.ws").value.cols() == 32);
  CHECK(ps.at("mix.head3.wz").value.rows() == 32);
  CHECK(ps.at("mix.hyper.w1").value.cols() == 64);
  CHECK(ps.at("mix.hyper.w2").value.rows() == 64);
  CHECK(ps.at("mix.hyper.w2").value.cols() == 4);

  ParamSet qp;
  register_qmix_mixer(qp, dm, rng);
  CHECK(qp.size() == 14);
  CHECK(qp.at("qmix.w1.b").value.cols() == 3 * 32);
  CHECK(qp.at("qmix.b2.w2").value.rows() == 32);
  CHECK(qp.at("qmix.b2.w2").value.cols() == 1);
}

TEST_CASE("identical unit states attract uniform attention") {
  MixerDims dm = small_dims();
  ParamSet ps;
  RngStream rng("init", 5);
  register_unsr_mixer(ps, dm, rng);

  RngStream data("data", 1);
  const long b = 2;
  Tensor q = detail::rand_tensor(data, b, dm.n_agents);
  Tensor s = detail::rand_tensor(data, b, dm.d_state);
  Tensor z(b * dm.n_agents, dm.d_z);
  for (long e = 0; e < b; ++e) {
    Tensor row = detail::rand_tensor(data, 1, dm.d_z);
    for (long i = 0; i < dm.n_agents; ++i)
      for (long c = 0; c < dm.d_z; ++c) z(e * dm.n_agents + i, c) = row(0, c);
  }

  UnsrEval r = eval_unsr(ps, dm, q, z, s);
  const double uniform = 1.0 / static_cast<double>(dm.n_agents);
  for (const Tensor& a : r.alphas)
    for (long i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - uniform) <= 1e-15);
}

TEST_CASE("attention weights form a simplex and heads stay in the value envelope") {
  MixerDims dm = small_dims();
  ParamSet ps;
  RngStream rng("init", 7);
  register_unsr_mixer(ps, dm, rng);

  RngStream data("data", 2);
  for (int trial = 0; trial < 50; ++trial) {
    const long b = 3;
    Tensor q = detail::rand_tensor(data, b, dm.n_agents, -5.0, 5.0);
    Tensor z = detail::rand_tensor(data, b * dm.n_agents, dm.d_z);
    Tensor s = detail::rand_tensor(data, b, dm.d_state);
    UnsrEval r = eval_unsr(ps, dm, q, z, s);

    REQUIRE(r.alphas.size() == static_cast<std::size_t>(dm.heads));
    for (const Tensor& a : r.alphas) {
      for (long e = 0; e < b; ++e) {
        double sum = 0.0;
        for (long i = 0; i < dm.n_agents; ++i) {
          CHECK(a(e, i) >= 0.0);
          sum += a(e, i);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
    }
    for (const Tensor& qh : r.q_heads) {
      for (long e = 0; e < b; ++e) {
        double lo = q(e, 0), hi = q(e, 0);
        for (long i = 1; i < dm.n_agents; ++i) {
          lo = std::min(lo, q(e, i));
          hi = std::max(hi, q(e, i));
        }
        CHECK(qh(e, 0) >= lo - 1e-12);
        CHECK(qh(e, 0) <= hi + 1e-12);
      }
    }
    for (long e = 0; e < b; ++e)
      for (long j = 0; j < dm.heads; ++j) CHECK(r.head_weights(e, j) >= 0.0);
  }
}

TEST_CASE("vdn is an exact sum") {
  RngStream data("data", 3);
  Tensor q = detail::rand_tensor(data, 4, 3, -5.0, 5.0);
  Tape tp;
  Tensor out = tp.value_tensor(mix_vdn(tp, tp.leaf(q)));
  REQUIRE(out.rows() == 4);
  REQUIRE(out.cols() == 1);
  for (long e = 0; e < 4; ++e) CHECK(out(e, 0) == q(e, 0) + q(e, 1) + q(e, 2));
}

TEST_CASE("unsr mixer is monotone in every agent value") {
  MixerDims dm = small_dims();
  RngStream data("data", 4);
  double min_deriv = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 60; ++trial) {
    ParamSet ps;
    RngStream rng("init", 100 + trial);
    register_unsr_mixer(ps, dm, rng);
    Tensor q0 = detail::rand_tensor(data, 1, dm.n_agents, -5.0, 5.0);
    Tensor z = detail::rand_tensor(data, dm.n_agents, dm.d_z);
    Tensor s = detail::rand_tensor(data, 1, dm.d_state);
    auto f = [&](const Tensor& q) { return eval_unsr(ps, dm, q, z, s).q_tot(0, 0); };
    min_deriv = std::min(min_deriv, monotonicity_probe(f, q0));
  }
  CHECK(min_deriv >= -1e-8);
}

TEST_CASE("removing the absolute value is caught by the probe") {
  MixerDims dm = small_dims();
  RngStream data("data", 5);
  double min_deriv = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 60; ++trial) {
    ParamSet ps;
    RngStream rng("init", 200 + trial);
    register_unsr_mixer(ps, dm, rng);
    Tensor q0 = detail::rand_tensor(data, 1, dm.n_agents, -5.0, 5.0);
    Tensor z = detail::rand_tensor(data, dm.n_agents, dm.d_z);
    Tensor s = detail::rand_tensor(data, 1, dm.d_state);
    auto f = [&](const Tensor& q) { return eval_unsr(ps, dm, q, z, s, false).q_tot(0, 0); };
    min_deriv = std::min(min_deriv, monotonicity_probe(f, q0));
  }
  CHECK(min_deriv < -1e-6);
}

TEST_CASE("qmix baseline is monotone and uses its bias path") {
  MixerDims dm = small_dims();
  RngStream data("data", 6);
  double min_deriv = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 60; ++trial) {
    ParamSet ps;
    RngStream rng("init", 300 + trial);
    register_qmix_mixer(ps, dm, rng);
    Tensor q0 = detail::rand_tensor(data, 1, dm.n_agents, -5.0, 5.0);
    Tensor s = detail::rand_tensor(data, 1, dm.d_state);
    auto f = [&](const Tensor& q) {
      Tape tp;
      return tp.value_tensor(mix_qmix(tp, ps, dm, tp.leaf(q), tp.leaf(s)))(0, 0);
    };
    min_deriv = std::min(min_deriv, monotonicity_probe(f, q0));
  }
  CHECK(min_deriv >= -1e-8);

  // Zero agent values: the state-value path alone must move the output.
  ParamSet ps;
  RngStream rng("init", 400);
  register_qmix_mixer(ps, dm, rng);
  Tensor q0(1, dm.n_agents);
  Tensor s1 = detail::rand_tensor(data, 1, dm.d_state);
  Tensor s2 = detail::rand_tensor(data, 1, dm.d_state);
  Tape tp;
  double a = tp.value_tensor(mix_qmix(tp, ps, dm, tp.leaf(q0), tp.leaf(s1)))(0, 0);
  Tape tp2;
  double b = tp2.value_tensor(mix_qmix(tp2, ps, dm, tp2.leaf(q0), tp2.leaf(s2)))(0, 0);
  CHECK(std::abs(a - b) > 1e-9);
}

TEST_CASE("mixer gradients match finite differences") {
  MixerDims dm = small_dims();
  RngStream data("data", 7);

  SECTION("unsr") {
    ParamSet ps;
    RngStream rng("init", 500);
    register_unsr_mixer(ps, dm, rng);
    const long b = 2;
    Tensor w = detail::rand_tensor(data, b, 1);
    auto build = [&](Tape& tp, const std::vector<Ref>& in) {
      return detail::weigh(tp, mix_unsr(tp, ps, dm, in[0], in[1], in[2]).q_tot, w);
    };
    std::vector<Tensor> xs = {detail::rand_tensor(data, b, dm.n_agents),
                              detail::rand_tensor(data, b * dm.n_agents, dm.d_z),
                              detail::rand_tensor(data, b, dm.d_state)};
    CHECK(check_gradients(build, xs) <= 1e-4);

    Tape tp;
    std::vector<Ref> in = {tp.leaf(xs[0]), tp.leaf(xs[1]), tp.leaf(xs[2])};
    ps.zero_grads();
    tp.backward(build(tp, in));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double norm = 0.0;
      for (double gv : ps[i].grad.values()) norm += gv * gv;
      INFO(ps[i].name);
      CHECK(norm > 0.0);
    }
  }

  SECTION("qmix") {
    ParamSet ps;
    RngStream rng("init", 600);
    register_qmix_mixer(ps, dm, rng);
    const long b = 2;
    Tensor w = detail::rand_tensor(data, b, 1);
    auto build = [&](Tape& tp, const std::vector<Ref>& in) {
      return detail::weigh(tp, mix_qmix(tp, ps, dm, in[0], in[1]), w);
    };
    std::vector<Tensor> xs = {detail::rand_tensor(data, b, dm.n_agents),
                              detail::rand_tensor(data, b, dm.d_state)};
    CHECK(check_gradients(build, xs) <= 1e-4);
  }
}

TEST_CASE("batched mixing matches independent single rows") {
  MixerDims dm = small_dims();
  ParamSet ps;
  RngStream rng("init", 700);
  register_unsr_mixer(ps, dm, rng);

  RngStream data("data", 8);
  const long b = 3;
  Tensor q = detail::rand_tensor(data, b, dm.n_agents);
  Tensor z = detail::rand_tensor(data, b * dm.n_agents, dm.d_z);
  Tensor s = detail::rand_tensor(data, b, dm.d_state);
  UnsrEval full = eval_unsr(ps, dm, q, z, s);

  for (long e = 0; e < b; ++e) {
    Tensor qe(1, dm.n_agents);
    Tensor ze(dm.n_agents, dm.d_z);
    Tensor se(1, dm.d_state);
    for (long i = 0; i < dm.n_agents; ++i) {
      qe(0, i) = q(e, i);
      for (long c = 0; c < dm.d_z; ++c) ze(i, c) = z(e * dm.n_agents + i, c);
    }
    for (long c = 0; c < dm.d_state; ++c) se(0, c) = s(e, c);
    UnsrEval one = eval_unsr(ps, dm, qe, ze, se);
    CHECK(std::abs(full.q_tot(e, 0) - one.q_tot(0, 0)) <= 1e-12);
  }
}

TEST_CASE("mixer rejects mismatched shapes") {
  MixerDims dm = small_dims();
  ParamSet ps;
  RngStream rng("init", 800);
  register_unsr_mixer(ps, dm, rng);
  RngStream data("data", 9);
  Tape tp;
  Ref q = tp.leaf(detail::rand_tensor(data, 2, dm.n_agents));
  Ref z = tp.leaf(detail::rand_tensor(data, 2 * dm.n_agents, dm.d_z));
  Ref s_bad = tp.leaf(detail::rand_tensor(data, 2, dm.d_state + 1));
  CHECK_THROWS_AS(mix_unsr(tp, ps, dm, q, z, s_bad), DimError);
  Ref z_bad = tp.leaf(detail::rand_tensor(data, 2 * dm.n_agents + 1, dm.d_z));
  Ref s = tp.leaf(detail::rand_tensor(data, 2, dm.d_state));
  CHECK_THROWS_AS(mix_unsr(tp, ps, dm, q, z_bad, s), DimError);
}
