#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unsr/rng.hpp"
#include "unsr/tape.hpp"

namespace unsr {

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
template <class F>
Tensor finite_diff(F&& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (long i = 0; i < x.numel(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Worst elementwise error, relative above magnitude 1 and absolute below.
inline double grad_err(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimError("grad_err: " + a.shape_str() + " vs " + b.shape_str());
  double worst = 0.0;
  for (long i = 0; i < a.numel(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

using GraphBuilder = std::function<Ref(Tape&, const std::vector<Ref>&)>;

// Builds the graph once for analytic gradients, then compares the gradient of
// the scalar root with finite differences for every input tensor. Returns the
// worst observed error.
inline double check_gradients(const GraphBuilder& build, const std::vector<Tensor>& xs,
                              double h = 1e-5) {
  Tape tp;
  std::vector<Ref> refs;
  refs.reserve(xs.size());
  for (const Tensor& x : xs) refs.push_back(tp.leaf(x));
  Ref root = build(tp, refs);
  tp.backward(root);
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Tensor analytic = tp.grad_tensor(refs[i]);
    auto f = [&](const Tensor& xi) {
      Tape t2;
      std::vector<Ref> r2;
      r2.reserve(xs.size());
      for (std::size_t j = 0; j < xs.size(); ++j)
        r2.push_back(t2.leaf(j == i ? xi : xs[j]));
      return t2.scalar(build(t2, r2));
    };
    worst = std::max(worst, grad_err(analytic, finite_diff(f, xs[i], h)));
  }
  return worst;
}

struct OpCheck {
  std::string name;
  double tol = 0.0;
  double max_err = 0.0;
  int trials = 0;
  bool pass = false;
};

namespace detail {

inline Tensor rand_tensor(RngStream& rng, long r, long c, double lo = -2.0, double hi = 2.0) {
  Tensor t(r, c);
  for (double& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero so a 1e-5 step never crosses a kink.
inline Tensor rand_off_kink(RngStream& rng, long r, long c, double margin = 1e-3) {
  Tensor t = rand_tensor(rng, r, c);
  for (double& x : t.values())
    while (std::abs(x) < margin) x = rng.uniform(-2.0, 2.0);
  return t;
}

inline Tensor rand_mask(RngStream& rng, long r, long c) {
  Tensor m(r, c);
  for (long i = 0; i < r; ++i) {
    long on = 0;
    for (long j = 0; j < c; ++j) {
      m(i, j) = rng.uniform() < 0.5 ? 1.0 : 0.0;
      on += static_cast<long>(m(i, j));
    }
    if (on == 0) m(i, rng.uniform_int(c)) = 1.0;
  }
  return m;
}

// Weighted sum turns any output into a scalar with asymmetric sensitivities.
inline Ref weigh(Tape& tp, Ref out, const Tensor& w) {
  return tp.sum_all(tp.hadamard(out, tp.leaf(w)));
}

}  // namespace detail

// Randomized finite-difference check of every tape op plus the attention
// composites, `trials` random inputs each. 64-bit, central differences.
inline std::vector<OpCheck> run_op_gradchecks(std::uint64_t seed, int trials = 100) {
  using detail::rand_mask;
  using detail::rand_off_kink;
  using detail::rand_tensor;
  using detail::weigh;

  RngStream rng("gradcheck", seed);
  std::vector<OpCheck> checks;

  auto run = [&](const std::string& name, double tol,
                 const std::function<double(RngStream&)>& trial) {
    OpCheck c{name, tol, 0.0, trials, false};
    for (int t = 0; t < trials; ++t) c.max_err = std::max(c.max_err, trial(rng));
    c.pass = c.max_err <= tol;
    checks.push_back(c);
  };

  auto dims = [&](long lo, long hi) { return lo + static_cast<long>(rng.uniform_int(hi - lo + 1)); };

  run("leaf_param", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    Tensor x = rand_tensor(r, m, n), w = rand_tensor(r, m, n);
    Parameter p("p", rand_tensor(r, m, n));
    Tape tp;
    Ref xr = tp.leaf(x);
    Ref pr = tp.param(p);
    Ref root = weigh(tp, tp.add(xr, pr), w);
    p.grad.fill(0.0);
    tp.backward(root);
    auto f = [&](const Tensor& v) {
      Tape t2;
      return t2.scalar(weigh(t2, t2.add(t2.leaf(x), t2.leaf(v)), w));
    };
    return std::max(grad_err(tp.grad_tensor(xr), finite_diff([&](const Tensor& v) {
                      Tape t2;
                      return t2.scalar(weigh(t2, t2.add(t2.leaf(v), t2.leaf(p.value)), w));
                    }, x)),
                    grad_err(p.grad, finite_diff(f, p.value)));
  });

  run("matmul", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), k = dims(1, 5), n = dims(1, 4);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients(
        [&](Tape& tp, const std::vector<Ref>& in) { return weigh(tp, tp.matmul(in[0], in[1]), w); },
        {rand_tensor(r, m, k), rand_tensor(r, k, n)});
  });

  run("matmul_nt", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), k = dims(1, 5), n = dims(1, 4);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.matmul_nt(in[0], in[1]), w);
    }, {rand_tensor(r, m, k), rand_tensor(r, n, k)});
  });

  run("linear", 1e-6, [&, first = true](RngStream& r) mutable {
    const bool big = first || r.uniform() < 0.05;
    first = false;
    const long m = big ? 4 : dims(1, 4);
    const long din = big ? 32 : dims(1, 6);
    const long dout = big ? 32 : dims(1, 6);
    Tensor w = rand_tensor(r, m, dout);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.linear(in[0], in[1], in[2]), w);
    }, {rand_tensor(r, m, din), rand_tensor(r, din, dout), rand_tensor(r, 1, dout)});
  });

  run("group_matmul_nt", 1e-6, [&](RngStream& r) {
    const long groups = dims(1, 3), ga = dims(1, 3), gb = dims(1, 3), d = dims(1, 5);
    Tensor w = rand_tensor(r, groups * ga, gb);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.group_matmul_nt(in[0], in[1], ga, gb), w);
    }, {rand_tensor(r, groups * ga, d), rand_tensor(r, groups * gb, d)});
  });

  run("group_matmul", 1e-6, [&](RngStream& r) {
    const long groups = dims(1, 3), ga = dims(1, 3), gb = dims(1, 3), d = dims(1, 5);
    Tensor w = rand_tensor(r, groups * ga, d);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.group_matmul(in[0], in[1], ga, gb), w);
    }, {rand_tensor(r, groups * ga, gb), rand_tensor(r, groups * gb, d)});
  });

  run("row_bmm", 1e-6, [&](RngStream& r) {
    const long b = dims(1, 4), m = dims(1, 4), k = dims(1, 4);
    Tensor w = rand_tensor(r, b, k);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.row_bmm(in[0], in[1], k), w);
    }, {rand_tensor(r, b, m), rand_tensor(r, b, m * k)});
  });

  auto elementwise = [&](const std::string& name, auto apply, bool kink) {
    run(name, 1e-6, [&, apply, kink](RngStream& r) {
      const long m = dims(1, 4), n = dims(1, 5);
      Tensor w = rand_tensor(r, m, n);
      std::vector<Tensor> xs = {kink ? rand_off_kink(r, m, n) : rand_tensor(r, m, n),
                                rand_tensor(r, m, n)};
      return check_gradients([&, apply](Tape& tp, const std::vector<Ref>& in) {
        return weigh(tp, apply(tp, in), w);
      }, xs);
    });
  };

  elementwise("add", [](Tape& tp, const std::vector<Ref>& in) { return tp.add(in[0], in[1]); },
              false);
  elementwise("sub", [](Tape& tp, const std::vector<Ref>& in) { return tp.sub(in[0], in[1]); },
              false);
  elementwise("hadamard",
              [](Tape& tp, const std::vector<Ref>& in) { return tp.hadamard(in[0], in[1]); },
              false);
  elementwise("relu", [](Tape& tp, const std::vector<Ref>& in) { return tp.relu(in[0]); }, true);
  elementwise("abs_elem", [](Tape& tp, const std::vector<Ref>& in) { return tp.abs_val(in[0]); },
              true);
  elementwise("elu", [](Tape& tp, const std::vector<Ref>& in) { return tp.elu(in[0]); }, true);

  run("scale", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    const double c = r.uniform(-3.0, 3.0);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.scale(in[0], c), w);
    }, {rand_tensor(r, m, n)});
  });

  run("add_row", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.add_row(in[0], in[1]), w);
    }, {rand_tensor(r, m, n), rand_tensor(r, 1, n)});
  });

  run("mul_row", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.mul_row(in[0], in[1]), w);
    }, {rand_tensor(r, m, n), rand_tensor(r, 1, n)});
  });

  run("softmax_rows", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(2, 6);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.softmax_rows(in[0]), w);
    }, {rand_tensor(r, m, n, -3.0, 3.0)});
  });

  run("softmax_rows_masked", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(2, 6);
    Tensor w = rand_tensor(r, m, n);
    Tensor mask = rand_mask(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.softmax_rows_masked(in[0], mask), w);
    }, {rand_tensor(r, m, n, -3.0, 3.0)});
  });

  run("layer_norm", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(2, 8);
    Tensor w = rand_tensor(r, m, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.layer_norm_affine(in[0], in[1], in[2]), w);
    }, {rand_tensor(r, m, n), rand_tensor(r, 1, n), rand_tensor(r, 1, n)});
  });

  run("group_mean_rows", 1e-6, [&](RngStream& r) {
    const long groups = dims(1, 4), gs = dims(1, 4), n = dims(1, 5);
    Tensor w = rand_tensor(r, groups, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.group_mean_rows(in[0], gs), w);
    }, {rand_tensor(r, groups * gs, n)});
  });

  run("row_sum", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    Tensor w = rand_tensor(r, m, 1);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.row_sum(in[0]), w);
    }, {rand_tensor(r, m, n)});
  });

  run("sum_all", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 5);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return tp.sum_all(in[0]);
    }, {rand_tensor(r, m, n)});
  });

  run("concat_rows", 1e-6, [&](RngStream& r) {
    const long n = dims(1, 4), m1 = dims(1, 3), m2 = dims(1, 3), m3 = dims(1, 3);
    Tensor w = rand_tensor(r, m1 + m2 + m3, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.concat_rows({in[0], in[1], in[2]}), w);
    }, {rand_tensor(r, m1, n), rand_tensor(r, m2, n), rand_tensor(r, m3, n)});
  });

  run("concat_cols", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n1 = dims(1, 3), n2 = dims(1, 3), n3 = dims(1, 3);
    Tensor w = rand_tensor(r, m, n1 + n2 + n3);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.concat_cols({in[0], in[1], in[2]}), w);
    }, {rand_tensor(r, m, n1), rand_tensor(r, m, n2), rand_tensor(r, m, n3)});
  });

  run("slice_rows", 1e-6, [&](RngStream& r) {
    const long m = dims(2, 6), n = dims(1, 4);
    const long r0 = static_cast<long>(r.uniform_int(m));
    const long nr = 1 + static_cast<long>(r.uniform_int(m - r0));
    Tensor w = rand_tensor(r, nr, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.slice_rows(in[0], r0, nr), w);
    }, {rand_tensor(r, m, n)});
  });

  run("slice_cols", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(2, 6);
    const long c0 = static_cast<long>(r.uniform_int(n));
    const long nc = 1 + static_cast<long>(r.uniform_int(n - c0));
    Tensor w = rand_tensor(r, m, nc);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.slice_cols(in[0], c0, nc), w);
    }, {rand_tensor(r, m, n)});
  });

  run("rows_every", 1e-6, [&](RngStream& r) {
    const long stride = dims(2, 4), blocks = dims(1, 4), n = dims(1, 4);
    const long offset = static_cast<long>(r.uniform_int(stride));
    Tensor w = rand_tensor(r, blocks, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.rows_every(in[0], stride, offset), w);
    }, {rand_tensor(r, blocks * stride, n)});
  });

  run("interleave_rows", 1e-6, [&](RngStream& r) {
    const long groups = dims(1, 4), k = dims(1, 3), n = dims(1, 4);
    Tensor w = rand_tensor(r, groups * (k + 1), n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.interleave_rows(in[0], in[1], k), w);
    }, {rand_tensor(r, groups, n), rand_tensor(r, groups * k, n)});
  });

  run("gather_cols", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 5), n = dims(1, 5);
    std::vector<long> idx(static_cast<std::size_t>(m));
    for (long& j : idx) j = static_cast<long>(r.uniform_int(n));
    Tensor w = rand_tensor(r, m, 1);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.gather_cols(in[0], idx), w);
    }, {rand_tensor(r, m, n)});
  });

  run("reshape", 1e-6, [&](RngStream& r) {
    const long m = dims(1, 4), n = dims(1, 4);
    Tensor w = rand_tensor(r, 1, m * n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, tp.reshape(in[0], 1, m * n), w);
    }, {rand_tensor(r, m, n)});
  });

  run("attention", 1e-6, [&](RngStream& r) {
    const long n = dims(1, 5), dk = dims(1, 4), dv = dims(1, 4);
    Tensor w = rand_tensor(r, n, dv);
    const bool masked = r.uniform() < 0.5;
    Tensor km = rand_mask(r, 1, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      return weigh(tp, attention(tp, in[0], in[1], in[2], masked ? &km : nullptr).out, w);
    }, {rand_tensor(r, n, dk), rand_tensor(r, n, dk), rand_tensor(r, n, dv)});
  });

  run("multi_head", 1e-5, [&](RngStream& r) {
    const long n = 5, d = 8, dh = 3, m = 2;
    Tensor w = rand_tensor(r, n, d);
    const bool masked = r.uniform() < 0.5;
    Tensor km = rand_mask(r, 1, n);
    return check_gradients([&](Tape& tp, const std::vector<Ref>& in) {
      std::vector<HeadRefs> heads = {{in[1], in[2], in[3]}, {in[4], in[5], in[6]}};
      return weigh(tp, multi_head(tp, in[0], heads, in[7], masked ? &km : nullptr).out, w);
    }, {rand_tensor(r, n, d), rand_tensor(r, d, dh), rand_tensor(r, d, dh), rand_tensor(r, d, dh),
        rand_tensor(r, d, dh), rand_tensor(r, d, dh), rand_tensor(r, d, dh),
        rand_tensor(r, m * dh, d)});
  });

  return checks;
}

}  // namespace unsr
