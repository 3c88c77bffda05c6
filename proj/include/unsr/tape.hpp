#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unsr/common.hpp"
#include "unsr/param.hpp"
#include "unsr/tensor.hpp"

namespace unsr {

// Reverse-mode autodiff tape.
//
// Values live in one flat arena; each node records an opcode, its input node
// indices and an offset into the arena. Forward evaluation is eager and every
// op validates shapes and checks the result for non-finite values. backward()
// replays the tape in reverse and accumulates parameter gradients into the
// owning Parameter objects.
//
// Grouped ops (group_matmul*, group_mean_rows, interleave_rows, rows_every)
// operate on stacked matrices whose rows are G consecutive blocks of uniform
// size. They exist so a whole batch of per-agent computations runs as a few
// dense kernels instead of thousands of tiny ones.

enum class Op : std::uint8_t {
  kLeaf,
  kParam,
  kMatMul,
  kMatMulNT,
  kGroupMatMulNT,
  kGroupMatMul,
  kRowBmm,
  kAdd,
  kAddRowBcast,
  kSub,
  kHadamard,
  kMulRowBcast,
  kScale,
  kRelu,
  kAbs,
  kElu,
  kSoftmaxRows,
  kLayerNorm,
  kGroupMeanRows,
  kRowSum,
  kSumAll,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kRowsEvery,
  kInterleaveRows,
  kGatherCols,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kParam: return "param";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulNT: return "matmul_nt";
    case Op::kGroupMatMulNT: return "group_matmul_nt";
    case Op::kGroupMatMul: return "group_matmul";
    case Op::kRowBmm: return "row_bmm";
    case Op::kAdd: return "add";
    case Op::kAddRowBcast: return "add_row";
    case Op::kSub: return "sub";
    case Op::kHadamard: return "hadamard";
    case Op::kMulRowBcast: return "mul_row";
    case Op::kScale: return "scale";
    case Op::kRelu: return "relu";
    case Op::kAbs: return "abs";
    case Op::kElu: return "elu";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kGroupMeanRows: return "group_mean_rows";
    case Op::kRowSum: return "row_sum";
    case Op::kSumAll: return "sum_all";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kRowsEvery: return "rows_every";
    case Op::kInterleaveRows: return "interleave_rows";
    case Op::kGatherCols: return "gather_cols";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

class Tape;

// Handle to a tape node. Carries the shape so composite builders can reason
// about dimensions without round-tripping through the tape.
struct Ref {
  const Tape* owner = nullptr;
  int idx = -1;
  long rows = 0;
  long cols = 0;

  long numel() const { return rows * cols; }
  bool valid() const { return owner != nullptr && idx >= 0; }
};

class Tape {
  using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<EMat>;
  using CMap = Eigen::Map<const EMat>;

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    long rows = 0;
    long cols = 0;
    std::size_t off = 0;
    long i0 = 0;
    long i1 = 0;
    double x0 = 0.0;
    std::vector<double> ax;  // per-op payload: softmax mask, layer_norm inv-std
    std::vector<long> ai;    // per-op payload: gather indices
    Parameter* param = nullptr;
  };

 public:
  std::size_t size() const { return nodes_.size(); }
  std::size_t value_bytes() const { return vals_.capacity() * sizeof(double); }

  // Drops all nodes and values but keeps arena capacity for reuse.
  void clear() {
    nodes_.clear();
    vals_.clear();
    grads_.clear();
    has_grads_ = false;
  }

  // ---- inputs ----------------------------------------------------------

  Ref leaf(const Tensor& t) {
    Node n{Op::kLeaf};
    Ref r = push(n, t.rows(), t.cols());
    std::copy(t.data(), t.data() + t.numel(), val(r.idx));
    check_finite(r.idx);
    return r;
  }

  Ref param(Parameter& p) {
    Node n{Op::kParam};
    n.param = &p;
    Ref r = push(n, p.value.rows(), p.value.cols());
    std::copy(p.value.data(), p.value.data() + p.value.numel(), val(r.idx));
    check_finite(r.idx);
    return r;
  }

  // ---- dense products --------------------------------------------------

  Ref matmul(Ref a, Ref b) {
    own(a);
    own(b);
    if (a.cols != b.rows) throw DimError("matmul: inner dims " + dims(a) + " x " + dims(b));
    Node n{Op::kMatMul, a.idx, b.idx};
    Ref r = push(n, a.rows, b.cols);
    mat(r).noalias() = cmat(a) * cmat(b);
    check_finite(r.idx);
    return r;
  }

  // a * b^T
  Ref matmul_nt(Ref a, Ref b) {
    own(a);
    own(b);
    if (a.cols != b.cols) throw DimError("matmul_nt: inner dims " + dims(a) + " x " + dims(b));
    Node n{Op::kMatMulNT, a.idx, b.idx};
    Ref r = push(n, a.rows, b.rows);
    mat(r).noalias() = cmat(a) * cmat(b).transpose();
    check_finite(r.idx);
    return r;
  }

  // Block-diagonal a * b^T over G groups: a is (G*ga) x d, b is (G*gb) x d,
  // result is (G*ga) x gb where each ga-row block multiplies its own b block.
  Ref group_matmul_nt(Ref a, Ref b, long ga, long gb) {
    own(a);
    own(b);
    if (ga <= 0 || gb <= 0) throw DimError("group_matmul_nt: group sizes must be positive");
    if (a.rows % ga != 0 || b.rows % gb != 0 || a.rows / ga != b.rows / gb || a.cols != b.cols)
      throw DimError("group_matmul_nt: " + dims(a) + " x " + dims(b) + " with groups " +
                     std::to_string(ga) + "," + std::to_string(gb));
    Node n{Op::kGroupMatMulNT, a.idx, b.idx};
    n.i0 = ga;
    n.i1 = gb;
    Ref r = push(n, a.rows, gb);
    const long groups = a.rows / ga;
    const long d = a.cols;
    const double* ap = val(a.idx);
    const double* bp = val(b.idx);
    double* rp = val(r.idx);
    for (long g = 0; g < groups; ++g)
      for (long i = 0; i < ga; ++i) {
        const double* arow = ap + (g * ga + i) * d;
        for (long j = 0; j < gb; ++j) {
          const double* brow = bp + (g * gb + j) * d;
          double acc = 0.0;
          for (long t = 0; t < d; ++t) acc += arow[t] * brow[t];
          rp[(g * ga + i) * gb + j] = acc;
        }
      }
    check_finite(r.idx);
    return r;
  }

  // Block-diagonal s * v over G groups: s is (G*ga) x gb, v is (G*gb) x d.
  Ref group_matmul(Ref s, Ref v, long ga, long gb) {
    own(s);
    own(v);
    if (ga <= 0 || gb <= 0) throw DimError("group_matmul: group sizes must be positive");
    if (s.rows % ga != 0 || v.rows % gb != 0 || s.rows / ga != v.rows / gb || s.cols != gb)
      throw DimError("group_matmul: " + dims(s) + " x " + dims(v) + " with groups " +
                     std::to_string(ga) + "," + std::to_string(gb));
    Node n{Op::kGroupMatMul, s.idx, v.idx};
    n.i0 = ga;
    n.i1 = gb;
    Ref r = push(n, s.rows, v.cols);
    const long groups = s.rows / ga;
    const long d = v.cols;
    const double* sp = val(s.idx);
    const double* vp = val(v.idx);
    double* rp = val(r.idx);
    for (long g = 0; g < groups; ++g)
      for (long i = 0; i < ga; ++i) {
        double* orow = rp + (g * ga + i) * d;
        std::fill(orow, orow + d, 0.0);
        for (long j = 0; j < gb; ++j) {
          const double w = sp[(g * ga + i) * gb + j];
          const double* vrow = vp + (g * gb + j) * d;
          for (long t = 0; t < d; ++t) orow[t] += w * vrow[t];
        }
      }
    check_finite(r.idx);
    return r;
  }

  // Per-row vector-matrix product: a is B x m, w is B x (m*k); row b of the
  // result is a.row(b) times the m x k matrix stored row-major in w.row(b).
  Ref row_bmm(Ref a, Ref w, long k) {
    own(a);
    own(w);
    if (k <= 0 || a.rows != w.rows || w.cols != a.cols * k)
      throw DimError("row_bmm: " + dims(a) + " x " + dims(w) + " with k=" + std::to_string(k));
    Node n{Op::kRowBmm, a.idx, w.idx};
    n.i0 = k;
    Ref r = push(n, a.rows, k);
    const double* ap = val(a.idx);
    const double* wp = val(w.idx);
    double* rp = val(r.idx);
    for (long i = 0; i < a.rows; ++i) {
      Eigen::Map<const Eigen::RowVectorXd> arow(ap + i * a.cols, a.cols);
      CMap wm(wp + i * w.cols, a.cols, k);
      Eigen::Map<Eigen::RowVectorXd>(rp + i * k, k).noalias() = arow * wm;
    }
    check_finite(r.idx);
    return r;
  }

  // ---- elementwise -----------------------------------------------------

  Ref add(Ref a, Ref b) { return binary(Op::kAdd, a, b); }
  Ref sub(Ref a, Ref b) { return binary(Op::kSub, a, b); }
  Ref hadamard(Ref a, Ref b) { return binary(Op::kHadamard, a, b); }

  // a + row broadcast over every row of a; r must be 1 x a.cols.
  Ref add_row(Ref a, Ref r) { return row_bcast(Op::kAddRowBcast, a, r); }
  // a * row, elementwise with the row broadcast down the rows.
  Ref mul_row(Ref a, Ref r) { return row_bcast(Op::kMulRowBcast, a, r); }

  Ref scale(Ref a, double c) {
    own(a);
    Node n{Op::kScale, a.idx};
    n.x0 = c;
    Ref r = push(n, a.rows, a.cols);
    map_unary(a, r, [c](double x) { return c * x; });
    check_finite(r.idx);
    return r;
  }

  Ref relu(Ref a) {
    own(a);
    Node n{Op::kRelu, a.idx};
    Ref r = push(n, a.rows, a.cols);
    map_unary(a, r, [](double x) { return x > 0.0 ? x : 0.0; });
    check_finite(r.idx);
    return r;
  }

  Ref abs_val(Ref a) {
    own(a);
    Node n{Op::kAbs, a.idx};
    Ref r = push(n, a.rows, a.cols);
    map_unary(a, r, [](double x) { return std::abs(x); });
    check_finite(r.idx);
    return r;
  }

  Ref elu(Ref a) {
    own(a);
    Node n{Op::kElu, a.idx};
    Ref r = push(n, a.rows, a.cols);
    map_unary(a, r, [](double x) { return x > 0.0 ? x : std::expm1(x); });
    check_finite(r.idx);
    return r;
  }

  // ---- row-structured ops ----------------------------------------------

  Ref softmax_rows(Ref a) { return softmax_impl(a, nullptr); }

  // mask entries must be 0 or 1; masked-out entries get probability exactly 0.
  Ref softmax_rows_masked(Ref a, const Tensor& mask) {
    own(a);
    if (mask.rows() != a.rows || mask.cols() != a.cols)
      throw DimError("softmax_rows_masked: mask shape " + mask.shape_str() + " vs " + dims(a));
    for (double m : mask.values())
      if (m != 0.0 && m != 1.0) throw UsageError("softmax_rows_masked: mask entries must be 0 or 1");
    return softmax_impl(a, &mask);
  }

  // Per-row normalization (x - mean) / sqrt(var + eps); affine terms are
  // applied by callers via mul_row/add_row.
  Ref layer_norm(Ref a, double eps = 1e-5) {
    own(a);
    Node n{Op::kLayerNorm, a.idx};
    n.x0 = eps;
    n.ax.resize(static_cast<std::size_t>(a.rows));
    Ref r = push(n, a.rows, a.cols);
    const double* ap = val(a.idx);
    double* rp = val(r.idx);
    for (long i = 0; i < a.rows; ++i) {
      const double* x = ap + i * a.cols;
      double mu = 0.0;
      for (long j = 0; j < a.cols; ++j) mu += x[j];
      mu /= static_cast<double>(a.cols);
      double var = 0.0;
      for (long j = 0; j < a.cols; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<double>(a.cols);
      double s = 1.0 / std::sqrt(var + eps);
      nodes_[r.idx].ax[static_cast<std::size_t>(i)] = s;
      for (long j = 0; j < a.cols; ++j) rp[i * a.cols + j] = (x[j] - mu) * s;
    }
    check_finite(r.idx);
    return r;
  }

  // Means over consecutive row blocks of size gsize: (G*gsize) x n -> G x n.
  Ref group_mean_rows(Ref a, long gsize) {
    own(a);
    if (gsize <= 0 || a.rows % gsize != 0)
      throw DimError("group_mean_rows: " + dims(a) + " with group " + std::to_string(gsize));
    Node n{Op::kGroupMeanRows, a.idx};
    n.i0 = gsize;
    Ref r = push(n, a.rows / gsize, a.cols);
    CMap am = cmat(a);
    Map rm = mat(r);
    for (long g = 0; g < r.rows; ++g)
      rm.row(g) = am.middleRows(g * gsize, gsize).colwise().mean();
    check_finite(r.idx);
    return r;
  }

  Ref row_sum(Ref a) {
    own(a);
    Node n{Op::kRowSum, a.idx};
    Ref r = push(n, a.rows, 1);
    CMap am = cmat(a);
    Map rm = mat(r);
    rm.col(0) = am.rowwise().sum();
    check_finite(r.idx);
    return r;
  }

  Ref sum_all(Ref a) {
    own(a);
    Node n{Op::kSumAll, a.idx};
    Ref r = push(n, 1, 1);
    *val(r.idx) = cmat(a).sum();
    check_finite(r.idx);
    return r;
  }

  // ---- layout ----------------------------------------------------------

  Ref concat_rows(Ref a, Ref b) {
    own(a);
    own(b);
    if (a.cols != b.cols) throw DimError("concat_rows: " + dims(a) + " vs " + dims(b));
    Node n{Op::kConcatRows, a.idx, b.idx};
    Ref r = push(n, a.rows + b.rows, a.cols);
    mat(r).topRows(a.rows) = cmat(a);
    mat(r).bottomRows(b.rows) = cmat(b);
    return r;
  }

  Ref concat_rows(const std::vector<Ref>& parts) {
    if (parts.empty()) throw UsageError("concat_rows: no parts");
    Ref r = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) r = concat_rows(r, parts[i]);
    return r;
  }

  Ref concat_cols(Ref a, Ref b) {
    own(a);
    own(b);
    if (a.rows != b.rows) throw DimError("concat_cols: " + dims(a) + " vs " + dims(b));
    Node n{Op::kConcatCols, a.idx, b.idx};
    Ref r = push(n, a.rows, a.cols + b.cols);
    mat(r).leftCols(a.cols) = cmat(a);
    mat(r).rightCols(b.cols) = cmat(b);
    return r;
  }

  Ref concat_cols(const std::vector<Ref>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: no parts");
    Ref r = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) r = concat_cols(r, parts[i]);
    return r;
  }

  Ref slice_rows(Ref a, long r0, long nr) {
    own(a);
    if (r0 < 0 || nr <= 0 || r0 + nr > a.rows)
      throw DimError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + nr) +
                     ") of " + dims(a));
    Node n{Op::kSliceRows, a.idx};
    n.i0 = r0;
    Ref r = push(n, nr, a.cols);
    mat(r) = cmat(a).middleRows(r0, nr);
    return r;
  }

  Ref slice_cols(Ref a, long c0, long nc) {
    own(a);
    if (c0 < 0 || nc <= 0 || c0 + nc > a.cols)
      throw DimError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + nc) +
                     ") of " + dims(a));
    Node n{Op::kSliceCols, a.idx};
    n.i0 = c0;
    Ref r = push(n, a.rows, nc);
    mat(r) = cmat(a).middleCols(c0, nc);
    return r;
  }

  // Every stride-th row starting at offset: row p of the result is row
  // p*stride+offset of a. Extracts one row per block from stacked groups.
  Ref rows_every(Ref a, long stride, long offset) {
    own(a);
    if (stride <= 0 || offset < 0 || offset >= stride || a.rows % stride != 0)
      throw DimError("rows_every: stride " + std::to_string(stride) + " offset " +
                     std::to_string(offset) + " of " + dims(a));
    Node n{Op::kRowsEvery, a.idx};
    n.i0 = stride;
    n.i1 = offset;
    Ref r = push(n, a.rows / stride, a.cols);
    const double* ap = val(a.idx);
    double* rp = val(r.idx);
    for (long p = 0; p < r.rows; ++p)
      std::copy(ap + (p * stride + offset) * a.cols, ap + (p * stride + offset + 1) * a.cols,
                rp + p * a.cols);
    return r;
  }

  // Prefix each k-row block of b with the matching row of a:
  // a is G x n, b is (G*k) x n, result is (G*(k+1)) x n.
  Ref interleave_rows(Ref a, Ref b, long k) {
    own(a);
    own(b);
    if (k <= 0 || a.cols != b.cols || b.rows != a.rows * k)
      throw DimError("interleave_rows: " + dims(a) + " with " + dims(b) + " k=" +
                     std::to_string(k));
    Node n{Op::kInterleaveRows, a.idx, b.idx};
    n.i0 = k;
    Ref r = push(n, a.rows * (k + 1), a.cols);
    const double* ap = val(a.idx);
    const double* bp = val(b.idx);
    double* rp = val(r.idx);
    for (long g = 0; g < a.rows; ++g) {
      std::copy(ap + g * a.cols, ap + (g + 1) * a.cols, rp + g * (k + 1) * a.cols);
      std::copy(bp + g * k * b.cols, bp + (g + 1) * k * b.cols,
                rp + (g * (k + 1) + 1) * a.cols);
    }
    return r;
  }

  // Picks one entry per row: result is m x 1 with row i equal to a(i, idx[i]).
  Ref gather_cols(Ref a, const std::vector<long>& idx) {
    own(a);
    if (static_cast<long>(idx.size()) != a.rows)
      throw DimError("gather_cols: " + std::to_string(idx.size()) + " indices for " + dims(a));
    for (long j : idx)
      if (j < 0 || j >= a.cols) throw UsageError("gather_cols: index out of range");
    Node n{Op::kGatherCols, a.idx};
    n.ai = idx;
    Ref r = push(n, a.rows, 1);
    const double* ap = val(a.idx);
    double* rp = val(r.idx);
    for (long i = 0; i < a.rows; ++i) rp[i] = ap[i * a.cols + idx[static_cast<std::size_t>(i)]];
    return r;
  }

  // Row-major reinterpretation with the same element count.
  Ref reshape(Ref a, long r, long c) {
    own(a);
    if (r <= 0 || c <= 0 || r * c != a.numel())
      throw DimError("reshape: " + dims(a) + " to " + std::to_string(r) + "x" + std::to_string(c));
    Node n{Op::kReshape, a.idx};
    Ref out = push(n, r, c);
    std::copy(val(a.idx), val(a.idx) + a.numel(), val(out.idx));
    return out;
  }

  // ---- composites -------------------------------------------------------

  // x * W + b with W d_in x d_out and b 1 x d_out.
  Ref linear(Ref x, Ref W, Ref b) { return add_row(matmul(x, W), b); }

  // Per-row standardization followed by the learned affine map.
  Ref layer_norm_affine(Ref x, Ref gain, Ref bias, double eps = 1e-5) {
    return add_row(mul_row(layer_norm(x, eps), gain), bias);
  }

  // ---- reading values and grads ------------------------------------------

  const double* data(Ref r) const {
    own(r);
    return vals_.data() + nodes_[r.idx].off;
  }

  double scalar(Ref r) const {
    own(r);
    if (r.numel() != 1) throw UsageError("scalar: node is " + dims(r));
    return vals_[nodes_[r.idx].off];
  }

  Tensor value_tensor(Ref r) const {
    own(r);
    Tensor t(r.rows, r.cols);
    std::copy(data(r), data(r) + r.numel(), t.data());
    return t;
  }

  Tensor grad_tensor(Ref r) const {
    own(r);
    if (!has_grads_) throw UsageError("grad_tensor: backward has not run");
    Tensor t(r.rows, r.cols);
    const double* g = grads_.data() + nodes_[r.idx].off;
    std::copy(g, g + r.numel(), t.data());
    return t;
  }

  // ---- backward ----------------------------------------------------------

  // Seeds d(root)/d(root) = 1 and accumulates gradients for every node that
  // feeds the root. Parameter gradients are added into Parameter::grad.
  void backward(Ref root) {
    own(root);
    if (nodes_.empty()) throw UsageError("backward: empty tape");
    if (root.rows != 1 || root.cols != 1)
      throw UsageError("backward: root must be scalar, got " + dims(root));
    grads_.assign(vals_.size(), 0.0);
    has_grads_ = true;
    grads_[nodes_[root.idx].off] = 1.0;

    for (int i = root.idx; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      const double* g = grads_.data() + n.off;
      switch (n.op) {
        case Op::kLeaf:
          break;
        case Op::kParam: {
          double* pg = n.param->grad.data();
          for (long j = 0; j < n.rows * n.cols; ++j) pg[j] += g[j];
          break;
        }
        case Op::kMatMul: {
          gmat(n.a).noalias() += gcmat(i) * cmat(n.b).transpose();
          gmat(n.b).noalias() += cmat(n.a).transpose() * gcmat(i);
          break;
        }
        case Op::kMatMulNT: {
          gmat(n.a).noalias() += gcmat(i) * cmat(n.b);
          gmat(n.b).noalias() += gcmat(i).transpose() * cmat(n.a);
          break;
        }
        case Op::kGroupMatMulNT: {
          const long ga = n.i0, gb = n.i1;
          const long groups = n.rows / ga;
          const long d = nodes_[n.a].cols;
          const double* ap = val(n.a);
          const double* bp = val(n.b);
          double* gap = grads_.data() + nodes_[n.a].off;
          double* gbp = grads_.data() + nodes_[n.b].off;
          for (long grp = 0; grp < groups; ++grp)
            for (long r = 0; r < ga; ++r) {
              const double* grow = g + (grp * ga + r) * gb;
              const double* arow = ap + (grp * ga + r) * d;
              double* garow = gap + (grp * ga + r) * d;
              for (long j = 0; j < gb; ++j) {
                const double w = grow[j];
                const double* brow = bp + (grp * gb + j) * d;
                double* gbrow = gbp + (grp * gb + j) * d;
                for (long t = 0; t < d; ++t) {
                  garow[t] += w * brow[t];
                  gbrow[t] += w * arow[t];
                }
              }
            }
          break;
        }
        case Op::kGroupMatMul: {
          const long ga = n.i0, gb = n.i1;
          const long groups = n.rows / ga;
          const long d = n.cols;
          const double* sp = val(n.a);
          const double* vp = val(n.b);
          double* gsp = grads_.data() + nodes_[n.a].off;
          double* gvp = grads_.data() + nodes_[n.b].off;
          for (long grp = 0; grp < groups; ++grp)
            for (long r = 0; r < ga; ++r) {
              const double* grow = g + (grp * ga + r) * d;
              for (long j = 0; j < gb; ++j) {
                const double* vrow = vp + (grp * gb + j) * d;
                double* gvrow = gvp + (grp * gb + j) * d;
                const double w = sp[(grp * ga + r) * gb + j];
                double dot = 0.0;
                for (long t = 0; t < d; ++t) {
                  dot += grow[t] * vrow[t];
                  gvrow[t] += w * grow[t];
                }
                gsp[(grp * ga + r) * gb + j] += dot;
              }
            }
          break;
        }
        case Op::kRowBmm: {
          const long k = n.i0;
          const long m = nodes_[n.a].cols;
          const double* ap = val(n.a);
          const double* wp = val(n.b);
          double* gap = grads_.data() + nodes_[n.a].off;
          double* gwp = grads_.data() + nodes_[n.b].off;
          for (long r = 0; r < n.rows; ++r) {
            CMap wm(wp + r * m * k, m, k);
            Map gwm(gwp + r * m * k, m, k);
            Eigen::Map<const Eigen::RowVectorXd> grow(g + r * k, k);
            Eigen::Map<const Eigen::RowVectorXd> arow(ap + r * m, m);
            Eigen::Map<Eigen::RowVectorXd> garow(gap + r * m, m);
            garow.noalias() += grow * wm.transpose();
            gwm.noalias() += arow.transpose() * grow;
          }
          break;
        }
        case Op::kAdd: {
          gmat(n.a) += gcmat(i);
          gmat(n.b) += gcmat(i);
          break;
        }
        case Op::kSub: {
          gmat(n.a) += gcmat(i);
          gmat(n.b) -= gcmat(i);
          break;
        }
        case Op::kHadamard: {
          gmat(n.a).array() += gcmat(i).array() * cmat(n.b).array();
          gmat(n.b).array() += gcmat(i).array() * cmat(n.a).array();
          break;
        }
        case Op::kAddRowBcast: {
          gmat(n.a) += gcmat(i);
          gmat(n.b) += gcmat(i).colwise().sum();
          break;
        }
        case Op::kMulRowBcast: {
          gmat(n.a).array() += gcmat(i).array().rowwise() * cmat(n.b).row(0).array();
          gmat(n.b) += (gcmat(i).array() * cmat(n.a).array()).colwise().sum().matrix();
          break;
        }
        case Op::kScale: {
          gmat(n.a) += n.x0 * gcmat(i);
          break;
        }
        case Op::kRelu: {
          const double* x = val(n.a);
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long j = 0; j < n.rows * n.cols; ++j)
            if (x[j] > 0.0) ga[j] += g[j];
          break;
        }
        case Op::kAbs: {
          const double* x = val(n.a);
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long j = 0; j < n.rows * n.cols; ++j)
            if (x[j] > 0.0)
              ga[j] += g[j];
            else if (x[j] < 0.0)
              ga[j] -= g[j];
          break;
        }
        case Op::kElu: {
          const double* x = val(n.a);
          const double* y = val(i);
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long j = 0; j < n.rows * n.cols; ++j)
            ga[j] += g[j] * (x[j] > 0.0 ? 1.0 : y[j] + 1.0);
          break;
        }
        case Op::kSoftmaxRows: {
          const double* y = val(i);
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long r = 0; r < n.rows; ++r) {
            double dot = 0.0;
            for (long j = 0; j < n.cols; ++j) dot += g[r * n.cols + j] * y[r * n.cols + j];
            for (long j = 0; j < n.cols; ++j)
              ga[r * n.cols + j] += y[r * n.cols + j] * (g[r * n.cols + j] - dot);
          }
          break;
        }
        case Op::kLayerNorm: {
          const double* y = val(i);
          double* ga = grads_.data() + nodes_[n.a].off;
          const double inv_n = 1.0 / static_cast<double>(n.cols);
          for (long r = 0; r < n.rows; ++r) {
            const double s = n.ax[static_cast<std::size_t>(r)];
            double gm = 0.0, gy = 0.0;
            for (long j = 0; j < n.cols; ++j) {
              gm += g[r * n.cols + j];
              gy += g[r * n.cols + j] * y[r * n.cols + j];
            }
            gm *= inv_n;
            gy *= inv_n;
            for (long j = 0; j < n.cols; ++j)
              ga[r * n.cols + j] += s * (g[r * n.cols + j] - gm - y[r * n.cols + j] * gy);
          }
          break;
        }
        case Op::kGroupMeanRows: {
          const long gsize = n.i0;
          const double w = 1.0 / static_cast<double>(gsize);
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long r = 0; r < nodes_[n.a].rows; ++r)
            for (long j = 0; j < n.cols; ++j) ga[r * n.cols + j] += w * g[(r / gsize) * n.cols + j];
          break;
        }
        case Op::kRowSum: {
          gmat(n.a).array().colwise() += gcmat(i).col(0).array();
          break;
        }
        case Op::kSumAll: {
          gmat(n.a).array() += g[0];
          break;
        }
        case Op::kConcatRows: {
          gmat(n.a) += gcmat(i).topRows(nodes_[n.a].rows);
          gmat(n.b) += gcmat(i).bottomRows(nodes_[n.b].rows);
          break;
        }
        case Op::kConcatCols: {
          gmat(n.a) += gcmat(i).leftCols(nodes_[n.a].cols);
          gmat(n.b) += gcmat(i).rightCols(nodes_[n.b].cols);
          break;
        }
        case Op::kSliceRows: {
          gmat(n.a).middleRows(n.i0, n.rows) += gcmat(i);
          break;
        }
        case Op::kSliceCols: {
          gmat(n.a).middleCols(n.i0, n.cols) += gcmat(i);
          break;
        }
        case Op::kRowsEvery: {
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long p = 0; p < n.rows; ++p)
            for (long j = 0; j < n.cols; ++j)
              ga[(p * n.i0 + n.i1) * n.cols + j] += g[p * n.cols + j];
          break;
        }
        case Op::kInterleaveRows: {
          const long k = n.i0;
          double* ga = grads_.data() + nodes_[n.a].off;
          double* gb = grads_.data() + nodes_[n.b].off;
          for (long grp = 0; grp < nodes_[n.a].rows; ++grp) {
            for (long j = 0; j < n.cols; ++j) ga[grp * n.cols + j] += g[grp * (k + 1) * n.cols + j];
            for (long q = 0; q < k; ++q)
              for (long j = 0; j < n.cols; ++j)
                gb[(grp * k + q) * n.cols + j] += g[(grp * (k + 1) + 1 + q) * n.cols + j];
          }
          break;
        }
        case Op::kGatherCols: {
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long r = 0; r < n.rows; ++r)
            ga[r * nodes_[n.a].cols + n.ai[static_cast<std::size_t>(r)]] += g[r];
          break;
        }
        case Op::kReshape: {
          double* ga = grads_.data() + nodes_[n.a].off;
          for (long j = 0; j < n.rows * n.cols; ++j) ga[j] += g[j];
          break;
        }
      }
    }
  }

 private:
  friend struct Ref;

  Ref push(Node n, long rows, long cols) {
    n.rows = rows;
    n.cols = cols;
    n.off = vals_.size();
    vals_.resize(vals_.size() + static_cast<std::size_t>(rows * cols), 0.0);
    nodes_.push_back(std::move(n));
    has_grads_ = false;
    return Ref{this, static_cast<int>(nodes_.size() - 1), rows, cols};
  }

  void own(Ref r) const {
    if (r.owner != this) throw UsageError("tape: ref belongs to a different tape");
    if (r.idx < 0 || r.idx >= static_cast<int>(nodes_.size()))
      throw UsageError("tape: stale ref");
  }

  static std::string dims(Ref r) {
    return std::to_string(r.rows) + "x" + std::to_string(r.cols);
  }

  double* val(int i) { return vals_.data() + nodes_[static_cast<std::size_t>(i)].off; }
  const double* val(int i) const { return vals_.data() + nodes_[static_cast<std::size_t>(i)].off; }

  Map mat(Ref r) { return Map(val(r.idx), r.rows, r.cols); }
  CMap cmat(Ref r) const { return CMap(val(r.idx), r.rows, r.cols); }
  CMap cmat(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    return CMap(val(i), n.rows, n.cols);
  }
  Map gmat(int i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    return Map(grads_.data() + n.off, n.rows, n.cols);
  }
  CMap gcmat(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    return CMap(grads_.data() + n.off, n.rows, n.cols);
  }

  template <class F>
  void map_unary(Ref a, Ref r, F f) {
    const double* ap = val(a.idx);
    double* rp = val(r.idx);
    for (long j = 0; j < a.numel(); ++j) rp[j] = f(ap[j]);
  }

  Ref binary(Op op, Ref a, Ref b) {
    own(a);
    own(b);
    if (a.rows != b.rows || a.cols != b.cols)
      throw DimError(std::string(op_name(op)) + ": " + dims(a) + " vs " + dims(b));
    Node n{op, a.idx, b.idx};
    Ref r = push(n, a.rows, a.cols);
    CMap am = cmat(a), bm = cmat(b);
    Map rm = mat(r);
    if (op == Op::kAdd)
      rm = am + bm;
    else if (op == Op::kSub)
      rm = am - bm;
    else
      rm.array() = am.array() * bm.array();
    check_finite(r.idx);
    return r;
  }

  Ref row_bcast(Op op, Ref a, Ref r) {
    own(a);
    own(r);
    if (r.rows != 1 || r.cols != a.cols)
      throw DimError(std::string(op_name(op)) + ": " + dims(a) + " with row " + dims(r));
    Node n{op, a.idx, r.idx};
    Ref out = push(n, a.rows, a.cols);
    if (op == Op::kAddRowBcast)
      mat(out) = cmat(a).rowwise() + cmat(r).row(0);
    else
      mat(out).array() = cmat(a).array().rowwise() * cmat(r).row(0).array();
    check_finite(out.idx);
    return out;
  }

  Ref softmax_impl(Ref a, const Tensor* mask) {
    own(a);
    Node n{Op::kSoftmaxRows, a.idx};
    if (mask != nullptr) n.ax = mask->values();
    Ref r = push(n, a.rows, a.cols);
    const double* ap = val(a.idx);
    const double* mp = mask != nullptr ? nodes_[r.idx].ax.data() : nullptr;
    double* rp = val(r.idx);
    for (long i = 0; i < a.rows; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < a.cols; ++j)
        if (mp == nullptr || mp[i * a.cols + j] == 1.0) mx = std::max(mx, ap[i * a.cols + j]);
      if (!std::isfinite(mx)) throw RuntimeError("softmax_rows: fully masked row");
      double z = 0.0;
      for (long j = 0; j < a.cols; ++j) {
        double e = (mp == nullptr || mp[i * a.cols + j] == 1.0)
                       ? std::exp(ap[i * a.cols + j] - mx)
                       : 0.0;
        rp[i * a.cols + j] = e;
        z += e;
      }
      for (long j = 0; j < a.cols; ++j) rp[i * a.cols + j] /= z;
    }
    check_finite(r.idx);
    return r;
  }

  void check_finite(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    const double* p = val(i);
    for (long j = 0; j < n.rows * n.cols; ++j)
      if (!std::isfinite(p[j]))
        throw RuntimeError(std::string("tape: non-finite value out of ") + op_name(n.op));
    (void)p;
  }

  std::vector<Node> nodes_;
  AlignedVec vals_;
  AlignedVec grads_;
  bool has_grads_ = false;
};

struct AttentionResult {
  Ref out;
  Ref probs;  // one row per query, sums to 1
};

// Scaled dot-product attention softmax(q k^T / sqrt(d_k)) v. When key_mask is
// given (1 x n of 0/1 flags) masked rows never contribute as keys or values.
inline AttentionResult attention(Tape& tp, Ref q, Ref k, Ref v,
                                 const Tensor* key_mask = nullptr) {
  if (q.rows != k.rows || k.rows != v.rows)
    throw DimError("attention: query/key/value row counts differ");
  Ref scores = tp.scale(tp.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols)));
  Ref probs;
  if (key_mask == nullptr) {
    probs = tp.softmax_rows(scores);
  } else {
    if (key_mask->rows() != 1 || key_mask->cols() != k.rows)
      throw DimError("attention: key mask must be 1x" + std::to_string(k.rows));
    Tensor full(scores.rows, scores.cols);
    for (long i = 0; i < scores.rows; ++i)
      for (long j = 0; j < scores.cols; ++j) full(i, j) = (*key_mask)[j];
    probs = tp.softmax_rows_masked(scores, full);
  }
  return {tp.matmul(probs, v), probs};
}

struct MultiHeadResult {
  Ref out;
  std::vector<Ref> probs;  // per head
};

struct HeadRefs {
  Ref wq, wk, wv;  // each d x d_h
};

// Multi-head self-attention over the rows of x: per-head projections, scaled
// dot-product attention, concatenation, then pooling by w_mha ((m*d_h) x d).
inline MultiHeadResult multi_head(Tape& tp, Ref x, const std::vector<HeadRefs>& heads,
                                  Ref w_mha, const Tensor* key_mask = nullptr) {
  if (heads.empty()) throw UsageError("multi_head: needs at least one head");
  std::vector<Ref> ctx;
  MultiHeadResult res;
  for (const HeadRefs& h : heads) {
    AttentionResult a =
        attention(tp, tp.matmul(x, h.wq), tp.matmul(x, h.wk), tp.matmul(x, h.wv), key_mask);
    ctx.push_back(a.out);
    res.probs.push_back(a.probs);
  }
  res.out = tp.matmul(tp.concat_cols(ctx), w_mha);
  return res;
}

}  // namespace unsr
