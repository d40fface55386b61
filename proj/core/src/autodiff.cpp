#include "hessdiag/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hessdiag/error.hpp"

namespace hessdiag::ad {

std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddBias: return "add_bias";
    case Op::kMulRows: return "mul_rows";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kRecip: return "recip";
    case Op::kSumAll: return "sum_all";
    case Op::kFill: return "fill";
    case Op::kSumCols: return "sum_cols";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kSegmentSum: return "segment_sum";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kPadCols: return "pad_cols";
    case Op::kReshape: return "reshape";
    case Op::kBlockScores: return "block_scores";
    case Op::kBlockApply: return "block_apply";
    case Op::kBlockApplyT: return "block_apply_t";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  const auto id = static_cast<NodeId>(nodes_.size());
  if (check_finite_ && !node.value.all_finite()) throw NonFiniteError(id, std::string(op_name(node.op)));
  nodes_.push_back(std::move(node));
  return Var{this, id};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

void Tape::truncate(std::size_t n) {
  if (n < nodes_.size()) nodes_.erase(nodes_.begin() + static_cast<std::ptrdiff_t>(n), nodes_.end());
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands live on different tapes");
}

void require_rank(Op op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

struct Args {
  double scalar = 0.0;
  std::size_t arg0 = 0;
  std::size_t arg1 = 0;
  std::shared_ptr<const std::vector<std::size_t>> indices;
};

Var emit(Op op, Tensor value, Var a, Args args = {}) {
  Node n;
  n.op = op;
  n.scalar = args.scalar;
  n.arg0 = args.arg0;
  n.arg1 = args.arg1;
  n.indices = std::move(args.indices);
  n.in0 = a.id;
  n.requires_grad = a.tape->node(a.id).requires_grad;
  n.value = std::move(value);
  return a.tape->push(std::move(n));
}

Var emit(Op op, Tensor value, Var a, Var b, Args args = {}) {
  require_same_tape(a, b);
  Node n;
  n.op = op;
  n.arg0 = args.arg0;
  n.arg1 = args.arg1;
  n.in0 = a.id;
  n.in1 = b.id;
  n.requires_grad = a.tape->node(a.id).requires_grad || b.tape->node(b.id).requires_grad;
  n.value = std::move(value);
  return a.tape->push(std::move(n));
}

template <typename F>
Var elementwise(Op op, Var a, F f, Args args = {}) {
  const Tensor& x = a.value();
  Tensor out(x.shape(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return emit(op, std::move(out), a, std::move(args));
}

template <typename F>
Var binary(Op op, Var a, Var b, F f) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) {
    shape_fail(op, shape_to_string(x.shape()) + " vs " + shape_to_string(y.shape()));
  }
  Tensor out(x.shape(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return emit(op, std::move(out), a, b);
}

}  // namespace

Var add(Var a, Var b) { return binary(Op::kAdd, a, b, [](double x, double y) { return x + y; }); }
Var sub(Var a, Var b) { return binary(Op::kSub, a, b, [](double x, double y) { return x - y; }); }
Var mul(Var a, Var b) { return binary(Op::kMul, a, b, [](double x, double y) { return x * y; }); }

Var scale(Var a, double factor) {
  return elementwise(Op::kScale, a, [factor](double x) { return factor * x; },
                     Args{.scalar = factor});
}

Var exp(Var a) { return elementwise(Op::kExp, a, [](double x) { return std::exp(x); }); }
Var log(Var a) { return elementwise(Op::kLog, a, [](double x) { return std::log(x); }); }
Var tanh(Var a) { return elementwise(Op::kTanh, a, [](double x) { return std::tanh(x); }); }
Var recip(Var a) { return elementwise(Op::kRecip, a, [](double x) { return 1.0 / x; }); }

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank(Op::kAddBias, xv, 2);
  require_rank(Op::kAddBias, bv, 1);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n) shape_fail(Op::kAddBias, "bias length " + std::to_string(bv.size()) + " vs cols " + std::to_string(n));
  Tensor out(xv.shape(), std::vector<double>(xv.size()));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) + bv[j];
  return emit(Op::kAddBias, std::move(out), x, bias);
}

Var mul_rows(Var x, Var c) {
  const Tensor& xv = x.value();
  const Tensor& cv = c.value();
  require_rank(Op::kMulRows, xv, 2);
  require_rank(Op::kMulRows, cv, 1);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (cv.size() != m) shape_fail(Op::kMulRows, "scale length " + std::to_string(cv.size()) + " vs rows " + std::to_string(m));
  Tensor out(xv.shape(), std::vector<double>(xv.size()));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) * cv[i];
  return emit(Op::kMulRows, std::move(out), x, c);
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(Op::kMatMul, av, 2);
  require_rank(Op::kMatMul, bv, 2);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    shape_fail(Op::kMatMul, shape_to_string(av.shape()) + " x " + shape_to_string(bv.shape()));
  }
  Tensor out({m, n});
  const double* A = av.values().data();
  const double* B = bv.values().data();
  double* C = out.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return emit(Op::kMatMul, std::move(out), a, b);
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank(Op::kTranspose, av, 2);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  return emit(Op::kTranspose, std::move(out), a);
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return emit(Op::kSumAll, Tensor::scalar(s), a);
}

Var fill(Var scalar, const Shape& shape) {
  const double v = scalar.value().item();
  return emit(Op::kFill, Tensor::filled(shape, v), scalar);
}

Var sum_cols(Var x) {
  const Tensor& xv = x.value();
  require_rank(Op::kSumCols, xv, 2);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv.at(i, j);
    out[i] = s;
  }
  return emit(Op::kSumCols, std::move(out), x);
}

Var broadcast_cols(Var c, std::size_t n) {
  const Tensor& cv = c.value();
  require_rank(Op::kBroadcastCols, cv, 1);
  const std::size_t m = cv.size();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = cv[i];
  return emit(Op::kBroadcastCols, std::move(out), c, Args{.arg0 = n});
}

Var segment_sum(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  require_rank(Op::kSegmentSum, xv, 2);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (k == 0 || m % k != 0) shape_fail(Op::kSegmentSum, "segment " + std::to_string(k) + " does not divide " + std::to_string(m));
  Tensor out({m / k, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i / k, j) += xv.at(i, j);
  return emit(Op::kSegmentSum, std::move(out), x, Args{.arg0 = k});
}

Var repeat_rows(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  require_rank(Op::kRepeatRows, xv, 2);
  if (k == 0) shape_fail(Op::kRepeatRows, "repeat count must be positive");
  const std::size_t r = xv.rows(), n = xv.cols();
  Tensor out({r * k, n});
  for (std::size_t i = 0; i < r * k; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i / k, j);
  return emit(Op::kRepeatRows, std::move(out), x, Args{.arg0 = k});
}

Var gather_rows(Var table, std::shared_ptr<const std::vector<std::size_t>> indices) {
  const Tensor& tv = table.value();
  require_rank(Op::kGatherRows, tv, 2);
  const std::size_t v = tv.rows(), n = tv.cols();
  if (!indices || indices->empty()) shape_fail(Op::kGatherRows, "empty index list");
  Tensor out({indices->size(), n});
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::size_t src = (*indices)[i];
    if (src >= v) shape_fail(Op::kGatherRows, "row " + std::to_string(src) + " out of range " + std::to_string(v));
    std::copy_n(tv.values().data() + src * n, n, out.values().data() + i * n);
  }
  return emit(Op::kGatherRows, std::move(out), table,
              Args{.arg0 = v, .indices = std::move(indices)});
}

Var scatter_rows(Var x, std::shared_ptr<const std::vector<std::size_t>> indices,
                 std::size_t total_rows) {
  const Tensor& xv = x.value();
  require_rank(Op::kScatterRows, xv, 2);
  const std::size_t n = xv.cols();
  if (!indices || indices->size() != xv.rows()) shape_fail(Op::kScatterRows, "index count does not match rows");
  Tensor out({total_rows, n});
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::size_t dst = (*indices)[i];
    if (dst >= total_rows) shape_fail(Op::kScatterRows, "row " + std::to_string(dst) + " out of range");
    for (std::size_t j = 0; j < n; ++j) out.at(dst, j) += xv.at(i, j);
  }
  return emit(Op::kScatterRows, std::move(out), x,
              Args{.arg0 = total_rows, .indices = std::move(indices)});
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank(Op::kSliceCols, xv, 2);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (count == 0 || start + count > n) shape_fail(Op::kSliceCols, "column range out of bounds");
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = xv.at(i, start + j);
  return emit(Op::kSliceCols, std::move(out), x, Args{.arg0 = start, .arg1 = n});
}

Var pad_cols(Var x, std::size_t start, std::size_t total_cols) {
  const Tensor& xv = x.value();
  require_rank(Op::kPadCols, xv, 2);
  const std::size_t m = xv.rows(), c = xv.cols();
  if (start + c > total_cols) shape_fail(Op::kPadCols, "column range out of bounds");
  Tensor out({m, total_cols});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, start + j) = xv.at(i, j);
  return emit(Op::kPadCols, std::move(out), x, Args{.arg0 = start, .arg1 = c});
}

namespace {

// Row counts of both sides, checked against one batch count.
std::size_t block_count(Op op, const Tensor& qside, const Tensor& kside, std::size_t lq, std::size_t lk) {
  require_rank(op, qside, 2);
  require_rank(op, kside, 2);
  if (lq == 0 || lk == 0 || qside.rows() % lq != 0 || kside.rows() % lk != 0 ||
      qside.rows() / lq != kside.rows() / lk) {
    shape_fail(op, shape_to_string(qside.shape()) + " vs " + shape_to_string(kside.shape()) + " with blocks " +
                       std::to_string(lq) + "/" + std::to_string(lk));
  }
  return qside.rows() / lq;
}

}  // namespace

Var block_scores(Var q, Var k, std::size_t lq, std::size_t lk) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const std::size_t nb = block_count(Op::kBlockScores, qv, kv, lq, lk);
  const std::size_t d = qv.cols();
  if (kv.cols() != d) shape_fail(Op::kBlockScores, "feature widths differ");
  std::vector<double> out(nb * lq * lk);
  const double* Q = qv.values().data();
  const double* K = kv.values().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < lq; ++i) {
      const double* qi = Q + (b * lq + i) * d;
      for (std::size_t j = 0; j < lk; ++j) {
        const double* kj = K + (b * lk + j) * d;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
        out[(b * lq + i) * lk + j] = s;
      }
    }
  return emit(Op::kBlockScores, Tensor({nb * lq, lk}, std::move(out)), q, k, Args{.arg0 = lq, .arg1 = lk});
}

Var block_apply(Var a, Var v, std::size_t lq, std::size_t lk) {
  const Tensor& av = a.value();
  const Tensor& vv = v.value();
  const std::size_t nb = block_count(Op::kBlockApply, av, vv, lq, lk);
  if (av.cols() != lk) shape_fail(Op::kBlockApply, "weight width must equal the key block length");
  const std::size_t d = vv.cols();
  std::vector<double> out(nb * lq * d, 0.0);
  const double* A = av.values().data();
  const double* V = vv.values().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < lq; ++i) {
      double* oi = out.data() + (b * lq + i) * d;
      for (std::size_t j = 0; j < lk; ++j) {
        const double w = A[(b * lq + i) * lk + j];
        const double* vj = V + (b * lk + j) * d;
        for (std::size_t c = 0; c < d; ++c) oi[c] += w * vj[c];
      }
    }
  return emit(Op::kBlockApply, Tensor({nb * lq, d}, std::move(out)), a, v, Args{.arg0 = lq, .arg1 = lk});
}

Var block_apply_t(Var a, Var x, std::size_t lq, std::size_t lk) {
  const Tensor& av = a.value();
  const Tensor& xv = x.value();
  require_rank(Op::kBlockApplyT, av, 2);
  if (av.cols() != lk || av.rows() != xv.rows() || lq == 0 || av.rows() % lq != 0) {
    shape_fail(Op::kBlockApplyT, shape_to_string(av.shape()) + " vs " + shape_to_string(xv.shape()));
  }
  const std::size_t nb = av.rows() / lq;
  const std::size_t d = xv.cols();
  std::vector<double> out(nb * lk * d, 0.0);
  const double* A = av.values().data();
  const double* X = xv.values().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < lq; ++i) {
      const double* xi = X + (b * lq + i) * d;
      for (std::size_t j = 0; j < lk; ++j) {
        const double w = A[(b * lq + i) * lk + j];
        double* oj = out.data() + (b * lk + j) * d;
        for (std::size_t c = 0; c < d; ++c) oj[c] += w * xi[c];
      }
    }
  return emit(Op::kBlockApplyT, Tensor({nb * lk, d}, std::move(out)), a, x, Args{.arg0 = lq, .arg1 = lk});
}

Var reshape(Var x, const Shape& shape) {
  const Tensor& xv = x.value();
  if (shape_size(shape) != xv.size()) {
    shape_fail(Op::kReshape, shape_to_string(xv.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> values(xv.values().begin(), xv.values().end());
  return emit(Op::kReshape, Tensor(shape, std::move(values)), x);
}

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  require_rank(Op::kSumCols, xv, 2);
  const std::size_t m = xv.rows(), n = xv.cols();
  // The row max is a constant shift: softmax is invariant to it.
  Tensor shift({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    for (std::size_t j = 0; j < n; ++j) shift.at(i, j) = mx;
  }
  Var e = exp(sub(x, x.tape->constant(std::move(shift))));
  return mul_rows(e, recip(sum_cols(e)));
}

Var cross_entropy_with_logits(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  require_rank(Op::kSumCols, lv, 2);
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  Tensor shift({b, c});
  Tensor row_max({b});
  Tensor onehot({b, c});
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, lv.at(i, j));
    row_max[i] = mx;
    for (std::size_t j = 0; j < c; ++j) shift.at(i, j) = mx;
    onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  Tape& t = *logits.tape;
  Var shifted = sub(logits, t.constant(std::move(shift)));
  Var log_sum = log(sum_cols(exp(shifted)));
  Var picked = sum_cols(mul(shifted, t.constant(std::move(onehot))));
  return scale(sum_all(sub(log_sum, picked)), 1.0 / static_cast<double>(b));
}

Var mean_all(Var a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var dot(Var a, Var b) { return sum_all(mul(a, b)); }

std::vector<Var> grad(Var out, std::span<const Var> wrt) {
  Tape& t = *out.tape;
  if (out.value().size() != 1) {
    throw ShapeError("grad: output must be scalar, got " + shape_to_string(out.shape()));
  }
  constexpr NodeId kNone = std::numeric_limits<NodeId>::max();
  const NodeId root = out.id;
  std::vector<NodeId> adj(static_cast<std::size_t>(root) + 1, kNone);
  adj[root] = t.constant(Tensor::filled(out.shape(), 1.0)).id;

  auto needs = [&](NodeId id) { return t.node(id).requires_grad; };
  auto accumulate = [&](NodeId target, Var g) {
    if (adj[target] == kNone) {
      adj[target] = g.id;
    } else {
      adj[target] = add(Var{&t, adj[target]}, g).id;
    }
  };

  for (NodeId id = root + 1; id-- > 0;) {
    if (adj[id] == kNone) continue;
    const Node& ref = t.node(id);
    if (!ref.requires_grad || ref.op == Op::kLeaf) continue;
    // copy what backward needs; pushing nodes may reallocate the tape
    const Op op = ref.op;
    const NodeId i0 = ref.in0, i1 = ref.in1;
    const double factor = ref.scalar;
    const std::size_t arg0 = ref.arg0, arg1 = ref.arg1;
    const auto indices = ref.indices;
    const Var g{&t, adj[id]};
    const Var a{&t, i0}, b{&t, i1}, self{&t, id};

    switch (op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        if (needs(i0)) accumulate(i0, g);
        if (needs(i1)) accumulate(i1, g);
        break;
      case Op::kSub:
        if (needs(i0)) accumulate(i0, g);
        if (needs(i1)) accumulate(i1, scale(g, -1.0));
        break;
      case Op::kMul:
        if (needs(i0)) accumulate(i0, mul(g, b));
        if (needs(i1)) accumulate(i1, mul(g, a));
        break;
      case Op::kScale:
        accumulate(i0, scale(g, factor));
        break;
      case Op::kAddBias:
        if (needs(i0)) accumulate(i0, g);
        if (needs(i1)) {
          const std::size_t m = t.value(i0).rows();
          const std::size_t n = t.value(i0).cols();
          accumulate(i1, reshape(segment_sum(g, m), Shape{n}));
        }
        break;
      case Op::kMulRows:
        if (needs(i0)) accumulate(i0, mul_rows(g, b));
        if (needs(i1)) accumulate(i1, sum_cols(mul(g, a)));
        break;
      case Op::kMatMul:
        if (needs(i0)) accumulate(i0, matmul(g, transpose(b)));
        if (needs(i1)) accumulate(i1, matmul(transpose(a), g));
        break;
      case Op::kTranspose:
        accumulate(i0, transpose(g));
        break;
      case Op::kExp:
        accumulate(i0, mul(g, self));
        break;
      case Op::kLog:
        accumulate(i0, mul(g, recip(a)));
        break;
      case Op::kTanh:
        accumulate(i0, sub(g, mul(g, mul(self, self))));
        break;
      case Op::kRecip:
        accumulate(i0, scale(mul(g, mul(self, self)), -1.0));
        break;
      case Op::kSumAll: {
        const Shape shape = t.value(i0).shape();
        accumulate(i0, fill(g, shape));
        break;
      }
      case Op::kFill:
        accumulate(i0, sum_all(g));
        break;
      case Op::kSumCols:
        accumulate(i0, broadcast_cols(g, t.value(i0).cols()));
        break;
      case Op::kBroadcastCols:
        accumulate(i0, sum_cols(g));
        break;
      case Op::kSegmentSum:
        accumulate(i0, repeat_rows(g, arg0));
        break;
      case Op::kRepeatRows:
        accumulate(i0, segment_sum(g, arg0));
        break;
      case Op::kGatherRows:
        accumulate(i0, scatter_rows(g, indices, arg0));
        break;
      case Op::kScatterRows:
        accumulate(i0, gather_rows(g, indices));
        break;
      case Op::kSliceCols:
        accumulate(i0, pad_cols(g, arg0, arg1));
        break;
      case Op::kPadCols:
        accumulate(i0, slice_cols(g, arg0, arg1));
        break;
      case Op::kReshape: {
        const Shape shape = t.value(i0).shape();
        accumulate(i0, reshape(g, shape));
        break;
      }
      case Op::kBlockScores:
        if (needs(i0)) accumulate(i0, block_apply(g, b, arg0, arg1));
        if (needs(i1)) accumulate(i1, block_apply_t(g, a, arg0, arg1));
        break;
      case Op::kBlockApply:
        if (needs(i0)) accumulate(i0, block_scores(g, b, arg0, arg1));
        if (needs(i1)) accumulate(i1, block_apply_t(a, g, arg0, arg1));
        break;
      case Op::kBlockApplyT:
        if (needs(i0)) accumulate(i0, block_scores(b, g, arg0, arg1));
        if (needs(i1)) accumulate(i1, block_apply(a, g, arg0, arg1));
        break;
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.tape != &t) throw Error("grad: target lives on a different tape");
    if (w.id <= root && adj[w.id] != kNone) {
      result.push_back(Var{&t, adj[w.id]});
    } else {
      result.push_back(t.constant(Tensor(w.shape())));
    }
  }
  return result;
}

std::vector<Tensor> grad_values(Var out, std::span<const Var> wrt) {
  Tape& t = *out.tape;
  const std::size_t mark = t.size();
  const bool checking = t.check_finite();
  std::vector<Tensor> values;
  t.set_check_finite(false);
  try {
    const auto grads = grad(out, wrt);
    values.reserve(grads.size());
    for (const Var& g : grads) values.push_back(g.value());
  } catch (...) {
    t.set_check_finite(checking);
    t.truncate(mark);
    throw;
  }
  t.set_check_finite(checking);
  t.truncate(mark);
  if (checking) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!values[i].all_finite()) throw NonFiniteError(static_cast<NodeId>(mark), "grad_values output " + std::to_string(i));
    }
  }
  return values;
}

}  // namespace hessdiag::ad
