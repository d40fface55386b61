#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "hessdiag/tensor.hpp"

// Reverse-mode autodiff on a define-by-run tape.
//
// Every backward rule is written in terms of the differentiable ops below,
// so the gradient graph produced by grad() is itself differentiable. A
// Hessian-vector product is the gradient of <grad L, v>.
namespace hessdiag::ad {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddBias,
  kMulRows,
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kTanh,
  kRecip,
  kSumAll,
  kFill,
  kSumCols,
  kBroadcastCols,
  kSegmentSum,
  kRepeatRows,
  kGatherRows,
  kScatterRows,
  kSliceCols,
  kPadCols,
  kReshape,
  kBlockScores,
  kBlockApply,
  kBlockApplyT,
};

std::string_view op_name(Op op) noexcept;

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

struct Node {
  Op op = Op::kConstant;
  NodeId in0 = 0;
  NodeId in1 = 0;
  bool requires_grad = false;
  double scalar = 0.0;       // kScale factor
  std::size_t arg0 = 0;      // op-specific integer arguments
  std::size_t arg1 = 0;
  std::shared_ptr<const std::vector<std::size_t>> indices;  // gather/scatter rows
  Tensor value;
};

// Owns the nodes of one evaluation. Nodes are appended in topological order,
// so the id order is a valid evaluation order. Every pushed value is checked
// for NaN/Inf; the first offender raises NonFiniteError with its node id.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  const Node& node(NodeId id) const { return nodes_[id]; }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Drops every node with id >= n. Handles to dropped nodes become invalid.
  void truncate(std::size_t n);
  void reserve(std::size_t n) { nodes_.reserve(n); }

  Var push(Node node);

  // Per-node finiteness checks; grad_values switches them off for the
  // throwaway graph and checks its outputs once instead.
  bool check_finite() const noexcept { return check_finite_; }
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  std::vector<Node> nodes_;
  bool check_finite_ = true;
};

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var recip(Var a);

// x[m,n] + bias[n] broadcast over rows.
Var add_bias(Var x, Var bias);
// x[m,n] * c[m]: row i scaled by c_i.
Var mul_rows(Var x, Var c);
Var matmul(Var a, Var b);
Var transpose(Var a);

// Any shape to a scalar, and the scalar back to `shape`.
Var sum_all(Var a);
Var fill(Var scalar, const Shape& shape);
// x[m,n] -> [m] and back.
Var sum_cols(Var x);
Var broadcast_cols(Var c, std::size_t n);
// x[m,n] -> [m/k,n] summing each run of k consecutive rows, and its adjoint.
Var segment_sum(Var x, std::size_t k);
Var repeat_rows(Var x, std::size_t k);
// table[V,n] -> rows picked by `indices`; the adjoint accumulates into V rows.
Var gather_rows(Var table, std::shared_ptr<const std::vector<std::size_t>> indices);
Var scatter_rows(Var x, std::shared_ptr<const std::vector<std::size_t>> indices,
                 std::size_t total_rows);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var pad_cols(Var x, std::size_t start, std::size_t total_cols);
Var reshape(Var x, const Shape& shape);

// Block-diagonal attention helpers. Rows of q-side tensors come in blocks of
// lq, rows of k-side tensors in blocks of lk; block b of one only meets block
// b of the other. Shapes:
//   block_scores(q[B*lq,d], k[B*lk,d])  -> [B*lq, lk]   q_i . k_j
//   block_apply(a[B*lq,lk], v[B*lk,d])  -> [B*lq, d]    sum_j a_ij v_j
//   block_apply_t(a[B*lq,lk], x[B*lq,d]) -> [B*lk, d]   sum_i a_ij x_i
Var block_scores(Var q, Var k, std::size_t lq, std::size_t lk);
Var block_apply(Var a, Var v, std::size_t lq, std::size_t lk);
Var block_apply_t(Var a, Var x, std::size_t lq, std::size_t lk);

// Composites built only from the primitives above, so their second
// derivatives come for free.
Var softmax_rows(Var x);
Var cross_entropy_with_logits(Var logits, std::span<const int> labels);
Var mean_all(Var a);
Var dot(Var a, Var b);

// Gradients of scalar `out` with respect to `wrt`, recorded on the tape as
// new differentiable nodes. Entries whose leaf is unreachable come back as
// zero constants.
std::vector<Var> grad(Var out, std::span<const Var> wrt);

// Same as grad(), but returns plain values and rolls the tape back to its
// size before the call.
std::vector<Tensor> grad_values(Var out, std::span<const Var> wrt);

}  // namespace hessdiag::ad
