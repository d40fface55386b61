#include "hessdiag/engineered.hpp"

#include "hessdiag/error.hpp"

namespace hessdiag {

using ad::Var;

namespace {

ModelConfig engineered_config() {
  ModelConfig c;
  c.kind = ModelKind::kEngineered;
  return c;
}

Var constant_vector(ad::Tape& tape, const std::vector<double>& v) {
  return tape.constant(Tensor({v.size()}, v));
}

}  // namespace

Model quadratic_model(const DenseMatrix& a, const std::vector<BlockSpec>& blocks, FlatVector theta) {
  if (!a.square()) throw ShapeError("quadratic_model: matrix must be square");
  const std::size_t n = a.rows();
  ParamLayout layout;
  std::size_t total = 0;
  int others = 0;
  for (const auto& b : blocks) {
    if (b.size == 0) throw ConfigError("quadratic_model: empty block '" + b.name + "'");
    const std::string tensor = b.name == kOtherGroup ? "other_" + std::to_string(others++) : b.name;
    layout.add(tensor + ".theta", {b.size}, b.name);
    total += b.size;
  }
  if (total != n) throw DimensionError("quadratic_model: blocks cover " + std::to_string(total) + " of " + std::to_string(n));
  if (theta.empty()) theta.assign(n, 0.0);
  if (theta.size() != n) throw DimensionError("quadratic_model: theta has the wrong dim");

  auto matrix = std::make_shared<const Tensor>(Shape{n, n}, std::vector<double>(a.data().begin(), a.data().end()));
  auto loss = [matrix, n](ad::Tape& tape, std::span<const Var> leaves, Batch) {
    Var row;
    bool first = true;
    std::size_t offset = 0;
    for (const Var& leaf : leaves) {
      const std::size_t k = leaf.shape()[0];
      Var piece = ad::pad_cols(ad::reshape(leaf, {1, k}), offset, n);
      row = first ? piece : ad::add(row, piece);
      first = false;
      offset += k;
    }
    Var ar = ad::matmul(row, tape.constant(*matrix));
    return ad::scale(ad::dot(ar, row), 0.5);
  };
  Objective objective(std::move(layout), loss);
  GroupRegistry registry = registry_from_layout(objective.layout());
  return Model{engineered_config(), std::move(objective), std::move(theta), std::move(registry)};
}

Model fragile_model(const FragileSpec& s) {
  if (s.fragile_dim == 0 || s.control_dim == 0) throw ConfigError("fragile_model: groups must be nonempty");
  ParamLayout layout;
  layout.add(s.fragile_group + ".theta", {s.fragile_dim}, s.fragile_group);
  layout.add(s.control_group + ".theta", {s.control_dim}, s.control_group);
  const double a = s.a, b = s.b, c = s.c;
  auto loss = [a, b, c](ad::Tape&, std::span<const Var> leaves, Batch) {
    const Var x = leaves[0];
    const Var y = leaves[1];
    const Var x2 = ad::mul(x, x);
    const Var well = ad::add(ad::scale(ad::sum_all(x2), -0.5 * a), ad::scale(ad::sum_all(ad::mul(x2, x2)), 0.25 * b));
    const Var bowl = ad::scale(ad::sum_all(ad::mul(y, y)), 0.5 * c);
    return ad::add(well, bowl);
  };
  Objective objective(std::move(layout), loss);
  GroupRegistry registry = registry_from_layout(objective.layout());
  FlatVector theta(s.fragile_dim + s.control_dim, 0.0);
  return Model{engineered_config(), std::move(objective), std::move(theta), std::move(registry)};
}

Model coupled_model(const CoupledSpec& s) {
  const std::size_t k = s.w0.size();
  if (k == 0 || s.s0.size() != k) throw ConfigError("coupled_model: w0 and s0 must be nonempty and equal length");
  ParamLayout layout;
  layout.add(s.source_group + ".theta", {k}, s.source_group);
  layout.add(s.sink_group + ".theta", {k}, s.sink_group);
  const std::vector<double> w0 = s.w0;
  const double mu = s.mu;
  auto loss = [w0, mu](ad::Tape& tape, std::span<const Var> leaves, Batch) {
    const Var w = leaves[0];
    const Var sink = leaves[1];
    const Var r = ad::sub(sink, ad::mul(w, w));
    const Var d = ad::sub(w, constant_vector(tape, w0));
    return ad::add(ad::scale(ad::sum_all(ad::mul(r, r)), 0.5), ad::scale(ad::sum_all(ad::mul(d, d)), 0.5 * mu));
  };
  Objective objective(std::move(layout), loss);
  GroupRegistry registry = registry_from_layout(objective.layout());
  FlatVector theta = s.w0;
  theta.insert(theta.end(), s.s0.begin(), s.s0.end());
  return Model{engineered_config(), std::move(objective), std::move(theta), std::move(registry)};
}

std::vector<Example> placeholder_batch(std::size_t n) { return std::vector<Example>(n); }

}  // namespace hessdiag
