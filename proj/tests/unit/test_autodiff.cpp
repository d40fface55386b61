#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "hessdiag/autodiff.hpp"
#include "hessdiag/error.hpp"
#include "hessdiag/objective.hpp"
#include "hessdiag/rng.hpp"
#include "oracles.hpp"

using namespace hessdiag;
namespace ad = hessdiag::ad;

namespace {

const std::vector<Example> kNoBatch(1);

Objective objective_of(ParamLayout layout,
                       std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)> body) {
  return Objective(std::move(layout), [body](ad::Tape& t, std::span<const ad::Var> p, Batch) { return body(t, p); });
}

FlatVector seeded(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  FlatVector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = scale * rng::normal(seed, i);
  return v;
}

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Every primitive, each wrapped so that the loss is nonlinear in its output.
struct OpCase {
  const char* name;
  std::function<ad::Var(ad::Tape&, ad::Var x, ad::Var y)> build;
};

auto idx(std::vector<std::size_t> v) { return std::make_shared<const std::vector<std::size_t>>(std::move(v)); }

const std::vector<OpCase>& op_cases() {
  static const std::vector<OpCase> cases = {
      {"add", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::add(x, y); }},
      {"sub", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::sub(x, y); }},
      {"mul", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(x, y); }},
      {"scale", [](ad::Tape&, ad::Var x, ad::Var) { return ad::scale(x, -1.7); }},
      {"exp", [](ad::Tape&, ad::Var x, ad::Var) { return ad::exp(ad::scale(x, 0.5)); }},
      {"log", [](ad::Tape& t, ad::Var x, ad::Var) {
         return ad::log(ad::add(ad::mul(x, x), t.constant(Tensor::filled({4, 3}, 1.0))));
       }},
      {"tanh", [](ad::Tape&, ad::Var x, ad::Var) { return ad::tanh(x); }},
      {"recip", [](ad::Tape& t, ad::Var x, ad::Var) {
         return ad::recip(ad::add(ad::mul(x, x), t.constant(Tensor::filled({4, 3}, 0.5))));
       }},
      {"add_bias", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::add_bias(x, ad::reshape(ad::segment_sum(y, 4), {3})); }},
      {"add_bias_row", [](ad::Tape&, ad::Var x, ad::Var y) {
         return ad::add_bias(x, ad::reshape(ad::sum_cols(ad::transpose(y)), {3}));
       }},
      {"mul_rows", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul_rows(x, ad::sum_cols(y)); }},
      {"matmul", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::matmul(x, ad::transpose(y)); }},
      {"transpose", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::transpose(x), ad::transpose(y)); }},
      {"sum_all_fill", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::fill(ad::sum_all(ad::mul(x, x)), {4, 3}), y); }},
      {"sum_cols_broadcast", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::broadcast_cols(ad::sum_cols(x), 3), y); }},
      {"segment_repeat", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::repeat_rows(ad::segment_sum(x, 2), 2), y); }},
      {"gather_scatter", [](ad::Tape&, ad::Var x, ad::Var y) {
         return ad::mul(ad::scatter_rows(ad::gather_rows(x, idx({2, 0, 2, 3})), idx({1, 1, 0, 3}), 4), y);
       }},
      {"slice_pad", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::pad_cols(ad::slice_cols(x, 1, 2), 0, 3), y); }},
      {"reshape", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::reshape(x, {3, 4}), ad::reshape(y, {3, 4})); }},
      {"softmax_rows", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::mul(ad::softmax_rows(x), y); }},
      {"cross_entropy", [](ad::Tape&, ad::Var x, ad::Var y) {
         static const std::vector<int> labels = {0, 2, 1, 2};
         return ad::scale(ad::cross_entropy_with_logits(ad::mul(x, y), labels), 1.0);
       }},
      {"block_scores", [](ad::Tape&, ad::Var x, ad::Var y) { return ad::block_scores(x, y, 2, 2); }},
      {"block_apply", [](ad::Tape&, ad::Var x, ad::Var y) {
         return ad::block_apply(ad::slice_cols(x, 0, 2), y, 2, 2);
       }},
      {"block_apply_t", [](ad::Tape&, ad::Var x, ad::Var y) {
         return ad::block_apply_t(ad::slice_cols(x, 0, 1), y, 4, 1);
       }},
      {"block_uneven", [](ad::Tape&, ad::Var x, ad::Var y) {
         // two blocks: 2 query rows against 2 key rows drawn from y's first four rows
         return ad::block_apply(ad::softmax_rows(ad::block_scores(x, y, 2, 2)), ad::tanh(y), 2, 2);
       }},
  };
  return cases;
}

Objective op_objective(const OpCase& c, std::uint64_t weight_seed) {
  ParamLayout layout;
  layout.add("x", {4, 3});
  layout.add("y", {4, 3});
  return objective_of(layout, [c, weight_seed](ad::Tape& t, std::span<const ad::Var> p) {
    const ad::Var out = c.build(t, p[0], p[1]);
    const Shape shape = out.shape();
    const std::size_t n = shape_size(shape);
    const ad::Var w = t.constant(Tensor(shape, seeded(n, weight_seed)));
    return ad::dot(ad::tanh(out), w);
  });
}

}  // namespace

TEST(Forward, HalfSquaredNorm) {
  ParamLayout layout;
  layout.add("theta", {2});
  const auto obj = objective_of(layout, [](ad::Tape&, std::span<const ad::Var> p) { return ad::scale(ad::dot(p[0], p[0]), 0.5); });
  const FlatVector theta = {3, 4};
  EXPECT_DOUBLE_EQ(forward(obj, theta, kNoBatch), 12.5);
  EXPECT_EQ(gradient(obj, theta, kNoBatch), theta);
  const FlatVector v = {-0.3, 2.5};
  const FlatVector hv = hvp(obj, theta, kNoBatch, v);
  EXPECT_NEAR(hv[0], v[0], 1e-15);
  EXPECT_NEAR(hv[1], v[1], 1e-15);
}

TEST(Forward, UniformCrossEntropyIsLogC) {
  ad::Tape t;
  const ad::Var logits = t.leaf(Tensor({3, 4}));
  const std::vector<int> labels = {0, 3, 2};
  EXPECT_NEAR(ad::cross_entropy_with_logits(logits, labels).value().item(), std::log(4.0), 1e-15);
}

TEST(Gradient, Bilinear) {
  ParamLayout layout;
  layout.add("theta", {2});
  const auto obj = objective_of(layout, [](ad::Tape&, std::span<const ad::Var> p) {
    return ad::sum_all(ad::mul(ad::slice_cols(ad::reshape(p[0], {1, 2}), 0, 1), ad::slice_cols(ad::reshape(p[0], {1, 2}), 1, 1)));
  });
  const FlatVector g = gradient(obj, FlatVector{2, 5}, kNoBatch);
  EXPECT_DOUBLE_EQ(g[0], 5);
  EXPECT_DOUBLE_EQ(g[1], 2);
}

TEST(Hvp, QuadraticFormReturnsAv) {
  const std::size_t n = 5;
  const auto a = oracle::random_symmetric(n, 9);
  ParamLayout layout;
  layout.add("theta", {n});
  const auto obj = objective_of(layout, [&a, n](ad::Tape& t, std::span<const ad::Var> p) {
    const ad::Var A = t.constant(Tensor({n, n}, std::vector<double>(a.data().begin(), a.data().end())));
    const ad::Var col = ad::reshape(p[0], {n, 1});
    return ad::scale(ad::sum_all(ad::mul(col, ad::matmul(A, col))), 0.5);
  });
  const FlatVector theta = seeded(n, 1), v = seeded(n, 2);
  const FlatVector hv = hvp(obj, theta, kNoBatch, v);
  const FlatVector av = a.multiply(v);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(hv[i], av[i], 1e-13);
}

TEST(Hvp, DimensionMismatchThrows) {
  ParamLayout layout;
  layout.add("theta", {3});
  const auto obj = objective_of(layout, [](ad::Tape&, std::span<const ad::Var> p) { return ad::dot(p[0], p[0]); });
  EXPECT_THROW(hvp(obj, FlatVector{1, 2, 3}, kNoBatch, FlatVector{1, 2}), DimensionError);
}

TEST(GradientNorm, Examples) {
  const FlatVector g = {3, 4};
  EXPECT_DOUBLE_EQ(gradient_norm(g, {0, 1}), 5.0);
  EXPECT_DOUBLE_EQ(gradient_norm(g, {}), 0.0);
}

TEST(GradientNorm, MatchesNaiveSummation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FlatVector g = seeded(200, seed);
    rng::Stream r(seed + 100);
    IndexSet idx;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (r.next_uniform() < 0.3) idx.push_back(i);
    double s = 0;
    for (std::size_t i : idx) s += g[i] * g[i];
    EXPECT_NEAR(gradient_norm(g, idx), std::sqrt(s), 1e-12);
  }
}

TEST(NonFinite, ReportsFirstOffendingNode) {
  ad::Tape t;
  const ad::Var x = t.leaf(Tensor({2}, {0.0, 1.0}));
  try {
    ad::log(x);
    FAIL() << "log(0) must raise";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.node_id(), 1u);
    EXPECT_EQ(e.op_name(), "log");
  }
}

TEST(NonFinite, ForwardSurfacesIt) {
  ParamLayout layout;
  layout.add("theta", {1});
  const auto obj = objective_of(layout, [](ad::Tape&, std::span<const ad::Var> p) { return ad::sum_all(ad::exp(p[0])); });
  EXPECT_THROW(forward(obj, FlatVector{1000.0}, kNoBatch), NonFiniteError);
}

TEST(Shapes, MismatchThrows) {
  ad::Tape t;
  const ad::Var a = t.leaf(Tensor({2, 3}));
  const ad::Var b = t.leaf(Tensor({2, 2}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, b), ShapeError);
  EXPECT_THROW(ad::block_scores(a, t.leaf(Tensor({3, 3})), 2, 2), ShapeError);
}

TEST(Tape, GraphIsTopologicallyOrdered) {
  ad::Tape t;
  const ad::Var x = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  const ad::Var y = ad::softmax_rows(ad::matmul(x, ad::transpose(x)));
  ad::grad(ad::sum_all(ad::mul(y, y)), std::vector<ad::Var>{x});
  for (std::size_t id = 0; id < t.size(); ++id) {
    const auto& n = t.node(static_cast<ad::NodeId>(id));
    if (n.op == ad::Op::kLeaf || n.op == ad::Op::kConstant) continue;
    EXPECT_LT(n.in0, id);
    EXPECT_LT(n.in1, id);
  }
}

TEST(Tape, GradValuesRollsBack) {
  ad::Tape t;
  const ad::Var x = t.leaf(Tensor({3}, {1, 2, 3}));
  const ad::Var l = ad::dot(x, x);
  const std::size_t before = t.size();
  const auto g = ad::grad_values(l, std::vector<ad::Var>{x});
  EXPECT_EQ(t.size(), before);
  EXPECT_DOUBLE_EQ(g[0][2], 6.0);
}

// Property: every primitive's gradient against central differences, 100+ seeds.
TEST(OpProperty, GradientMatchesFiniteDifferences) {
  for (const auto& c : op_cases()) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto obj = op_objective(c, 1000 + seed);
      const FlatVector x = seeded(obj.dim(), seed, 0.7);
      const FlatVector g = gradient(obj, x, kNoBatch);
      const FlatVector fd = oracle::fd_gradient([&](std::span<const double> p) { return forward(obj, p, kNoBatch); }, x, 1e-5);
      worst = std::max(worst, oracle::max_rel_error(g, fd));
    }
    EXPECT_LE(worst, 1e-5) << c.name;
  }
}

TEST(OpProperty, HvpMatchesFiniteDifferencesOfGradients) {
  for (const auto& c : op_cases()) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto obj = op_objective(c, 2000 + seed);
      const FlatVector x = seeded(obj.dim(), seed, 0.7);
      const FlatVector v = seeded(obj.dim(), seed + 500);
      const FlatVector hv = hvp(obj, x, kNoBatch, v);
      const FlatVector fd = oracle::fd_hvp([&](std::span<const double> p) { return gradient(obj, p, kNoBatch); }, x, v, 1e-4);
      worst = std::max(worst, oracle::max_rel_error(hv, fd));
    }
    EXPECT_LE(worst, 1e-4) << c.name;
  }
}

TEST(OpProperty, HvpSymmetricLinearDeterministic) {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto obj = op_objective(c, 3000 + seed);
      const FlatVector x = seeded(obj.dim(), seed, 0.7);
      const FlatVector u = seeded(obj.dim(), seed + 1), v = seeded(obj.dim(), seed + 2);
      HvpEngine eng(obj, x, kNoBatch);
      const FlatVector hu = eng.apply(u), hv = eng.apply(v);
      const double a = inner(hu, v), b = inner(u, hv);
      EXPECT_LE(std::abs(a - b), 1e-8 * std::max({std::abs(a), std::abs(b), 1e-300})) << c.name << " seed " << seed;

      const double alpha = 1.3, beta = -0.4;
      FlatVector mix(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) mix[i] = alpha * u[i] + beta * v[i];
      const FlatVector hm = eng.apply(mix);
      FlatVector lin(u.size());
      double scale = 0;
      for (std::size_t i = 0; i < u.size(); ++i) {
        lin[i] = alpha * hu[i] + beta * hv[i];
        scale = std::max(scale, std::abs(lin[i]));
      }
      for (std::size_t i = 0; i < u.size(); ++i) EXPECT_LE(std::abs(hm[i] - lin[i]), 1e-10 * std::max(scale, 1e-300)) << c.name;

      EXPECT_EQ(eng.apply(u), hu) << c.name;
      EXPECT_EQ(hvp(obj, x, kNoBatch, u), hu) << c.name;
    }
  }
}

TEST(Softmax, RowsAreStochastic) {
  ad::Tape t;
  const ad::Var x = t.leaf(Tensor({3, 5}, seeded(15, 4, 30.0)));
  const Tensor s = ad::softmax_rows(x).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_GE(s.at(i, j), 0.0);
      sum += s.at(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}
