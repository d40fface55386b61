#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hessdiag/config.hpp"
#include "hessdiag/diagnosis.hpp"
#include "hessdiag/engineered.hpp"
#include "hessdiag/error.hpp"
#include "oracles.hpp"

using namespace hessdiag;

namespace {

const std::vector<Example> kPlaceholder = placeholder_batch(1);

struct Row {
  double trace, lo, hi;
  CurvatureLabel label;
};

// reference rows: trace, extreme eigenvalues, expected label
const Row kReferenceRows[] = {
    {-5.72, -0.4186, 0.4493, CurvatureLabel::kConcaveFragile},
    {2.86, -0.0007, 0.0387, CurvatureLabel::kConvexStable},
    {1.92, -0.0004, 0.0228, CurvatureLabel::kConvexStable},
    {4.37, 0.0095, 0.0583, CurvatureLabel::kConvexStable},
    {-2.11, -0.2016, 0.1274, CurvatureLabel::kConcaveFragile},
    {-2.24, -0.1473, 0.0611, CurvatureLabel::kConcaveFragile},
    {3.12, 0.0049, 0.0483, CurvatureLabel::kConvexStable},
    {1.75, -0.0006, 0.0483, CurvatureLabel::kConvexStable},
};

Model two_block_quadratic() {
  std::vector<double> d = {-1, -1, -1, 2, 2, 2, 2};
  return quadratic_model(DenseMatrix::diagonal(d), {{"neg", 3}, {"pos", 4}});
}

}  // namespace

TEST(Classify, ReferenceRows) {
  for (const auto& r : kReferenceRows) EXPECT_EQ(classify_curvature(r.trace, r.lo, r.hi), r.label) << r.trace;
  EXPECT_EQ(classify_curvature(0, 0, 0), CurvatureLabel::kDegenerateFlat);
  EXPECT_EQ(classify_curvature(1e-7, -1, 1), CurvatureLabel::kDegenerateFlat);
  EXPECT_EQ(classify_curvature(1e-7, -1, 1, 1e-8), CurvatureLabel::kConvexStable);
}

TEST(Classify, LabelStringsRoundTrip) {
  for (auto l : {CurvatureLabel::kConvexStable, CurvatureLabel::kConcaveFragile, CurvatureLabel::kDegenerateFlat})
    EXPECT_EQ(parse_curvature_label(to_string(l)), l);
  EXPECT_THROW(parse_curvature_label("wobbly"), Error);
  EXPECT_EQ(parse_estimator_mode("dense"), EstimatorMode::kDense);
  EXPECT_THROW(parse_estimator_mode("exact"), ConfigError);
}

TEST(Classify, EstimatorValidation) {
  EstimatorConfig e;
  EXPECT_NO_THROW(validate(e));
  e.probes = 0;
  EXPECT_THROW(validate(e), ConfigError);
  e = {};
  e.lanczos_iters = 1;
  EXPECT_THROW(validate(e), ConfigError);
}

TEST(CurvatureTable, QuadraticBlocksDense) {
  const Model m = two_block_quadratic();
  EstimatorConfig est;
  est.mode = EstimatorMode::kDense;
  const auto rows = curvature_table(m, kPlaceholder, {"neg", "pos"}, est);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NEAR(rows[0].report.trace, -3.0, 1e-12);
  EXPECT_NEAR(rows[1].report.trace, 8.0, 1e-12);
  EXPECT_EQ(rows[0].label, CurvatureLabel::kConcaveFragile);
  EXPECT_EQ(rows[1].label, CurvatureLabel::kConvexStable);
  EXPECT_NEAR(rows[1].report.eig_min, 2.0, 1e-12);
  EXPECT_EQ(rows[0].report.probes_used, 3);
  EXPECT_EQ(rows[0].report.mode, "dense");
  ASSERT_TRUE(rows[0].report.spectrum.has_value());
}

TEST(CurvatureTable, StochasticAgreesWithDenseLabels) {
  const Model m = two_block_quadratic();
  EstimatorConfig st, de;
  de.mode = EstimatorMode::kDense;
  const auto a = curvature_table(m, kPlaceholder, {"neg", "pos"}, st);
  const auto b = curvature_table(m, kPlaceholder, {"neg", "pos"}, de);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].report.mode, "stochastic");
    // Rademacher probes are exact on diagonal blocks
    EXPECT_NEAR(a[i].report.trace, b[i].report.trace, 1e-10);
    EXPECT_NEAR(a[i].report.eig_min, b[i].report.eig_min, 1e-6);
    EXPECT_NEAR(a[i].report.eig_max, b[i].report.eig_max, 1e-6);
  }
}

TEST(CurvatureTable, GroupOrderDoesNotChangeRows) {
  RunConfig c = default_run_config(ModelKind::kHierarchical);
  c.data.train_size = 16;
  const Model m = build_model(c.model);
  const auto d = gen_dataset(data_spec(c), 3);
  EstimatorConfig est;
  est.probes = 64;
  const auto fwd = curvature_table(m, d.train.batch(), {"word_attention", "sentence_attention"}, est);
  const auto rev = curvature_table(m, d.train.batch(), {"sentence_attention", "word_attention"}, est);
  ASSERT_EQ(fwd.size(), 2u);
  EXPECT_EQ(fwd[0].report.trace, rev[1].report.trace);
  EXPECT_EQ(fwd[1].report.trace, rev[0].report.trace);
  EXPECT_EQ(fwd[0].report.eig_min, rev[1].report.eig_min);
  EXPECT_EQ(fwd[0].label, rev[1].label);
  EXPECT_NE(group_seed(11, "word_attention"), group_seed(11, "sentence_attention"));
  const std::string text = format_curvature_table(fwd);
  EXPECT_NE(text.find("Layer"), std::string::npos);
  EXPECT_NE(text.find("word_attention"), std::string::npos);
  EXPECT_NE(text.find("sentence_attention"), std::string::npos);
  EXPECT_THROW(curvature_table(m, d.train.batch(), {"bogus"}, est), ConfigError);
}

TEST(Engineered, FragileAndControl) {
  const Model m = fragile_model();
  EstimatorConfig est;
  const FragileSpec f;
  const auto rows = curvature_table(m, kPlaceholder, {f.fragile_group, f.control_group}, est);
  EXPECT_NEAR(rows[0].report.trace, -8.0, 1e-9);
  EXPECT_NEAR(rows[1].report.trace, 8.0, 1e-9);
  EXPECT_EQ(rows[0].label, CurvatureLabel::kConcaveFragile);
  EXPECT_EQ(rows[1].label, CurvatureLabel::kConvexStable);

  for (double alpha : {0.01, 0.1, 0.5}) {
    PerturbationSpec s{f.fragile_group, {alpha}, 200, 9};
    const auto frag = summarize(sweep(m.objective, m.params, m.registry.indices(f.fragile_group), kPlaceholder, s));
    s.group = f.control_group;
    const auto ctrl = summarize(sweep(m.objective, m.params, m.registry.indices(f.control_group), kPlaceholder, s));
    EXPECT_GT(frag[0].mean_loss_delta, 10 * std::abs(ctrl[0].mean_loss_delta)) << alpha;
    EXPECT_GT(frag[0].mean_grad_norm_perturbed, ctrl[0].mean_grad_norm_perturbed) << alpha;
  }
}

TEST(Labels, ParseAndFormatAreInverse) {
  const Model m = build_model(default_run_config(ModelKind::kCrossAttention).model);
  for (std::size_t i = 0; i < m.params.size(); i += 37) {
    const std::string label = parameter_label(m.layout(), i);
    EXPECT_EQ(parse_parameter_label(m.layout(), label), i) << label;
  }
  EXPECT_THROW(parameter_label(m.layout(), m.params.size()), Error);
  for (const char* bad : {"nope[0]", "classifier.weight", "classifier.weight[0]", "classifier.weight[0,x]",
                          "classifier.weight[0,99999]", "classifier.weight[]"})
    EXPECT_THROW(parse_parameter_label(m.layout(), bad), ConfigError) << bad;
}

TEST(Selection, ExplicitErrorsNameKnownGroups) {
  const Model m = build_model(default_run_config(ModelKind::kHierarchical).model);
  try {
    explicit_selection(m, {"sentence_attn"});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sentence_attention"), std::string::npos);
  }
  const auto sel = explicit_selection(m, {"word_attention", "classifier.bias[1]"});
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].indices, m.registry.indices("word_attention"));
  EXPECT_EQ(sel[1].indices.size(), 1u);
  EXPECT_EQ(sel[1].group, m.registry.group_of(sel[1].indices[0]));
}

TEST(Selection, HeuristicPicksLargestDiagonal) {
  std::vector<double> d = {0.5, -3, 2, 1, -0.1, 4};
  const Model m = quadratic_model(DenseMatrix::diagonal(d), {{"a", 3}, {"b", 3}});
  const auto sel = heuristic_selection(m, kPlaceholder, {"a", "b"}, 2);
  ASSERT_EQ(sel.size(), 4u);
  EXPECT_EQ(sel[0].indices, IndexSet{1});
  EXPECT_EQ(sel[1].indices, IndexSet{2});
  EXPECT_EQ(sel[2].indices, IndexSet{5});
  EXPECT_EQ(sel[3].indices, IndexSet{3});
  EXPECT_THROW(heuristic_selection(m, kPlaceholder, {"a"}, 0), ConfigError);
}

TEST(Interactions, EngineeredTopCoupling) {
  DenseMatrix a = DenseMatrix::identity(4);
  const double v[4][4] = {{1, .14, -.51, -.09}, {.14, 1, -.68, .04}, {-.51, -.68, 1, .08}, {-.09, .04, .08, 1}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) a(i, j) = v[i][j];
  const Model m = quadratic_model(a, {{"word_attention", 2}, {"sentence_attention", 2}});
  const auto sel = explicit_selection(m, {"word_attention.theta[0]", "word_attention.theta[1]",
                                          "sentence_attention.theta[0]", "sentence_attention.theta[1]"});
  const auto r = interaction_report(m, kPlaceholder, sel);
  ASSERT_EQ(r.ranked.size(), 4u);  // only cross-group pairs
  EXPECT_EQ(r.ranked[0].label_i, "word_attention.theta[1]");
  EXPECT_EQ(r.ranked[0].label_j, "sentence_attention.theta[0]");
  EXPECT_NEAR(r.ranked[0].normalized, -0.68, 1e-12);

  // brute-force ranking over the matrix
  std::vector<std::pair<double, std::pair<int, int>>> all;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j)
      if (sel[i].group != sel[j].group) all.push_back({std::abs(v[i][j]), {i, j}});
  std::stable_sort(all.begin(), all.end(), [](auto& x, auto& y) { return x.first > y.first; });
  for (std::size_t k = 0; k < all.size(); ++k) {
    EXPECT_EQ(r.ranked[k].i, std::size_t(all[k].second.first));
    EXPECT_EQ(r.ranked[k].j, std::size_t(all[k].second.second));
  }
}

TEST(Interactions, PermutationInvariant) {
  const auto a = oracle::random_symmetric(6, 5);
  const Model m = quadratic_model(a, {{"x", 3}, {"y", 3}});
  std::vector<Selection> sel;
  for (std::size_t i = 0; i < 6; ++i) sel.push_back({"p" + std::to_string(i), i < 3 ? "x" : "y", {i}});
  std::vector<std::size_t> perm = {4, 0, 5, 2, 1, 3};
  std::vector<Selection> psel;
  for (auto p : perm) psel.push_back(sel[p]);
  const auto base = interaction_matrix(m.objective, m.params, kPlaceholder, sel);
  const auto shuf = interaction_matrix(m.objective, m.params, kPlaceholder, psel);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_NEAR(shuf.raw(i, j), base.raw(perm[i], perm[j]), 1e-12);
      if (i != j) {
        EXPECT_NEAR(shuf.normalized(i, j), base.normalized(perm[i], perm[j]), 1e-12);
      }
    }
}

TEST(Intervention, NoRetrainingIsIdentity) {
  const Model m = coupled_model();
  Dataset d;
  d.examples = placeholder_batch(4);
  InterventionConfig ic;
  ic.target_group = "source_attention";
  ic.lr_scale = 1.0;
  ic.retrain.epochs = 0;
  const auto sel = group_selection(m, m.registry.names());
  const auto r = run_intervention(m, d, sel, kPlaceholder, {}, ic);
  ASSERT_TRUE(r.coupling_after.has_value());
  EXPECT_EQ(*r.coupling_after, r.coupling_before);
  EXPECT_EQ(r.retrained_params, m.params);
  EXPECT_TRUE(r.complete);
}

TEST(Intervention, DampedSourceLearningRateWeakensCoupling) {
  const Model m = coupled_model();
  const FlatVector original = m.params;
  Dataset d;
  d.examples = placeholder_batch(4);
  InterventionConfig ic;
  ic.target_group = "source_attention";
  ic.lr_scale = 0.1;
  ic.retrain.epochs = 20;
  ic.retrain.learning_rate = 0.05;
  ic.retrain.batch_size = 4;
  const auto sel = group_selection(m, m.registry.names());
  const auto r = run_intervention(m, d, sel, kPlaceholder, {}, ic);
  ASSERT_TRUE(r.coupling_after.has_value());
  EXPECT_LT(r.coupling_before, -0.5);
  EXPECT_LT(std::abs(*r.coupling_after), std::abs(r.coupling_before));
  EXPECT_EQ(m.params, original);
  EXPECT_FALSE(r.variability_before.has_value());
}

TEST(Intervention, BadConfig) {
  const Model m = coupled_model();
  Dataset d;
  d.examples = placeholder_batch(4);
  const auto sel = group_selection(m, m.registry.names());
  InterventionConfig ic;
  ic.target_group = "source_attention";
  ic.lr_scale = 0.0;
  EXPECT_THROW(run_intervention(m, d, sel, kPlaceholder, {}, ic), ConfigError);
  ic.lr_scale = 0.5;
  ic.target_group = "missing";
  EXPECT_THROW(run_intervention(m, d, sel, kPlaceholder, {}, ic), ConfigError);
  ic.target_group = "source_attention";
  ic.tracked_pair = std::make_pair(std::string("source_attention"), std::string("nope"));
  EXPECT_THROW(run_intervention(m, d, sel, kPlaceholder, {}, ic), ConfigError);
}

TEST(Intervention, TrainedModelReportsVariability) {
  RunConfig c = default_run_config(ModelKind::kHierarchical);
  c.data.train_size = 32;
  c.data.test_size = 16;
  Model m = build_model(c.model);
  const auto data = gen_dataset(data_spec(c), 2);
  auto opt = optimizer(c);
  opt.epochs = 10;
  train(m, data.train, opt);
  InterventionConfig ic;
  ic.target_group = "word_attention";
  ic.retrain = opt;
  ic.retrain.epochs = 3;
  const auto sel = group_selection(m, {"word_attention", "sentence_attention"});
  const auto r = run_intervention(m, data.train, sel, data.train.batch(), data.test.batch(), ic);
  ASSERT_TRUE(r.variability_before && r.variability_after);
  EXPECT_GE(*r.variability_after, 0.0);
  EXPECT_LE(*r.variability_after, 1.0);
  EXPECT_EQ(r.pair_i, "word_attention");
  EXPECT_EQ(r.pair_j, "sentence_attention");
  EXPECT_EQ(r.reference.group, "word_attention");
}
