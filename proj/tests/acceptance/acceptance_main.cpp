// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "hessdiag/config.hpp"
#include "hessdiag/diagnosis.hpp"
#include "hessdiag/engineered.hpp"
#include "hessdiag/pipeline.hpp"
#include "hessdiag/report_io.hpp"
#include "hessdiag/rng.hpp"
#include "oracles.hpp"

using namespace hessdiag;
namespace fs = std::filesystem;

namespace {

constexpr ModelKind kKinds[] = {ModelKind::kHierarchical, ModelKind::kSelfAttention, ModelKind::kCrossAttention};

// tolerances
constexpr double kGradTol = 1e-5;
constexpr double kHvpTol = 1e-4;
constexpr double kHvpStep = 1e-4;
constexpr double kSymTol = 1e-8;
constexpr double kLanczosTol = 1e-6;
constexpr int kLanczosMaxIters = 200;
constexpr int kHutchProbes = 4096;
constexpr double kHutchTol = 0.02;
constexpr int kLawTrials = 10000;
constexpr double kLawSigmas = 3.0;
constexpr double kBlockTol = 1e-10;
constexpr double kTraceSumTol = 1e-8;

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

struct Fixture {
  Model model;
  GeneratedData data;
};

// Small seeded model and batch for the derivative checks.
Fixture seeded(ModelKind kind) {
  const RunConfig c = default_run_config(kind);
  Fixture f{build_model(c.model), gen_dataset(data_spec_for(c.model, 8, 4), 1)};
  // move off the initialization so every parameter carries signal
  for (std::size_t i = 0; i < f.model.params.size(); ++i) f.model.params[i] += 0.05 * rng::normal(99, i);
  return f;
}

// The reference run for a kind: default config trained as the train stage does.
struct Reference {
  Model model;
  GeneratedData data;
  DiagnosticBatch diagnostic;
};

const Reference& reference(ModelKind kind) {
  static std::map<ModelKind, Reference> cache;
  auto it = cache.find(kind);
  if (it != cache.end()) return it->second;
  const RunConfig c = default_run_config(kind);
  Reference r{build_model(c.model), gen_dataset(data_spec(c), c.seeds.data), {}};
  train(r.model, r.data.train, optimizer(c));
  r.diagnostic = make_diagnostic_batch(r.data.train, static_cast<std::size_t>(c.estimators.diagnostic_batch_size),
                                       c.seeds.diagnostic);
  return cache.emplace(kind, std::move(r)).first->second;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

Outcome gradients() {
  double worst = 0;
  for (ModelKind k : kKinds) {
    const Fixture f = seeded(k);
    const Batch b = f.data.train.batch();
    const FlatVector g = gradient(f.model.objective, f.model.params, b);
    const auto fd = oracle::fd_gradient(
        [&](std::span<const double> p) { return oracle::straight_line_loss(f.model, p, b); }, f.model.params, 1e-5);
    worst = std::max(worst, oracle::max_rel_error(g, fd));
  }
  return {worst <= kGradTol, "max rel error " + fmt(worst) + " (tol " + fmt(kGradTol) + ")"};
}

Outcome hvps() {
  double worst = 0, worst_sym = 0;
  for (ModelKind k : kKinds) {
    const Fixture f = seeded(k);
    const Batch b = f.data.train.batch();
    const std::size_t n = f.model.params.size();
    FlatVector u(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = rng::normal(31, i);
      v[i] = rng::normal(32, i);
    }
    HvpEngine eng(f.model.objective, f.model.params, b);
    const FlatVector hv = eng.apply(v), hu = eng.apply(u);
    const auto fd = oracle::fd_hvp([&](std::span<const double> p) { return gradient(f.model.objective, p, b); },
                                   f.model.params, v, kHvpStep);
    worst = std::max(worst, oracle::max_rel_error(hv, fd));
    double a = 0, c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      a += hu[i] * v[i];
      c += u[i] * hv[i];
    }
    worst_sym = std::max(worst_sym, std::abs(a - c) / std::max(std::abs(a), std::abs(c)));
  }
  return {worst <= kHvpTol && worst_sym <= kSymTol,
          "fd rel error " + fmt(worst) + ", symmetry " + fmt(worst_sym)};
}

// Dense block of one group plus its independent spectrum.
struct GroupOracle {
  std::string group;
  std::size_t dim;
  double trace;
  oracle::Vec eigs;
};

std::vector<GroupOracle> group_oracles(const Reference& r) {
  std::vector<GroupOracle> out;
  HvpEngine eng(r.model.objective, r.model.params, r.diagnostic.batch());
  for (const auto& [name, idx] : r.model.registry.groups()) {
    const DenseHessian h = dense_hessian(group_restricted_hvp(eng, idx));
    double tr = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) tr += h.matrix(i, i);
    out.push_back({name, idx.size(), tr, oracle::sturm_eigenvalues(h.matrix)});
  }
  return out;
}

Outcome lanczos_accuracy() {
  double worst = 0;
  int max_iters = 0, groups = 0;
  bool all_converged = true;
  for (ModelKind k : kKinds) {
    const Reference& r = reference(k);
    HvpEngine eng(r.model.objective, r.model.params, r.diagnostic.batch());
    for (const auto& o : group_oracles(r)) {
      const auto& idx = r.model.registry.indices(o.group);
      const auto res = lanczos_extreme(group_restricted_hvp(eng, idx), kDefaultLanczosIters, kDefaultLanczosTol,
                                       group_seed(7, o.group));
      const double scale = std::max(std::abs(o.eigs.front()), std::abs(o.eigs.back()));
      const double err = std::max(std::abs(res.eig_min - o.eigs.front()), std::abs(res.eig_max - o.eigs.back())) /
                         std::max(scale, 1e-300);
      worst = std::max(worst, err);
      max_iters = std::max(max_iters, res.iterations);
      all_converged = all_converged && res.converged;
      ++groups;
    }
  }
  return {worst <= kLanczosTol && max_iters <= kLanczosMaxIters,
          std::to_string(groups) + " groups, max rel error " + fmt(worst) + ", max iterations " +
              std::to_string(max_iters) + (all_converged ? "" : " (some not converged)")};
}

Outcome hutchinson_accuracy() {
  double worst = 0;
  std::string where;
  int groups = 0;
  for (ModelKind k : kKinds) {
    const Reference& r = reference(k);
    HvpEngine eng(r.model.objective, r.model.params, r.diagnostic.batch());
    for (const auto& o : group_oracles(r)) {
      const auto& idx = r.model.registry.indices(o.group);
      const auto t = hutchinson_trace(group_restricted_hvp(eng, idx), kHutchProbes, group_seed(11, o.group));
      const double err = std::abs(t.trace - o.trace) / std::max(std::abs(o.trace), 1e-300);
      if (err > worst) {
        worst = err;
        where = to_string(k) + "/" + o.group + " (dense " + fmt(o.trace) + ", estimate " + fmt(t.trace) + " +- " +
                fmt(t.standard_error) + ")";
      }
      ++groups;
    }
  }
  return {worst <= kHutchTol, std::to_string(groups) + " groups, worst rel error " + fmt(worst) + " at " + where};
}

Outcome table_fixture() {
  struct Row {
    double t, lo, hi;
    CurvatureLabel want;
  };
  const Row rows[] = {
      {-5.72, -0.4186, 0.4493, CurvatureLabel::kConcaveFragile}, {2.86, -0.0007, 0.0387, CurvatureLabel::kConvexStable},
      {1.92, -0.0004, 0.0228, CurvatureLabel::kConvexStable},    {4.37, 0.0095, 0.0583, CurvatureLabel::kConvexStable},
      {-2.11, -0.2016, 0.1274, CurvatureLabel::kConcaveFragile}, {-2.24, -0.1473, 0.0611, CurvatureLabel::kConcaveFragile},
      {3.12, 0.0049, 0.0483, CurvatureLabel::kConvexStable},     {1.75, -0.0006, 0.0483, CurvatureLabel::kConvexStable},
  };
  int ok = 0;
  for (const auto& r : rows) ok += classify_curvature(r.t, r.lo, r.hi) == r.want ? 1 : 0;
  return {ok == 8, std::to_string(ok) + "/8 rows"};
}

Outcome perturbation_law() {
  DenseMatrix h = oracle::random_symmetric(10, 4);
  for (std::size_t i = 0; i < 10; ++i) h(i, i) += 10.0;
  const Model m = quadratic_model(h, {{"g", 10}});
  const auto batch = placeholder_batch(1);
  bool pass = true;
  std::string detail;
  // one sweep so each alpha draws its own noise
  const PerturbationSpec s{"g", {0.01, 0.1}, kLawTrials, 23};
  for (const auto& row : summarize(sweep(m.objective, m.params, m.registry.indices("g"), batch, s))) {
    const double expect = row.alpha * row.alpha * h.trace() / 2;
    const double z = std::abs(row.mean_loss_delta - expect) / row.stderr_loss_delta;
    pass = pass && z <= kLawSigmas;
    detail += (detail.empty() ? "" : ", ") + std::string("alpha ") + fmt(row.alpha) + ": " + fmt(z) + " SE";
  }
  return {pass, detail};
}

Outcome block_consistency() {
  double worst_block = 0, worst_sum = 0;
  for (ModelKind k : kKinds) {
    const Reference& r = reference(k);
    HvpEngine eng(r.model.objective, r.model.params, r.diagnostic.batch());
    const DenseHessian full = dense_hessian(full_hvp(r.model.objective, r.model.params, r.diagnostic.batch()));
    double sum = 0;
    auto blocks = r.model.registry.groups();
    blocks.emplace_back(kOtherGroup, r.model.registry.other(r.model.params.size()));
    for (const auto& [name, idx] : blocks) {
      const DenseHessian g = dense_hessian(group_restricted_hvp(eng, idx));
      for (std::size_t a = 0; a < idx.size(); ++a)
        for (std::size_t b = 0; b < idx.size(); ++b)
          worst_block = std::max(worst_block, std::abs(g.matrix(a, b) - full.matrix(idx[a], idx[b])));
      sum += g.matrix.trace();
    }
    const double tr = full.matrix.trace();
    worst_sum = std::max(worst_sum, std::abs(sum - tr) / std::max(std::abs(tr), 1e-300));
  }
  return {worst_block <= kBlockTol && worst_sum <= kTraceSumTol,
          "max block deviation " + fmt(worst_block) + ", trace sum rel error " + fmt(worst_sum)};
}

Outcome engineered() {
  const auto batch = placeholder_batch(1);
  const FragileSpec fs_;
  const Model f = fragile_model(fs_);
  const auto rows = curvature_table(f, batch, {fs_.fragile_group, fs_.control_group}, EstimatorConfig{});
  bool labels = rows[0].label == CurvatureLabel::kConcaveFragile && rows[1].label == CurvatureLabel::kConvexStable;
  bool sweeps = true;
  for (double alpha : kDefaultAlphas) {
    if (alpha < 0.01) continue;
    PerturbationSpec s{fs_.fragile_group, {alpha}, 8, 5};
    const auto a = summarize(sweep(f.objective, f.params, f.registry.indices(fs_.fragile_group), batch, s)).front();
    s.group = fs_.control_group;
    const auto b = summarize(sweep(f.objective, f.params, f.registry.indices(fs_.control_group), batch, s)).front();
    sweeps = sweeps && a.diverged < a.trials && a.mean_loss_delta > b.mean_loss_delta;
  }

  const Model c = coupled_model();
  Dataset d;
  d.examples = placeholder_batch(4);
  InterventionConfig ic;
  ic.target_group = "source_attention";
  ic.lr_scale = 0.1;
  ic.retrain.epochs = 20;
  ic.retrain.learning_rate = 0.05;
  ic.retrain.batch_size = 4;
  const auto rep = run_intervention(c, d, group_selection(c, c.registry.names()), batch, {}, ic);
  const bool reduced = rep.complete && rep.coupling_after && std::abs(*rep.coupling_after) < std::abs(rep.coupling_before);
  return {labels && sweeps && reduced,
          std::string("labels ") + (labels ? "ok" : "wrong") + ", sweeps " + (sweeps ? "ok" : "wrong") +
              ", coupling " + fmt(rep.coupling_before) + " -> " + (rep.coupling_after ? fmt(*rep.coupling_after) : "n/a")};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "hessdiag_acceptance";
  fs::remove_all(root);
  int differing = 0, files = 0;
  for (ModelKind k : kKinds) {
    const RunConfig c = default_run_config(k);
    std::ostringstream log;
    const fs::path a = root / (to_string(k) + "_a"), b = root / (to_string(k) + "_b");
    run_all(c, log, a);
    run_all(c, log, b);
    for (const auto& f : payload_files()) {
      ++files;
      if (read_text(a / f) != read_text(b / f)) ++differing;
    }
  }
  fs::remove_all(root);
  return {differing == 0, std::to_string(files) + " payload files compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"gradient correctness", gradients},
      {"hvp correctness", hvps},
      {"lanczos accuracy", lanczos_accuracy},
      {"hutchinson accuracy", hutchinson_accuracy},
      {"curvature table fixture", table_fixture},
      {"perturbation law", perturbation_law},
      {"group-block consistency", block_consistency},
      {"engineered fragile and coupled instances", engineered},
      {"end-to-end determinism", determinism},
  };
  int failed = 0, n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << name << ": " << o.detail << " [" << fmt(secs)
              << " s]" << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
