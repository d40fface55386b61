#include "hessdiag/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string(what) + ": operator returned a non-finite value");
  }
}

void validate_indices(const IndexSet& group, std::size_t dim) {
  if (group.empty()) throw DimensionError("group index set is empty");
  std::unordered_set<std::size_t> seen;
  seen.reserve(group.size());
  for (std::size_t i : group) {
    if (i >= dim) {
      throw DimensionError("index " + std::to_string(i) + " out of range for dim " + std::to_string(dim));
    }
    if (!seen.insert(i).second) throw DimensionError("index " + std::to_string(i) + " repeated in group");
  }
}

HvpClosure restrict_engine(std::shared_ptr<HvpEngine> owner, HvpEngine* engine, IndexSet group) {
  validate_indices(group, engine->dim());
  const std::size_t k = group.size();
  auto indices = std::make_shared<const IndexSet>(std::move(group));
  return HvpClosure{k, [owner = std::move(owner), engine, indices](std::span<const double> v) {
                      if (v.size() != indices->size()) {
                        throw DimensionError("restricted hvp: direction has dim " + std::to_string(v.size()) +
                                             ", expected " + std::to_string(indices->size()));
                      }
                      FlatVector full(engine->dim(), 0.0);
                      for (std::size_t i = 0; i < indices->size(); ++i) full[(*indices)[i]] = v[i];
                      const FlatVector hv = engine->apply(full);
                      FlatVector out(indices->size());
                      for (std::size_t i = 0; i < indices->size(); ++i) out[i] = hv[(*indices)[i]];
                      return out;
                    }};
}

}  // namespace

HvpClosure matrix_operator(DenseMatrix matrix) {
  if (!matrix.square()) throw ShapeError("operator matrix must be square");
  auto m = std::make_shared<const DenseMatrix>(std::move(matrix));
  return HvpClosure{m->rows(), [m](std::span<const double> v) { return m->multiply(v); }};
}

HvpClosure full_hvp(const Objective& objective, std::span<const double> params, Batch batch) {
  auto engine = std::make_shared<HvpEngine>(objective, params, batch);
  const std::size_t n = engine->dim();
  return HvpClosure{n, [engine](std::span<const double> v) { return engine->apply(v); }};
}

HvpClosure group_restricted_hvp(const Objective& objective, std::span<const double> params,
                                Batch batch, const IndexSet& group) {
  auto engine = std::make_shared<HvpEngine>(objective, params, batch);
  HvpEngine* raw = engine.get();
  return restrict_engine(std::move(engine), raw, group);
}

HvpClosure group_restricted_hvp(HvpEngine& engine, const IndexSet& group) {
  return restrict_engine(nullptr, &engine, group);
}

TraceEstimate hutchinson_trace(const HvpClosure& op, int probes, std::uint64_t seed) {
  if (probes < 1) throw ConfigError("hutchinson_trace needs at least one probe");
  const std::size_t n = op.dim;
  std::vector<double> samples(static_cast<std::size_t>(probes));
  FlatVector v(n);
  for (int i = 0; i < probes; ++i) {
    const std::uint64_t key = rng::derive(seed, static_cast<std::uint64_t>(i));
    for (std::size_t j = 0; j < n; ++j) v[j] = rng::rademacher(key, j);
    const FlatVector av = op(v);
    require_finite(av, "hutchinson_trace");
    samples[static_cast<std::size_t>(i)] = dot(v, av);
  }
  double sum = 0.0;
  for (double s : samples) sum += s;
  const double mean = sum / probes;
  double se = 0.0;
  if (probes > 1) {
    double ss = 0.0;
    for (double s : samples) ss += (s - mean) * (s - mean);
    se = std::sqrt(ss / (probes - 1) / probes);
  }
  return TraceEstimate{mean, se, probes};
}

LanczosResult lanczos_extreme(const HvpClosure& op, int max_iters, double tol, std::uint64_t seed) {
  const std::size_t n = op.dim;
  if (max_iters < 2) throw ConfigError("lanczos_extreme needs max_iters >= 2");
  if (n < 2) throw DimensionError("lanczos_extreme needs an operator of dim >= 2");

  std::vector<FlatVector> basis;
  std::vector<double> alpha, beta;
  LanczosResult result;

  auto orthogonalize = [&](FlatVector& w) {
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        const double c = dot(w, q);
        for (std::size_t i = 0; i < n; ++i) w[i] -= c * q[i];
      }
    }
  };
  // Fresh seeded unit vector orthogonal to the current basis; empty when the
  // basis already spans everything.
  auto fresh_start = [&](std::uint64_t stream) -> FlatVector {
    FlatVector q(n);
    for (int attempt = 0; attempt < 4; ++attempt) {
      const std::uint64_t key = rng::derive(seed, stream, static_cast<std::uint64_t>(attempt));
      for (std::size_t i = 0; i < n; ++i) q[i] = rng::normal(key, i);
      orthogonalize(q);
      const double len = norm(q);
      if (len > 1e-8) {
        for (double& x : q) x /= len;
        return q;
      }
    }
    return {};
  };

  const double residual_tol = tol;
  basis.push_back(fresh_start(0));
  double prev_min = std::numeric_limits<double>::quiet_NaN();
  double prev_max = prev_min;

  for (int k = 0; k < max_iters; ++k) {
    const FlatVector& q = basis.back();
    FlatVector w = op(q);
    require_finite(w, "lanczos_extreme");
    const double a = dot(w, q);
    alpha.push_back(a);
    orthogonalize(w);

    const auto ritz = tridiagonal_eigenvalues(alpha, beta);
    const double lo = ritz.front();
    const double hi = ritz.back();
    result.eig_min = lo;
    result.eig_max = hi;
    result.iterations = k + 1;

    if (basis.size() == n) {
      result.converged = true;  // Krylov space is the whole space
      break;
    }
    const double b = norm(w);
    const double scale = std::max(std::abs(lo), std::abs(hi));
    // ||A x - theta x|| for a Ritz pair is |b * y_last|
    auto residual = [&](double theta) { return b * std::abs(tridiagonal_eigenvector(alpha, beta, theta).back()); };
    const bool breakdown = b <= 1e-12 * std::max(scale, std::numeric_limits<double>::min());
    if (!breakdown && k > 0 && std::abs(lo - prev_min) <= tol * scale && std::abs(hi - prev_max) <= tol * scale &&
        residual(lo) <= residual_tol * scale && residual(hi) <= residual_tol * scale) {
      result.converged = true;
      break;
    }
    prev_min = lo;
    prev_max = hi;

    if (breakdown) {
      // invariant subspace: restart orthogonally, decoupled block in T
      FlatVector next = fresh_start(static_cast<std::uint64_t>(k + 1));
      if (next.empty()) {
        result.converged = true;
        break;
      }
      ++result.restarts;
      beta.push_back(0.0);
      basis.push_back(std::move(next));
    } else {
      beta.push_back(b);
      for (double& x : w) x /= b;
      basis.push_back(std::move(w));
    }
  }
  return result;
}

DenseHessian dense_hessian(const HvpClosure& op) {
  const std::size_t n = op.dim;
  if (n > kDenseDimLimit) {
    throw DimensionError("dense_hessian: dim " + std::to_string(n) + " exceeds limit " +
                         std::to_string(kDenseDimLimit));
  }
  DenseMatrix m(n, n);
  FlatVector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const FlatVector col = op(e);
    require_finite(col, "dense_hessian");
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) m(i, j) = col[i];
  }
  DenseHessian out;
  out.asymmetry = max_asymmetry(m);
  out.scale = m.max_abs();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double avg = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = avg;
      m(j, i) = avg;
    }
  }
  out.matrix = std::move(m);
  return out;
}

std::vector<double> exact_spectrum(const DenseMatrix& matrix, double symmetry_tol) {
  if (!matrix.square()) throw ShapeError("exact_spectrum: matrix must be square");
  if (matrix.rows() > kDenseDimLimit) {
    throw DimensionError("exact_spectrum: dim " + std::to_string(matrix.rows()) + " exceeds limit");
  }
  const double asym = max_asymmetry(matrix);
  if (asym > symmetry_tol * matrix.max_abs()) {
    throw Error("exact_spectrum: matrix is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
  return symmetric_eigenvalues(matrix);
}

InteractionMatrix aggregate_interactions(const DenseMatrix& h, const std::vector<Selection>& selection,
                                         CouplingMode mode) {
  const std::size_t k = selection.size();
  std::vector<std::size_t> offsets(k + 1, 0);
  for (std::size_t i = 0; i < k; ++i) offsets[i + 1] = offsets[i] + selection[i].indices.size();
  if (h.rows() != offsets[k] || h.cols() != offsets[k]) {
    throw DimensionError("aggregate_interactions: Hessian size does not match selection");
  }

  InteractionMatrix out;
  out.mode = mode;
  out.raw = DenseMatrix(k, k);
  out.normalized = DenseMatrix(k, k);
  for (const auto& s : selection) {
    out.labels.push_back(s.label);
    out.groups.push_back(s.group);
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double best = 0.0;
      for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r) {
        for (std::size_t c = offsets[j]; c < offsets[j + 1]; ++c) {
          const double v = h(r, c);
          // ties on magnitude resolve to the larger signed value, keeping raw symmetric
          if (std::abs(v) > std::abs(best) || (std::abs(v) == std::abs(best) && v > best)) best = v;
        }
      }
      out.raw(i, j) = best;
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) {
        out.normalized(i, j) = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const double denom = std::sqrt(std::abs(out.raw(i, i)) * std::abs(out.raw(j, j)) + kCouplingEpsilon);
      out.normalized(i, j) = std::clamp(out.raw(i, j) / denom, -1.0, 1.0);
    }
  }
  return out;
}

InteractionMatrix interaction_matrix(const Objective& objective, std::span<const double> params,
                                     Batch batch, const std::vector<Selection>& selection,
                                     CouplingMode mode) {
  if (selection.empty()) throw ConfigError("interaction_matrix: empty selection");
  IndexSet all;
  std::unordered_set<std::size_t> seen;
  for (const auto& s : selection) {
    if (s.indices.empty()) throw ConfigError("interaction_matrix: selection '" + s.label + "' is empty");
    for (std::size_t i : s.indices) {
      if (!seen.insert(i).second) {
        throw ConfigError("interaction_matrix: selections overlap at parameter " + std::to_string(i) +
                          " ('" + s.label + "')");
      }
      all.push_back(i);
    }
  }
  if (all.size() > kDenseDimLimit) {
    throw DimensionError("interaction_matrix: combined dim " + std::to_string(all.size()) + " exceeds limit");
  }
  const HvpClosure op = group_restricted_hvp(objective, params, batch, all);
  return aggregate_interactions(dense_hessian(op).matrix, selection, mode);
}

}  // namespace hessdiag
