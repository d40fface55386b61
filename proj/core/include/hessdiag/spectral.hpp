#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hessdiag/linalg.hpp"
#include "hessdiag/objective.hpp"

namespace hessdiag {

// Symmetric linear operator given only through products. Invocations must
// not depend on call order.
struct HvpClosure {
  std::size_t dim = 0;
  std::function<FlatVector(std::span<const double>)> apply;

  FlatVector operator()(std::span<const double> v) const { return apply(v); }
};

HvpClosure matrix_operator(DenseMatrix matrix);

// Full Hessian operator of `objective` at `params` on `batch`.
HvpClosure full_hvp(const Objective& objective, std::span<const double> params, Batch batch);

// P H P^T restricted to `group` coordinates: the Hessian block of one group.
HvpClosure group_restricted_hvp(const Objective& objective, std::span<const double> params,
                                Batch batch, const IndexSet& group);

// Same as above but on top of an existing engine, which must outlive the closure.
HvpClosure group_restricted_hvp(HvpEngine& engine, const IndexSet& group);

struct TraceEstimate {
  double trace = 0.0;
  double standard_error = 0.0;  // sample standard error; 0 when probes == 1
  int probes = 0;
};

// Hutchinson estimator with Rademacher probes; probe i depends only on (seed, i).
TraceEstimate hutchinson_trace(const HvpClosure& op, int probes, std::uint64_t seed);

struct LanczosResult {
  double eig_min = 0.0;
  double eig_max = 0.0;
  int iterations = 0;
  int restarts = 0;
  bool converged = false;
};

inline constexpr double kDefaultLanczosTol = 1e-8;
inline constexpr int kDefaultLanczosIters = 200;
inline constexpr int kDefaultHutchinsonProbes = 1024;

// Lanczos with full reorthogonalization from a seeded random unit vector.
// Converged once both extreme Ritz values move by at most tol and both Ritz
// residuals are at most tol, each relative to the largest Ritz magnitude.
// A Krylov breakdown restarts from a fresh orthogonal direction; stops early
// when the space is exhausted, else at max_iters with converged == false.
LanczosResult lanczos_extreme(const HvpClosure& op, int max_iters, double tol, std::uint64_t seed);

inline constexpr std::size_t kDenseDimLimit = 2000;

struct DenseHessian {
  DenseMatrix matrix;      // symmetrized (M + M^T) / 2
  double asymmetry = 0.0;  // max |M_ij - M_ji| before symmetrizing
  double scale = 0.0;      // max |M_ij|
};

// Column j is op(e_j). Throws DimensionError above kDenseDimLimit.
DenseHessian dense_hessian(const HvpClosure& op);

// All eigenvalues ascending. Rejects inputs whose asymmetry exceeds
// symmetry_tol * max|a_ij|.
std::vector<double> exact_spectrum(const DenseMatrix& matrix, double symmetry_tol = 1e-8);

struct SpectralReport {
  std::string group;
  std::size_t dim = 0;
  std::string mode;  // "stochastic" or "dense"
  double trace = 0.0;
  double trace_stderr = 0.0;
  double eig_min = 0.0;
  double eig_max = 0.0;
  int probes_used = 0;
  int lanczos_iters = 0;
  bool lanczos_converged = true;
  std::uint64_t probe_seed = 0;
  std::uint64_t lanczos_seed = 0;
  std::optional<std::vector<double>> spectrum;  // full spectrum when the dense oracle ran
};

// One parameter or group in an interaction analysis.
struct Selection {
  std::string label;
  std::string group;
  IndexSet indices;
};

enum class CouplingMode { kRaw, kNormalized };

inline constexpr double kCouplingEpsilon = 1e-12;

struct InteractionMatrix {
  std::vector<std::string> labels;
  std::vector<std::string> groups;
  DenseMatrix raw;
  DenseMatrix normalized;  // diagonal holds NaN as the undefined sentinel
  CouplingMode mode = CouplingMode::kNormalized;

  const DenseMatrix& primary() const noexcept { return mode == CouplingMode::kRaw ? raw : normalized; }
};

// Builds the dense Hessian on the union of `selection` and aggregates blocks:
// raw[i][j] is the signed largest-magnitude entry of block (i, j), which for
// singletons is the Hessian entry itself.
InteractionMatrix interaction_matrix(const Objective& objective, std::span<const double> params,
                                     Batch batch, const std::vector<Selection>& selection,
                                     CouplingMode mode = CouplingMode::kNormalized);

// Aggregation step on an already-computed dense Hessian of the union, whose
// row/column order is the concatenation of the selection index sets.
InteractionMatrix aggregate_interactions(const DenseMatrix& union_hessian,
                                         const std::vector<Selection>& selection,
                                         CouplingMode mode);

}  // namespace hessdiag
