#include "hessdiag/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hessdiag/error.hpp"

namespace hessdiag {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                     std::to_string(data_.size()) + " values");
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> diag) {
  DenseMatrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

double DenseMatrix::trace() const {
  if (!square()) throw ShapeError("trace of a non-square matrix");
  double t = 0.0;
  for (std::size_t i = 0; i < rows_; ++i) t += (*this)(i, i);
  return t;
}

double DenseMatrix::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

std::vector<double> DenseMatrix::multiply(std::span<const double> v) const {
  if (v.size() != cols_) throw DimensionError("matrix-vector dimension mismatch");
  std::vector<double> out(rows_, 0.0);
  for (std::size_t i = 0; i < rows_; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols_; ++j) s += (*this)(i, j) * v[j];
    out[i] = s;
  }
  return out;
}

double max_asymmetry(const DenseMatrix& a) {
  if (!a.square()) throw ShapeError("asymmetry of a non-square matrix");
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j) m = std::max(m, std::abs(a(i, j) - a(j, i)));
  return m;
}

std::vector<double> tridiagonal_eigenvalues(std::vector<double> d, std::vector<double> off) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(d.size());
  if (n == 0) return {};
  if (off.size() + 1 != d.size() && !(off.size() == d.size())) {
    throw ShapeError("tridiagonal: off-diagonal length must be n-1");
  }
  // e[i] couples i and i+1; e[n-1] is scratch
  std::vector<double> e(static_cast<std::size_t>(n), 0.0);
  for (std::ptrdiff_t i = 0; i + 1 < n; ++i) e[i] = off[i];

  constexpr double kEps = std::numeric_limits<double>::epsilon();
  for (std::ptrdiff_t l = 0; l < n; ++l) {
    int iter = 0;
    std::ptrdiff_t m = l;
    do {
      for (m = l; m < n - 1; ++m) {
        const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= kEps * dd) break;
      }
      if (m != l) {
        if (++iter > 60) throw Error("tridiagonal QL failed to converge");
        double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
        double r = std::hypot(g, 1.0);
        g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        std::ptrdiff_t i = m - 1;
        bool deflated = false;
        for (; i >= l; --i) {
          const double f = s * e[i];
          const double b = c * e[i];
          r = std::hypot(f, g);
          e[i + 1] = r;
          if (r == 0.0) {
            d[i + 1] -= p;
            e[m] = 0.0;
            deflated = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = d[i + 1] - p;
          r = (d[i] - g) * s + 2.0 * c * b;
          p = s * r;
          d[i + 1] = g + p;
          g = c * r - b;
        }
        if (deflated) continue;
        d[l] -= p;
        e[l] = g;
        e[m] = 0.0;
      }
    } while (m != l);
  }
  std::sort(d.begin(), d.end());
  return d;
}

std::vector<double> symmetric_eigenvalues(const DenseMatrix& input) {
  if (!input.square()) throw ShapeError("eigenvalues of a non-square matrix");
  const std::size_t n = input.rows();
  if (n == 0) return {};
  if (n == 1) return {input(0, 0)};

  // Householder tridiagonalization on a working copy (lower triangle).
  DenseMatrix a = input;
  std::vector<double> d(n, 0.0), e(n, 0.0);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t l = i - 1;
    double h = 0.0;
    if (l > 0) {
      double scale = 0.0;
      for (std::size_t k = 0; k <= l; ++k) scale += std::abs(a(i, k));
      if (scale == 0.0) {
        e[i] = a(i, l);
      } else {
        for (std::size_t k = 0; k <= l; ++k) {
          a(i, k) /= scale;
          h += a(i, k) * a(i, k);
        }
        double f = a(i, l);
        const double g0 = f >= 0.0 ? -std::sqrt(h) : std::sqrt(h);
        e[i] = scale * g0;
        h -= f * g0;
        a(i, l) = f - g0;
        f = 0.0;
        for (std::size_t j = 0; j <= l; ++j) {
          double g = 0.0;
          for (std::size_t k = 0; k <= j; ++k) g += a(j, k) * a(i, k);
          for (std::size_t k = j + 1; k <= l; ++k) g += a(k, j) * a(i, k);
          e[j] = g / h;
          f += e[j] * a(i, j);
        }
        const double hh = f / (h + h);
        for (std::size_t j = 0; j <= l; ++j) {
          f = a(i, j);
          const double g = e[j] - hh * f;
          e[j] = g;
          for (std::size_t k = 0; k <= j; ++k) a(j, k) -= (f * e[k] + g * a(i, k));
        }
      }
    } else {
      e[i] = a(i, l);
    }
    d[i] = h;
  }
  for (std::size_t i = 0; i < n; ++i) d[i] = a(i, i);
  // e[i] couples i-1 and i; shift to the tridiagonal_eigenvalues convention
  std::vector<double> off(n - 1);
  for (std::size_t i = 1; i < n; ++i) off[i - 1] = e[i];
  return tridiagonal_eigenvalues(std::move(d), std::move(off));
}

std::vector<double> tridiagonal_eigenvector(const std::vector<double>& diag, const std::vector<double>& off,
                                            double lambda) {
  const std::size_t n = diag.size();
  if (n == 0) return {};
  if (off.size() + 1 != n) throw ShapeError("tridiagonal: off-diagonal length must be n-1");
  if (n == 1) return {1.0};

  double scale = 0.0;
  for (double x : diag) scale = std::max(scale, std::abs(x));
  for (double x : off) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) scale = 1.0;
  // nudge the shift so T - sigma I is not exactly singular
  const double sigma = lambda + 64.0 * std::numeric_limits<double>::epsilon() * scale;
  const double tiny = std::numeric_limits<double>::epsilon() * scale;

  // Gaussian elimination with partial pivoting on the band: rows hold
  // (main, upper1, upper2) after elimination, lower multipliers kept apart.
  std::vector<double> a0(n), a1(n, 0.0), a2(n, 0.0), mult(n, 0.0);
  std::vector<char> swapped(n, 0);
  std::vector<double> lo(n, 0.0);  // sub-diagonal of the working row below
  for (std::size_t i = 0; i < n; ++i) {
    a0[i] = diag[i] - sigma;
    if (i + 1 < n) {
      a1[i] = off[i];
      lo[i] = off[i];
    }
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    // candidate rows: i (a0[i], a1[i], a2[i]) and i+1 (lo[i], a0[i+1], a1[i+1])
    if (std::abs(lo[i]) > std::abs(a0[i])) {
      swapped[i] = 1;
      const double r0 = a0[i], r1 = a1[i], r2 = a2[i];
      a0[i] = lo[i];
      a1[i] = a0[i + 1];
      a2[i] = a1[i + 1];
      lo[i] = r0;
      a0[i + 1] = r1;
      a1[i + 1] = r2;
    }
    if (a0[i] == 0.0) a0[i] = tiny;
    const double f = lo[i] / a0[i];
    mult[i] = f;
    a0[i + 1] -= f * a1[i];
    a1[i + 1] -= f * a2[i];
  }
  if (a0[n - 1] == 0.0) a0[n - 1] = tiny;

  std::vector<double> x(n, 1.0);
  for (int sweep = 0; sweep < 3; ++sweep) {
    // forward: apply the row operations to the right-hand side
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (swapped[i]) std::swap(x[i], x[i + 1]);
      x[i + 1] -= mult[i] * x[i];
    }
    for (std::size_t k = n; k-- > 0;) {
      double v = x[k];
      if (k + 1 < n) v -= a1[k] * x[k + 1];
      if (k + 2 < n) v -= a2[k] * x[k + 2];
      x[k] = v / a0[k];
    }
    double len = 0.0;
    for (double v : x) len += v * v;
    len = std::sqrt(len);
    if (!(len > 0.0) || !std::isfinite(len)) break;
    for (double& v : x) v /= len;
  }
  return x;
}

}  // namespace hessdiag
