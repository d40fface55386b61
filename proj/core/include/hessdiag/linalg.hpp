#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace hessdiag {

// Row-major dense matrix, sized for the dense-Hessian oracle.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static DenseMatrix identity(std::size_t n);
  static DenseMatrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> row(std::size_t r) const noexcept {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  double trace() const;
  double max_abs() const noexcept;
  DenseMatrix transposed() const;
  std::vector<double> multiply(std::span<const double> v) const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Largest |a_ij - a_ji|.
double max_asymmetry(const DenseMatrix& a);

// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
// off-diagonal `off` (off[i] couples i and i+1), by implicit QL with Wilkinson
// shifts. Ascending.
std::vector<double> tridiagonal_eigenvalues(std::vector<double> diag, std::vector<double> off);

// Unit eigenvector of the same tridiagonal matrix for an (accurate)
// eigenvalue, by inverse iteration.
std::vector<double> tridiagonal_eigenvector(const std::vector<double>& diag, const std::vector<double>& off,
                                            double lambda);

// Householder reduction to tridiagonal form followed by implicit QL. Reads
// only the lower triangle. Ascending.
std::vector<double> symmetric_eigenvalues(const DenseMatrix& a);

}  // namespace hessdiag
