#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgp/errors.hpp"

namespace dgp {

/// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  [[nodiscard]] double* data() noexcept { return data_.data(); }
  [[nodiscard]] const double* data() const noexcept { return data_.data(); }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }
  [[nodiscard]] std::vector<double>& values() noexcept { return data_; }

  [[nodiscard]] DenseMatrix transposed() const;
  [[nodiscard]] std::vector<double> column(std::size_t c) const;
  void set_column(std::size_t c, std::span<const double> v);
  /// Rows [first, first + count).
  [[nodiscard]] DenseMatrix row_block(std::size_t first, std::size_t count) const;
  /// Columns [first, first + count).
  [[nodiscard]] DenseMatrix col_block(std::size_t first, std::size_t count) const;

  /// Throws if any entry is NaN or infinite.
  void require_finite(const char* what) const;
  [[nodiscard]] bool all_finite() const noexcept;

  DenseMatrix& operator+=(const DenseMatrix& o);
  DenseMatrix& operator-=(const DenseMatrix& o);
  DenseMatrix& operator*=(double s) noexcept;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(DenseMatrix a, double s);

/// a * b
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
/// a^T * b
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
/// a * b^T
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);

double frobenius_norm(const DenseMatrix& m);
double max_abs(const DenseMatrix& m);
/// max |a - b| over all entries; shapes must match.
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
/// max |m^T m - I|
double orthonormality_residual(const DenseMatrix& m);

struct SvdFactorization {
  DenseMatrix u;              // rows x k, orthonormal columns
  std::vector<double> sigma;  // descending, >= 0
  DenseMatrix vt;             // k x cols, orthonormal rows

  [[nodiscard]] DenseMatrix v() const { return vt.transposed(); }
  [[nodiscard]] DenseMatrix reconstruct() const;
};

/// Thin SVD by one-sided Jacobi rotations, k = min(rows, cols).
///
/// Matrices with rows > 4 * cols go through the Gram matrix M^T M; in that
/// route singular values below 1e-7 * sigma_max are reported as zero, since
/// squaring the spectrum loses those digits.
///
/// Sign convention: the first entry of largest magnitude in each right
/// singular vector is nonnegative. Equal singular values are ordered by the
/// position of that entry.
SvdFactorization svd(const DenseMatrix& m);

/// Smallest k with sum_{i<k} sigma_i^2 >= alpha * sum_i sigma_i^2.
/// alpha == 1 returns the number of positive entries.
std::size_t rank_select(std::span<const double> sigma, double alpha);

/// Orthonormal set of column vectors in R^dim.
class OrthonormalBasis {
 public:
  OrthonormalBasis() = default;
  explicit OrthonormalBasis(std::size_t dim) : dim_(dim), vectors_(dim, 0) {}
  /// Takes the columns as-is; call check() to validate orthonormality.
  OrthonormalBasis(std::size_t dim, DenseMatrix vectors);

  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] std::size_t count() const noexcept { return vectors_.cols(); }
  [[nodiscard]] bool empty() const noexcept { return vectors_.cols() == 0; }
  [[nodiscard]] const DenseMatrix& vectors() const noexcept { return vectors_; }

  [[nodiscard]] double residual() const { return orthonormality_residual(vectors_); }
  /// Throws NumericalError if residual exceeds tol or count exceeds dim.
  void check(double tol = 1e-8) const;

 private:
  std::size_t dim_ = 0;
  DenseMatrix vectors_;
};

/// m - B (B^T m): removes the components of every column of m along the basis.
DenseMatrix project_out(const DenseMatrix& m, const OrthonormalBasis& basis);

/// Appends new_vectors (columns) with modified Gram-Schmidt, run twice.
/// Columns whose residual norm falls below drop_tol are skipped, and the
/// result never exceeds dim columns.
OrthonormalBasis orthonormalize_append(const OrthonormalBasis& basis, const DenseMatrix& new_vectors,
                                       double drop_tol = 1e-10);

}  // namespace dgp
