#include "dgp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace dgp {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

ConstMap as_eigen(const DenseMatrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }
Map as_eigen(DenseMatrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

std::string shape_str(const DenseMatrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  require_finite("DenseMatrix");
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("DenseMatrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
  require_finite("DenseMatrix");
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

std::vector<double> DenseMatrix::column(std::size_t c) const {
  std::vector<double> v(rows_);
  for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
  return v;
}

void DenseMatrix::set_column(std::size_t c, std::span<const double> v) {
  if (v.size() != rows_) throw ShapeError("set_column: length mismatch");
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

DenseMatrix DenseMatrix::row_block(std::size_t first, std::size_t count) const {
  if (first + count > rows_) throw ShapeError("row_block: out of range");
  DenseMatrix out(count, cols_);
  std::copy(data_.begin() + long(first * cols_), data_.begin() + long((first + count) * cols_), out.data_.begin());
  return out;
}

DenseMatrix DenseMatrix::col_block(std::size_t first, std::size_t count) const {
  if (first + count > cols_) throw ShapeError("col_block: out of range");
  DenseMatrix out(rows_, count);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = (*this)(r, first + c);
  return out;
}

bool DenseMatrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void DenseMatrix::require_finite(const char* what) const {
  if (!all_finite()) throw NumericalError(std::string(what) + ": non-finite entry in " + shape_str(*this) + " matrix");
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& o) {
  require_same_shape(*this, o, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& o) {
  require_same_shape(*this, o, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) noexcept {
  for (auto& x : data_) x *= s;
  return *this;
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  DenseMatrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  as_eigen(out).noalias() = as_eigen(a) * as_eigen(b);
  return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
  DenseMatrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  as_eigen(out).noalias() = as_eigen(a).transpose() * as_eigen(b);
  return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
  DenseMatrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  as_eigen(out).noalias() = as_eigen(a) * as_eigen(b).transpose();
  return out;
}

double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : m.values()) s += x * x;
  return std::sqrt(s);
}

double max_abs(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : m.values()) s = std::max(s, std::abs(x));
  return s;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a.values()[i] - b.values()[i]));
  return s;
}

double orthonormality_residual(const DenseMatrix& m) {
  if (m.cols() == 0) return 0.0;
  DenseMatrix g = matmul_tn(m, m);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return max_abs(g);
}

DenseMatrix SvdFactorization::reconstruct() const {
  DenseMatrix us = u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t c = 0; c < us.cols(); ++c) us(r, c) *= sigma[c];
  return matmul(us, vt);
}

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kJacobiTol = 1e-12;
constexpr double kGramZeroRel = 1e-7;

// Column-major scratch so that rotations touch contiguous memory.
struct Columns {
  std::size_t rows = 0;
  std::vector<std::vector<double>> cols;

  explicit Columns(const DenseMatrix& m) : rows(m.rows()), cols(m.cols(), std::vector<double>(m.rows())) {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) cols[c][r] = m(r, c);
  }
  Columns(std::size_t n_rows, std::size_t n_cols) : rows(n_rows), cols(n_cols, std::vector<double>(n_rows, 0.0)) {}
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate(std::vector<double>& a, std::vector<double>& b, double c, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// One-sided Jacobi: rotates columns of `a` until mutually orthogonal,
// accumulating the rotations in `v` (square, cols x cols).
void one_sided_jacobi(Columns& a, Columns& v, std::size_t rows, std::size_t cols) {
  // columns below this squared norm are rounding noise; rotating them never settles
  double total = 0.0;
  for (std::size_t j = 0; j < cols; ++j) total += dot(a.cols[j], a.cols[j]);
  const double negligible = total * 2.220446049250313e-16 * 2.220446049250313e-16;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        const double alpha = dot(a.cols[p], a.cols[p]);
        const double beta = dot(a.cols[q], a.cols[q]);
        const double gamma = dot(a.cols[p], a.cols[q]);
        if (alpha <= negligible || beta <= negligible) continue;
        if (std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(a.cols[p], a.cols[q], c, s);
        rotate(v.cols[p], v.cols[q], c, s);
      }
    }
    if (!rotated) return;
  }
  std::ostringstream os;
  os << "svd: one-sided Jacobi did not converge within " << kMaxSweeps << " sweeps on a " << rows << "x" << cols
     << " matrix";
  throw NumericalError(os.str());
}

// Fills zero columns of u (flagged in `filled`) with unit vectors orthogonal to the rest.
void complete_orthonormal(std::vector<std::vector<double>>& u, std::vector<bool>& filled) {
  const std::size_t n = u.empty() ? 0 : u.front().size();
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (filled[j]) continue;
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < n; ++e) {
      std::vector<double> cand(n, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < u.size(); ++k) {
          if (!filled[k]) continue;
          const double d = dot(cand, u[k]);
          for (std::size_t i = 0; i < n; ++i) cand[i] -= d * u[k][i];
        }
      const double nrm = std::sqrt(dot(cand, cand));
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
      }
      if (best_norm > 0.7) break;
    }
    for (auto& x : best) x /= best_norm;
    u[j] = std::move(best);
    filled[j] = true;
  }
}

void orthonormalize_in_place(std::vector<std::vector<double>>& u, std::vector<bool>& filled) {
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (!filled[j]) continue;
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        if (!filled[k]) continue;
        const double d = dot(u[j], u[k]);
        for (std::size_t i = 0; i < u[j].size(); ++i) u[j][i] -= d * u[k][i];
      }
    const double nrm = std::sqrt(dot(u[j], u[j]));
    if (nrm < 0.5) {
      filled[j] = false;
      continue;
    }
    for (auto& x : u[j]) x /= nrm;
  }
}

// Factorization of a matrix with rows >= cols.
SvdFactorization svd_tall(const DenseMatrix& m) {
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  const bool gram_route = rows > 4 * cols;

  Columns v(cols, cols);
  for (std::size_t i = 0; i < cols; ++i) v.cols[i][i] = 1.0;

  std::vector<double> sigma(cols);
  std::vector<std::vector<double>> u(cols);
  std::vector<bool> filled(cols, false);

  if (gram_route) {
    Columns g(matmul_tn(m, m));
    one_sided_jacobi(g, v, rows, cols);
    // g's columns are now G v_j = lambda_j v_j.
    double smax = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      sigma[j] = std::sqrt(std::sqrt(dot(g.cols[j], g.cols[j])));
      smax = std::max(smax, sigma[j]);
    }
    for (std::size_t j = 0; j < cols; ++j) {
      if (sigma[j] <= kGramZeroRel * smax || sigma[j] == 0.0) {
        sigma[j] = 0.0;
        u[j].assign(rows, 0.0);
        continue;
      }
      u[j].assign(rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += m(r, c) * v.cols[j][c];
        u[j][r] = s / sigma[j];
      }
      filled[j] = true;
    }
  } else {
    Columns a(m);
    one_sided_jacobi(a, v, rows, cols);
    double smax = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      sigma[j] = std::sqrt(dot(a.cols[j], a.cols[j]));
      smax = std::max(smax, sigma[j]);
    }
    const double zero_tol = double(rows) * 2.220446049250313e-16 * smax;
    for (std::size_t j = 0; j < cols; ++j) {
      if (sigma[j] <= zero_tol || sigma[j] == 0.0) {
        sigma[j] = 0.0;
        u[j].assign(rows, 0.0);
        continue;
      }
      u[j] = a.cols[j];
      for (auto& x : u[j]) x /= sigma[j];
      filled[j] = true;
    }
  }

  // Sign convention on right singular vectors: first max-magnitude entry >= 0.
  std::vector<std::size_t> pivot(cols, 0);
  for (std::size_t j = 0; j < cols; ++j) {
    auto& vj = v.cols[j];
    std::size_t best = 0;
    for (std::size_t i = 1; i < cols; ++i)
      if (std::abs(vj[i]) > std::abs(vj[best])) best = i;
    pivot[j] = best;
    if (vj[best] < 0.0) {
      for (auto& x : vj) x = -x;
      for (auto& x : u[j]) x = -x;
    }
  }

  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sigma[a] != sigma[b]) return sigma[a] > sigma[b];
    return pivot[a] < pivot[b];
  });

  std::vector<std::vector<double>> u_sorted(cols);
  std::vector<bool> filled_sorted(cols);
  SvdFactorization out;
  out.sigma.resize(cols);
  out.vt = DenseMatrix(cols, cols);
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sigma[j];
    u_sorted[k] = std::move(u[j]);
    filled_sorted[k] = filled[j];
    for (std::size_t c = 0; c < cols; ++c) out.vt(k, c) = v.cols[j][c];
  }
  if (gram_route) orthonormalize_in_place(u_sorted, filled_sorted);
  for (std::size_t k = 0; k < cols; ++k)
    if (!filled_sorted[k]) out.sigma[k] = 0.0;
  complete_orthonormal(u_sorted, filled_sorted);

  out.u = DenseMatrix(rows, cols);
  for (std::size_t k = 0; k < cols; ++k) out.u.set_column(k, u_sorted[k]);
  return out;
}

}  // namespace

SvdFactorization svd(const DenseMatrix& m) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("svd: empty matrix " + shape_str(m));
  m.require_finite("svd");
  if (m.rows() >= m.cols()) return svd_tall(m);

  // Wide: factor the transpose and swap roles, then re-apply the sign
  // convention to the new right singular vectors.
  SvdFactorization t = svd_tall(m.transposed());
  SvdFactorization out;
  out.sigma = std::move(t.sigma);
  out.u = t.vt.transposed();
  out.vt = t.u.transposed();
  const std::size_t k = out.sigma.size();
  std::vector<std::size_t> pivot(k, 0);
  for (std::size_t j = 0; j < k; ++j) {
    auto row = out.vt.row(j);
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i)
      if (std::abs(row[i]) > std::abs(row[best])) best = i;
    pivot[j] = best;
    if (row[best] < 0.0) {
      for (auto& x : row) x = -x;
      for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, j) = -out.u(r, j);
    }
  }
  // Re-order ties by the new pivot positions.
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.sigma[a] != out.sigma[b]) return out.sigma[a] > out.sigma[b];
    return pivot[a] < pivot[b];
  });
  SvdFactorization sorted;
  sorted.sigma.resize(k);
  sorted.u = DenseMatrix(out.u.rows(), k);
  sorted.vt = DenseMatrix(k, out.vt.cols());
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t j = order[n];
    sorted.sigma[n] = out.sigma[j];
    for (std::size_t r = 0; r < out.u.rows(); ++r) sorted.u(r, n) = out.u(r, j);
    for (std::size_t c = 0; c < out.vt.cols(); ++c) sorted.vt(n, c) = out.vt(j, c);
  }
  return sorted;
}

std::size_t rank_select(std::span<const double> sigma, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("rank_select: alpha must lie in (0, 1]");
  double total = 0.0;
  std::size_t positive = 0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (sigma[i] < 0.0 || (i > 0 && sigma[i] > sigma[i - 1]))
      throw std::invalid_argument("rank_select: sigma must be nonnegative and descending");
    total += sigma[i] * sigma[i];
    if (sigma[i] > 0.0) ++positive;
  }
  if (positive == 0) throw NumericalError("rank_select: zero matrix has no informative subspace");
  if (alpha == 1.0) return positive;

  const double target = alpha * total;
  double acc = 0.0;
  for (std::size_t k = 0; k < sigma.size(); ++k) {
    acc += sigma[k] * sigma[k];
    if (acc >= target) return k + 1;
  }
  return positive;
}

OrthonormalBasis::OrthonormalBasis(std::size_t dim, DenseMatrix vectors) : dim_(dim), vectors_(std::move(vectors)) {
  if (vectors_.rows() != dim_) {
    throw ShapeError("OrthonormalBasis: vectors have " + std::to_string(vectors_.rows()) + " rows, expected " +
                     std::to_string(dim_));
  }
}

void OrthonormalBasis::check(double tol) const {
  if (count() > dim_) throw NumericalError("OrthonormalBasis: more vectors than ambient dimension");
  const double r = residual();
  if (r > tol) throw NumericalError("OrthonormalBasis: orthonormality residual " + std::to_string(r));
}

DenseMatrix project_out(const DenseMatrix& m, const OrthonormalBasis& basis) {
  if (m.rows() != basis.dim()) {
    throw ShapeError("project_out: matrix has " + std::to_string(m.rows()) + " rows but basis dimension is " +
                     std::to_string(basis.dim()));
  }
  if (basis.empty()) return m;
  const DenseMatrix& b = basis.vectors();
  return m - matmul(b, matmul_tn(b, m));
}

OrthonormalBasis orthonormalize_append(const OrthonormalBasis& basis, const DenseMatrix& new_vectors,
                                       double drop_tol) {
  if (new_vectors.rows() != basis.dim()) {
    throw ShapeError("orthonormalize_append: vectors have " + std::to_string(new_vectors.rows()) +
                     " rows, basis dimension is " + std::to_string(basis.dim()));
  }
  const std::size_t dim = basis.dim();
  std::vector<std::vector<double>> cols;
  cols.reserve(basis.count() + new_vectors.cols());
  for (std::size_t c = 0; c < basis.count(); ++c) cols.push_back(basis.vectors().column(c));

  for (std::size_t c = 0; c < new_vectors.cols() && cols.size() < dim; ++c) {
    std::vector<double> v = new_vectors.column(c);
    const double original = std::sqrt(dot(v, v));
    if (original == 0.0) continue;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : cols) {
        const double d = dot(v, b);
        for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
      }
    const double nrm = std::sqrt(dot(v, v));
    if (nrm < drop_tol * std::max(1.0, original)) continue;
    for (auto& x : v) x /= nrm;
    cols.push_back(std::move(v));
  }

  DenseMatrix out(dim, cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) out.set_column(c, cols[c]);
  return OrthonormalBasis(dim, std::move(out));
}

}  // namespace dgp
