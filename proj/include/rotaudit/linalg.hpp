#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace rotaudit {

// Row-major everywhere: activation matrices are (rows = tokens) x (cols = features).
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using RowVecF = RowVec<float>;
using RowVecD = RowVec<double>;

using Rng = std::mt19937_64;

/// Matrix of i.i.d. standard normal entries scaled by `stddev`.
template <typename S>
Mat<S> random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng));
  return m;
}

/// max_ij |(Q^T Q - I)_ij|
double orthogonality_error(const MatD& q);

/// Largest singular value.
double operator_norm(const MatD& m);

/// Column means as a row vector.
RowVecD column_mean(const MatD& m);

/// Pearson correlation; NaN when either side has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

/// Sign of det(m) computed through a partial-pivot LU.
double determinant(const MatD& m);

/// Matrix rank with the usual relative singular-value tolerance.
int numerical_rank(const MatD& m, double rel_tol = 1e-10);

}  // namespace rotaudit
