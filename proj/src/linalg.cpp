#include "rotaudit/linalg.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace rotaudit {

double orthogonality_error(const MatD& q) {
  if (q.rows() != q.cols()) throw std::invalid_argument("orthogonality_error: matrix is not square");
  const MatD gram = q.transpose() * q;
  return (gram - MatD::Identity(q.rows(), q.cols())).cwiseAbs().maxCoeff();
}

double operator_norm(const MatD& m) {
  Eigen::JacobiSVD<MatD> svd(m);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

RowVecD column_mean(const MatD& m) {
  if (m.rows() == 0) return RowVecD::Zero(m.cols());
  return m.colwise().mean();
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const auto n = static_cast<double>(x.size());
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

double determinant(const MatD& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("determinant: matrix is not square");
  return Eigen::PartialPivLU<MatD>(m).determinant();
}

int numerical_rank(const MatD& m, double rel_tol) {
  Eigen::JacobiSVD<MatD> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * s(0)) ++rank;
  return rank;
}

}  // namespace rotaudit
