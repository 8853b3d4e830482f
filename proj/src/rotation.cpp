#include "rotaudit/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "rotaudit/assignment.hpp"

namespace rotaudit::rotation {

namespace {
constexpr double kPi = std::numbers::pi;
}

MatD RotationFit::apply(const MatD& x) const {
  MatD out = x.rowwise() - mu_src;
  out = out * R;
  out.rowwise() += mu_ref;
  return out;
}

RotationFit fit_procrustes(const MatD& src, const MatD& ref) {
  if (src.rows() != ref.rows() || src.cols() != ref.cols())
    throw std::invalid_argument("fit_procrustes: source and reference shapes differ");
  if (src.rows() == 0) throw std::invalid_argument("fit_procrustes: empty activation matrices");
  RotationFit fit;
  fit.mu_src = column_mean(src);
  fit.mu_ref = column_mean(ref);
  const MatD a = src.rowwise() - fit.mu_src;
  const MatD b = ref.rowwise() - fit.mu_ref;
  const MatD m = a.transpose() * b;
  Eigen::JacobiSVD<MatD> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  fit.R = svd.matrixU() * svd.matrixV().transpose();
  const auto& s = svd.singularValues();
  fit.rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > 1e-10 * std::max(s(0), 1e-300)) ++fit.rank;
  fit.residual_mse = (a * fit.R - b).squaredNorm() / static_cast<double>(a.size());
  fit.frob_from_identity = (fit.R - MatD::Identity(fit.R.rows(), fit.R.cols())).norm();
  fit.det = determinant(fit.R) > 0 ? 1.0 : -1.0;
  return fit;
}

double frob_identity_prediction(int d) { return std::sqrt(2.0 * d); }

MatD haar_sample(int d, Rng& rng, int det) {
  if (d < 1) throw std::invalid_argument("haar_sample: d must be positive");
  const MatD z = random_normal<double>(d, d, rng);
  Eigen::HouseholderQR<MatD> qr(z);
  MatD q = qr.householderQ();
  const MatD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  if (det != 0 && (determinant(q) > 0) != (det > 0)) q.col(0) *= -1.0;
  return q;
}

std::vector<double> eigen_angles(const MatD& R, double tol) {
  if (R.rows() != R.cols()) throw std::invalid_argument("eigen_angles: matrix is not square");
  if (orthogonality_error(R) > tol) throw std::invalid_argument("eigen_angles: matrix is not orthogonal");
  Eigen::EigenSolver<MatD> es(R, false);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigen_angles: eigen-solver failed");
  std::vector<double> angles;
  std::vector<double> positive, negative;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const std::complex<double> z = es.eigenvalues()(i);
    double a = std::arg(z);
    if (a <= -kPi) a = kPi;
    angles.push_back(a);
    if (std::abs(z.imag()) > 1e-9) (a > 0 ? positive : negative).push_back(std::abs(a));
  }
  std::sort(positive.begin(), positive.end());
  std::sort(negative.begin(), negative.end());
  if (positive.size() != negative.size()) throw std::runtime_error("eigen_angles: unpaired complex eigenvalues");
  for (std::size_t i = 0; i < positive.size(); ++i)
    if (std::abs(positive[i] - negative[i]) > 1e-6) throw std::runtime_error("eigen_angles: conjugate pairing violated");
  std::sort(angles.begin(), angles.end());
  return angles;
}

// For SO(2N) the N free angles on [0, pi] have density N/pi + (1/pi) sum_{k=1}^{N-1} cos(2k t);
// for SO(2N+1), N/pi - (1/pi) sum_{k=0}^{N-1} cos((2k+1) t), plus the fixed eigenvalue 1.
// Spreading each free angle symmetrically over (-pi, pi] halves the density.
double haar_angle_density(double theta, int d) {
  if (d < 2) return 0.0;
  const int n = d / 2;
  double s = 0.0;
  if (d % 2 == 0) {
    for (int k = 1; k < n; ++k) s += std::cos(2.0 * k * theta);
    return (n + s) / (2.0 * kPi * n);
  }
  for (int k = 0; k < n; ++k) s += std::cos((2.0 * k + 1.0) * theta);
  return (n - s) / (kPi * d);
}

double haar_angle_cdf(double theta, int d) {
  theta = std::clamp(theta, -kPi, kPi);
  const double uniform = (theta + kPi) / (2.0 * kPi);
  if (d < 2) return theta >= 0 ? 1.0 : 0.0;
  const int n = d / 2;
  double s = 0.0;
  if (d % 2 == 0) {
    for (int k = 1; k < n; ++k) s += std::sin(2.0 * k * theta) / (2.0 * k);
    return uniform + s / (kPi * d);
  }
  for (int k = 0; k < n; ++k) s += std::sin((2.0 * k + 1.0) * theta) / (2.0 * k + 1.0);
  const double free = (2.0 * n / d) * (uniform - s / (2.0 * kPi * n));
  return free + (theta >= 0 ? 1.0 / d : 0.0);
}

double kolmogorov_q(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 0.2) return 1.0;  // series converges slowly; Q is 1 to double precision here
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_two_sample(std::vector<double> xs, std::vector<double> ys) {
  if (xs.empty() || ys.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  const double n = static_cast<double>(xs.size());
  const double m = static_cast<double>(ys.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < xs.size() && j < ys.size()) {
    const double v = std::min(xs[i], ys[j]);
    while (i < xs.size() && xs[i] <= v) ++i;
    while (j < ys.size() && ys[j] <= v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
  }
  const double ne = n * m / (n + m);
  return {d, kolmogorov_q(std::sqrt(ne) * d)};
}

KsResult ks_one_sample(std::vector<double> xs, const std::function<double(double)>& cdf) {
  if (xs.empty()) throw std::invalid_argument("ks_one_sample: empty sample");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return {d, kolmogorov_q(std::sqrt(n) * d)};
}

PermutationDistance best_permutation_distance(const MatD& R) {
  if (R.rows() != R.cols()) throw std::invalid_argument("best_permutation_distance: matrix is not square");
  const MatD score = R.cwiseAbs();
  PermutationDistance out;
  out.perm = max_score_assignment(score);
  MatD p = MatD::Zero(R.rows(), R.cols());
  for (std::size_t i = 0; i < out.perm.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int s = R(r, out.perm[i]) < 0 ? -1 : 1;
    out.signs.push_back(s);
    p(r, out.perm[i]) = s;
  }
  out.distance = (R - p).norm();
  return out;
}

}  // namespace rotaudit::rotation
