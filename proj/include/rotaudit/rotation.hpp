#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rotaudit/linalg.hpp"

// Orthogonal Procrustes fits between activation sets and the Haar-measure
// statistics used to judge them.
namespace rotaudit::rotation {

struct RotationFit {
  MatD R;  // d x d, orthogonal; maps centred src rows onto centred ref rows
  RowVecD mu_src;
  RowVecD mu_ref;
  double residual_mse = 0.0;  // per entry, on the fit batch
  double frob_from_identity = 0.0;
  double det = 1.0;
  int rank = 0;  // rank of the cross-covariance
  std::string src;
  std::string ref;

  /// (x - mu_src) R + mu_ref
  MatD apply(const MatD& x) const;
  /// x R, no centring (for directions such as steering vectors)
  RowVecD rotate(const RowVecD& v) const { return v * R; }
};

/// argmin over O(d) of ||(src - mu_src) O - (ref - mu_ref)||_F via the SVD of
/// the centred cross-covariance src^T ref = U S V^T, R = U V^T.
RotationFit fit_procrustes(const MatD& src, const MatD& ref);

/// sqrt(2d): the Haar-typical Frobenius distance of a d x d rotation from I.
double frob_identity_prediction(int d);

/// Haar-distributed orthogonal matrix (QR of a Gaussian with the diagonal sign
/// fix). With `det` = +1 or -1 one column is flipped as needed so the sample
/// lies on that component; 0 leaves the determinant random.
MatD haar_sample(int d, Rng& rng, int det = 1);

/// Phases in (-pi, pi] of all d eigenvalues, sorted ascending. Throws when R
/// is not orthogonal to `tol` or the complex eigenvalues do not pair up.
std::vector<double> eigen_angles(const MatD& R, double tol = 1e-4);

/// Exact one-point eigen-angle density of Haar SO(d) over (-pi, pi], for an
/// eigenvalue drawn uniformly from all d (odd d puts mass 1/d at 0).
double haar_angle_density(double theta, int d);
double haar_angle_cdf(double theta, int d);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Kolmogorov survival function Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2).
double kolmogorov_q(double lambda);

/// Two-sample KS; p from the asymptotic distribution at n m / (n + m).
KsResult ks_two_sample(std::vector<double> xs, std::vector<double> ys);
/// One-sample KS against a continuous CDF.
KsResult ks_one_sample(std::vector<double> xs, const std::function<double(double)>& cdf);

struct PermutationDistance {
  std::vector<int> perm;   // row i -> column perm[i]
  std::vector<int> signs;  // +-1 per row
  double distance = 0.0;   // ||R - P_best||_F
};

/// Nearest signed permutation: maximises sum_i |R_{i, perm(i)}| by optimal assignment.
PermutationDistance best_permutation_distance(const MatD& R);

}  // namespace rotaudit::rotation
