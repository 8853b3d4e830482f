#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/bars.hpp"
#include "rotaudit/model.hpp"

// Bar P: the weight-space symmetry group of a folded model, multi-start
// coordinate-descent alignment, and Cayley refinement of the residual rotation.
namespace rotaudit::symmetry {

/// Acting on folded weights W, g(W) has, for new head h with source p = head_perm[l][h],
///   W_Q'^h = R^T W_Q^p QK_h,  W_K'^h = R^T W_K^p QK_h,
///   W_V'^h = R^T W_V^p VO_h,  W_O'^h = VO_h^T W_O^p R,
/// and for new neuron j with source k = mlp_perm[l][j],
///   W_in'[:, j] = s_j R^T W_in[:, k],  W_out'[j, :] = W_out[k, :] R / s_j;
/// embeddings are right-multiplied by R and unembeddings left-multiplied by R^T.
struct SymmetryElement {
  std::vector<std::vector<int>> head_perm;
  std::vector<std::vector<MatD>> qk_rot;
  std::vector<std::vector<MatD>> vo_rot;
  std::vector<std::vector<int>> mlp_perm;
  std::vector<std::vector<double>> mlp_scale;
  MatD resid_rot;

  static SymmetryElement identity(const model::ModelConfig& c);
  /// Uniform permutations, Haar rotations, log-normal scales.
  static SymmetryElement random(const model::ModelConfig& c, Rng& rng);
  SymmetryElement inverse() const;
  /// Throws std::invalid_argument on malformed permutations, non-orthogonal
  /// blocks (1e-6) or non-positive scales.
  void validate(const model::ModelConfig& c) const;
};

/// Requires unit RMSNorm gains (fold first).
model::WeightsD apply_symmetry(const model::WeightsD& w, const SymmetryElement& g);
model::WeightsF apply_symmetry(const model::WeightsF& w, const SymmetryElement& g);

/// Raw per-entry MSE for every tensor, W_pos and the gains included.
std::map<std::string, double> per_tensor_mse(const model::WeightsD& a, const model::WeightsD& b);

struct AlignmentResult {
  SymmetryElement element;  // aligns B onto A: element applied to folded B approximates folded A
  std::map<std::string, double> per_tensor_mse;
  double max_mse = 0.0;
  std::string max_tensor;
  double global_mse = 0.0;
  std::string method = "baseline";  // baseline, cayley, joint
  double lambda = 0.0;
  std::optional<double> act_mse;
  int config_index = -1;
  bool with_rotation = true;
  std::vector<double> history;  // global MSE after each coordinate-descent iteration

  nlohmann::json to_json() const;
};

struct AlignOptions {
  int n_perm_starts = 16;
  int iterations = 6;
  std::uint64_t seed = 0;
};

/// Best (lowest max per-tensor MSE) of n_perm_starts x {with, without residual
/// rotation} coordinate-descent runs; ties go to the lower configuration index.
AlignmentResult multistart_align(const model::WeightsF& a, const model::WeightsF& b, const AlignOptions& options = {});

/// One coordinate-descent run from a given head permutation start.
AlignmentResult align_from(const model::WeightsD& folded_a, const model::WeightsD& folded_b,
                           const std::vector<std::vector<int>>& head_start, bool with_rotation, int iterations);

/// Skew S -> (I - S)(I + S)^{-1}.
MatD cayley(const MatD& skew);

/// How the weight term of the refinement loss aggregates per-tensor MSEs.
enum class WeightObjective { global, mean_tensor, smooth_max };

struct CayleyOptions {
  double lambda = 0.0;
  double lr = 1e-2;
  int steps = 500;
  double rel_tol = 1e-7;
  WeightObjective objective = WeightObjective::smooth_max;
  /// Temperature of the smooth max, relative to the starting max MSE.
  double temperature = 0.02;
};

/// Residual-site activations of A and B on one shared token batch, row-aligned.
struct ActPair {
  std::vector<MatD> a;
  std::vector<MatD> b;
};

ActPair residual_acts(const model::WeightsF& a, const model::WeightsF& b, const model::PackedBatch& batch);

/// Adam on the skew parameters of R = R_base cayley(S) for
/// (1 - lambda) weight_MSE + lambda act_MSE, every other coordinate frozen.
AlignmentResult cayley_refine(const AlignmentResult& base, const model::WeightsF& a, const model::WeightsF& b,
                              const ActPair* acts, const CayleyOptions& options = {});

/// Uncentred per-entry MSE between A's and rotated B's residual activations,
/// averaged over sites with equal weight.
double activation_mse(const ActPair& acts, const MatD& R);

bars::BarReport bar_p(const AlignmentResult& result);

}  // namespace rotaudit::symmetry
