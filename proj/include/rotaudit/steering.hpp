#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/dyck.hpp"
#include "rotaudit/model.hpp"

// Diff-of-means steering vectors, dosed application at a residual site,
// within- vs cross-seed transfer curves, and regime labels.
namespace rotaudit::steering {

enum class VectorKind { depth, sticky, closer };
std::string to_string(VectorKind k);
VectorKind vector_kind_from_string(const std::string& s);

/// Selects (sequence, position) rows of a labelled sample.
using RowSelector = std::function<bool(const dyck::LabeledSequence&, int)>;

struct Contrast {
  std::string positive;  // descriptor of the + class
  std::string negative;
  RowSelector pos;
  RowSelector neg;
};

/// depth: depth >= 4 vs depth <= 1. sticky: flag clear vs flag set (adding
/// the vector pushes toward "still valid"). closer: closer tokens vs openers.
Contrast contrast_for(VectorKind k);

struct SteeringVector {
  RowVecD v;
  std::string site;
  VectorKind kind = VectorKind::depth;
  std::string positive, negative;
  std::uint64_t source_seed = 0;
  std::int64_t n_pos = 0, n_neg = 0;

  nlohmann::json to_json() const;
};

/// mean(acts at + rows) - mean(acts at - rows). Throws on an empty selection.
SteeringVector build_vector(const model::WeightsF& w, const std::string& site,
                            const std::vector<dyck::LabeledSequence>& seqs, const Contrast& contrast,
                            VectorKind kind = VectorKind::depth, std::uint64_t source_seed = 0);

/// Forward pass with alpha * v added to every row of the residual stream at `site`.
model::ForwardPass<float> apply_steering(const model::WeightsF& w, const RowVecD& v, double alpha,
                                         const std::string& site, const model::PackedBatch& batch);

/// Effect of steering relative to the clean pass on the same batch:
///   depth  - fraction of positions whose argmax depth class increases;
///   sticky - rise in the fraction of flagged positions predicted unflagged;
///   closer - drop in all-heads accuracy on closer positions.
double effect_metric(VectorKind k, const model::ForwardPass<float>& clean, const model::ForwardPass<float>& steered,
                     const std::vector<dyck::LabeledSequence>& seqs);

struct TransferCurve {
  VectorKind kind = VectorKind::depth;
  std::vector<double> alphas;  // starts at 0
  std::vector<double> within;
  std::vector<double> cross;
  std::vector<double> ratio;  // cross / within, NaN where within is 0
  bool rotated = false;
  std::uint64_t source_seed = 0, target_seed = 0;

  nlohmann::json to_json() const;
};

/// Default dose grid.
std::vector<double> default_alphas();

/// Within: v on the source model. Cross: v (or v R when `rotation` is given)
/// on the target model. Both measured on `seqs`.
TransferCurve transfer_curve(const SteeringVector& vec, const model::WeightsF& source, const model::WeightsF& target,
                             const std::vector<dyck::LabeledSequence>& seqs, const std::vector<double>& alphas,
                             const MatD* rotation = nullptr);

enum class Regime { clean, partial, inverted };
inline constexpr double kCleanLo = 0.7;
inline constexpr double kCleanHi = 1.5;
std::string to_string(Regime r);

struct RegimeResult {
  Regime regime = Regime::clean;
  /// Smallest nonzero dose where the within effect reaches half its grid
  /// maximum, and cross / within there.
  double matched_alpha = 0.0;
  double matched_ratio = 0.0;
  /// cross / within at the smallest nonzero dose (inf when only cross moves).
  double small_alpha_ratio = 0.0;
  /// Dose at which cross first reaches within(matched_alpha), over
  /// matched_alpha; inf if it never does on the grid.
  double dose_multiple = 0.0;
  bool sign_flip = false;
  bool cross_exceeds_at_small_alpha = false;
  std::string reason;

  nlohmann::json to_json() const;
};

/// inverted: sign flip, or cross / within above 1.5 at the smallest dose or at
/// the matched dose. clean: matched ratio in [0.7, 1.5]. partial: matched
/// ratio below 0.7 (cross needs more dose; nominally 2-8x). Throws on a
/// degenerate curve or fewer than 3 nonzero doses.
RegimeResult classify_regime(const TransferCurve& curve);

}  // namespace rotaudit::steering
