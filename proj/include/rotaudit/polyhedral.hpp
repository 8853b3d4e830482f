#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/model.hpp"

// ReLU activation-pattern census of an MLP layer and per-cell affinity checks.
namespace rotaudit::polyhedral {

/// Bitmask of active neurons (pre-activation > 0; exactly 0 counts as inactive).
using Pattern = std::vector<std::uint64_t>;

Pattern pattern_of(const double* pre, int n);

struct PatternCensus {
  int layer = 0;
  std::int64_t n_samples = 0;
  std::int64_t n_unique_patterns = 0;
  int alive_neuron_count = 0;
  std::vector<double> neuron_score;  // |W_in column| * |W_out row|
  std::vector<std::pair<Pattern, std::int64_t>> most_common;  // up to 20, by count

  nlohmann::json to_json() const;
};

/// `inputs` are rows at the layer's MLP input (after the RMSNorm and its gain).
PatternCensus census(const model::WeightsF& w, int layer, const MatD& inputs);

/// MLP output of `layer` computed in double: ReLU(x W_in) W_out.
MatD mlp_output(const model::WeightsF& w, int layer, const MatD& inputs);

/// Fits an affine map on the first half of the probes, returns the max-abs
/// prediction error on the second half. Throws std::invalid_argument if any
/// probe lies outside `pattern`, or there are too few probes to fit.
double verify_affine_cell(const model::WeightsF& w, int layer, const Pattern& pattern, const MatD& probes);

/// Gaussian perturbations of `center` (scale `radius`) that stay in its cell;
/// the radius is halved until enough probes are accepted.
MatD probes_in_cell(const model::WeightsF& w, int layer, const RowVecD& center, int n, double radius, Rng& rng);

}  // namespace rotaudit::polyhedral
