#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/linalg.hpp"
#include "rotaudit/rotation.hpp"

namespace rotaudit::sae {

struct SAEConfig {
  int expansion = 8;
  double l1_coeff = 1e-3;
  double lr = 1e-3;
  int steps = 20000;
  int batch_size = 256;
  std::string site;
};

/// encode(x) = ReLU((x - b_pre) W_enc + b_enc), decode(f) = f W_dec + b_pre,
/// with unit-norm W_dec rows.
struct SAEModel {
  MatF W_enc;  // d x m
  MatF b_pre;  // 1 x d
  MatF b_enc;  // 1 x m
  MatF W_dec;  // m x d
  std::string site;
  double l1_coeff = 0.0;

  int d() const { return static_cast<int>(W_enc.rows()); }
  int m() const { return static_cast<int>(W_enc.cols()); }
  MatD encode(const MatD& x) const;
  MatD decode(const MatD& f) const;
  MatD reconstruct(const MatD& x) const { return decode(encode(x)); }
};

struct TrainStats {
  double final_loss = 0.0;
  double l0 = 0.0;  // mean active features per row on the training set
  double ev = 0.0;
  bool under_sampled = false;  // fewer than 10 rows per dictionary entry
};

/// Adam on ||x - x_hat||^2 + l1 ||f||_1, both measured in units where the
/// site's per-dimension variance is 1 (so one l1 grid serves every site). The
/// exported model is in raw activation units.
SAEModel train_sae(const MatF& acts, const SAEConfig& config, Rng& rng, TrainStats* stats = nullptr);

/// Mean number of active features per row.
double mean_l0(const SAEModel& sae, const MatD& acts);

/// Picks the smallest l1 in `grid` whose L0 lands in [lo, hi]; when none does,
/// the one closest to the band. Returns the chosen coefficient.
double tune_l1(const MatF& acts, SAEConfig config, const std::vector<double>& grid, Rng& rng, double lo = 8.0,
               double hi = 40.0, int tuning_steps = 3000);

/// 1 - sum ||x - x_hat||^2 / sum ||x - mean(x)||^2 on the given rows.
double explained_variance(const SAEModel& sae, const MatD& acts);
/// As above on acts R; R must be orthogonal (operator-norm check at 1e-4).
double explained_variance(const SAEModel& sae, const MatD& acts, const MatD& rotation);
/// As above on fit.apply(acts), reusing the fit's centring vectors.
double explained_variance(const SAEModel& sae, const MatD& acts, const rotation::RotationFit& fit);

struct Matching {
  std::vector<int> pairs;        // A feature i -> B feature pairs[i]
  std::vector<double> cosines;   // |cos| of each matched pair
  std::vector<double> signs;     // sign of the matched cosine
  std::vector<double> max_cos;   // per live A feature, max |cos| over live B features
  double frac_above_half = 0.0;  // fraction of live A features with max |cos| > 0.5
  double mean_max_cos = 0.0;
  double mean_matched_cos = 0.0;
  int dead_a = 0;
  int dead_b = 0;
};

/// Hungarian matching maximising total |cos| between decoder rows. Optional
/// liveness masks exclude dead features from the aggregates.
Matching match_decoders(const SAEModel& a, const SAEModel& b, const std::vector<bool>* alive_a = nullptr,
                        const std::vector<bool>* alive_b = nullptr);

/// Features that fire on at least one row.
std::vector<bool> alive_features(const SAEModel& sae, const MatD& acts);

/// Per-feature Pearson r between encode(acts_a) and encode(acts_b transformed);
/// NaN for features firing on fewer than `min_rows` rows on either side.
std::vector<double> firing_correlation(const SAEModel& sae, const MatD& acts_a, const MatD& acts_b,
                                       const rotation::RotationFit* fit = nullptr, int min_rows = 10);
std::vector<double> firing_correlation(const SAEModel& sae, const MatD& acts_a, const MatD& acts_b,
                                       const MatD& rotation, int min_rows = 10);

/// Mean of the finite entries; NaN when there are none.
double finite_mean(const std::vector<double>& xs);

/// Tensor-container persistence; `meta` is stored alongside and returned on load.
void save_sae(const std::filesystem::path& path, const SAEModel& sae, const nlohmann::json& meta = nlohmann::json::object());
SAEModel load_sae(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace rotaudit::sae
