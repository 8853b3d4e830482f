#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/dyck.hpp"
#include "rotaudit/model.hpp"

// Behavioural KL (Bar B), single-component mean ablation, and the AP / IG
// predictors behind Bars C and Pr.
namespace rotaudit::bars {

inline constexpr double kBarBThreshold = 1e-4;
inline constexpr double kBarPThreshold = 1e-3;
inline constexpr double kBarCThreshold = 0.99;

struct BarReport {
  std::string bar;  // "B", "P", "C", "Pr"
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
  nlohmann::json breakdown = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct BarBOptions {
  int n_samples = 1000000;  // sequences, split evenly over the three distributions
  int chunk = 512;
  std::uint64_t seed = 4242;
};

/// Mean KL(reference || model) over (sequence, position, head). With no
/// reference model the deterministic labels are the reference, and KL reduces
/// to the negative log-likelihood of the correct class.
BarReport bar_b(const model::WeightsF& w, const model::WeightsF* reference, const dyck::TaskDistributions& dists,
                const BarBOptions& options = {});

/// Everything needed to evaluate one component on a fixed batch.
struct AblationBatch {
  model::PackedBatch batch;
  model::Labels labels;
  static AblationBatch make(const std::vector<dyck::LabeledSequence>& seqs);
};

/// Global mean of the component's output over every row of the batch.
RowVecF component_mean(const model::WeightsF& w, const AblationBatch& b, const model::ComponentId& c);

double clean_loss(const model::WeightsF& w, const AblationBatch& b);

/// Ablated loss minus clean loss, the component's output replaced by its batch mean.
double mean_ablation_effect(const model::WeightsF& w, const AblationBatch& b, const model::ComponentId& c);

/// <dL/d(output) at clean, mean - clean>, summed over rows and coordinates.
double ap_predict(const model::WeightsF& w, const AblationBatch& b, const model::ComponentId& c);

/// Midpoint rule on the straight path from the mean to the clean output of the
/// target component only (downstream layers see the interpolated residual):
/// -(1/n) sum_k <dL/d(output)(mean + a_k (clean - mean)), clean - mean>, a_k = (k + 1/2)/n.
double ig_predict(const model::WeightsF& w, const AblationBatch& b, const model::ComponentId& c, int n_steps = 32);

struct ComponentEffects {
  std::vector<model::ComponentId> components;
  std::vector<double> measured, ap, ig;
  double r_ap = 0.0;
  double r_ig = 0.0;
  nlohmann::json to_json() const;
};

ComponentEffects component_effects(const model::WeightsF& w, const AblationBatch& b, int ig_steps = 32);

/// Pearson r of predictions against measurements; mode is "within" or "cross".
BarReport bar_c_pr(const std::string& bar, const std::vector<double>& predictions,
                   const std::vector<double>& measurements, const std::string& mode = "within");

}  // namespace rotaudit::bars
