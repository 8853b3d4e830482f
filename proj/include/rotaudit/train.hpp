#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/dyck.hpp"
#include "rotaudit/model.hpp"

namespace rotaudit::train {

struct TrainConfig {
  double peak_lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  int warmup_steps = 500;
  int max_steps = 60000;
  int batch_size = 512;
  int early_stop_bonus = 10000;
  double target_acc = 0.9999;
  double lr_floor_fraction = 0.02;
  bool freeze_shared_io = false;
  std::vector<int> checkpoint_steps;
  int eval_every = 500;
  int eval_sequences = 512;
  int log_every = 100;

  static TrainConfig paper();
  /// Batch 128, 20000 steps.
  static TrainConfig desk();
};

enum class CohortKind { shared_frozen_io, independent_init };

struct CohortSpec {
  CohortKind kind = CohortKind::independent_init;
  std::vector<std::uint64_t> seeds;
  std::uint64_t anchor_seed = 0;

  std::string name() const;  // "A" or "B"
};

/// Linear warmup from 0, then cosine from peak to lr_floor_fraction * peak at max_steps.
double lr_at(int step, const TrainConfig& config);

struct AdamState {
  std::map<std::string, MatF> m, v;
  std::int64_t t = 0;
};

/// Decoupled AdamW on every trainable tensor; frozen tensors and W_pos are never touched.
void adamw_step(model::WeightsF& params, const model::WeightsF& grads, AdamState& state, double lr,
                const TrainConfig& config);

/// Fixed held-out sets (train-distribution holdout, compositional, long).
struct HeldOut {
  std::vector<std::pair<std::string, std::vector<dyck::LabeledSequence>>> sets;
  static HeldOut make(const dyck::TaskDistributions& dists, int n_sequences, std::uint64_t seed);
};

struct EvalResult {
  std::map<std::string, std::array<double, 3>> acc;  // per set, per head
  double min_acc = 0.0;
  double loss = 0.0;  // mean over sets
};

EvalResult evaluate(const model::WeightsF& w, const HeldOut& held_out, int chunk = 256);

struct TrainResult {
  model::WeightsF weights;
  std::int64_t final_step = 0;
  std::optional<std::int64_t> first_crossing;
  EvalResult final_eval;
  double final_train_loss = 0.0;
  nlohmann::json log;
};

struct SeedPaths {
  std::filesystem::path dir;
  std::uint64_t seed = 0;
  std::filesystem::path final_checkpoint() const;
  std::filesystem::path checkpoint(int step) const;
  std::filesystem::path log() const;
};

/// Trains one seed. For shared_frozen_io cohorts other than the anchor,
/// `anchor` must hold the trained anchor weights.
TrainResult train_seed(const model::ModelConfig& model_config, const TrainConfig& config, const CohortSpec& cohort,
                       std::uint64_t seed, const dyck::TaskDistributions& dists, const std::filesystem::path& out_dir,
                       const model::WeightsF* anchor = nullptr, bool verbose = false);

/// Loads the final checkpoint from `out_dir` when present (and its config
/// matches), otherwise trains the seed and writes it.
model::WeightsF load_or_train(const model::ModelConfig& model_config, const TrainConfig& config,
                              const CohortSpec& cohort, std::uint64_t seed, const dyck::TaskDistributions& dists,
                              const std::filesystem::path& out_dir, const model::WeightsF* anchor = nullptr,
                              bool verbose = false);

/// Anchor first (shared I/O source), then the rest, in seed order.
std::vector<model::WeightsF> train_cohort(const model::ModelConfig& model_config, const TrainConfig& config,
                                          const CohortSpec& cohort, const dyck::TaskDistributions& dists,
                                          const std::filesystem::path& out_dir, bool verbose = false);

}  // namespace rotaudit::train
