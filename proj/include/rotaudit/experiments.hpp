#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rotaudit/audit.hpp"
#include "rotaudit/sae.hpp"
#include "rotaudit/train.hpp"

// The desk-scale experiment layout shared by the CLI and the acceptance run:
// cohort A (shared frozen I/O, seeds 0-2, anchor 0) and cohort B (independent
// init, seeds 100-102), each with a mid-training checkpoint.
namespace rotaudit::experiments {

struct DeskSetup {
  model::ModelConfig model = model::ModelConfig::desk();
  train::TrainConfig train = train::TrainConfig::desk();
  dyck::TaskDistributions dists = dyck::TaskDistributions::desk();
  train::CohortSpec cohort_a{train::CohortKind::shared_frozen_io, {0, 1, 2}, 0};
  train::CohortSpec cohort_b{train::CohortKind::independent_init, {100, 101, 102}, 100};
  int mid_checkpoint = 8000;
  std::filesystem::path root;

  train::TrainConfig train_config(const train::CohortSpec& c) const;
  std::filesystem::path cohort_dir(const train::CohortSpec& c) const;
  const train::CohortSpec& cohort(const std::string& name) const;
};

/// Layout rooted at `root` (usually io::experiments_dir()).
DeskSetup desk_setup(const std::filesystem::path& root);
/// "desk" or "paper"; the paper scale keeps the cohort seeds and uses the
/// full model, schedule and lengths (mid checkpoint at 24000).
DeskSetup setup_for_scale(const std::filesystem::path& root, const std::string& scale);

/// Trains (or loads) every seed of the cohort.
std::vector<model::WeightsF> cohort_models(const DeskSetup& s, const train::CohortSpec& c, bool verbose = false);

/// Mid-training checkpoint of one seed; the seed must already be trained.
model::WeightsF mid_checkpoint(const DeskSetup& s, const train::CohortSpec& c, std::uint64_t seed);

/// Token batches: SAE training and audit batches are disjoint samples of the train mix.
std::vector<dyck::LabeledSequence> sae_batch(const DeskSetup& s, int n = 1500);
std::vector<dyck::LabeledSequence> audit_batch(const DeskSetup& s, int n = 1500);

struct SaePlan {
  std::vector<double> l1_grid{0.01, 0.03, 0.1, 0.3, 1.0};
  int tuning_steps = 1500;
  int steps = 6000;
  int expansion = 8;
  std::uint64_t seed = 0;
};

/// Per-site l1 picked by tune_l1 on one model's activations.
std::map<std::string, double> tune_site_l1(const io::ActsBundle& acts, const SaePlan& plan);

/// One SAE per site, trained with the given per-site l1.
std::map<std::string, sae::SAEModel> train_site_saes(const io::ActsBundle& acts, const std::map<std::string, double>& l1,
                                                     const SaePlan& plan);

/// Per-site SAEs cached under `cache_dir` (<site>.sae plus l1.json). With no
/// `l1` the per-site coefficient is tuned first. Cached files are reused only
/// when their l1 and step count match the request.
std::map<std::string, sae::SAEModel> cached_site_saes(const io::ActsBundle& acts, const SaePlan& plan,
                                                      const std::filesystem::path& cache_dir,
                                                      const std::map<std::string, double>* l1 = nullptr);

}  // namespace rotaudit::experiments
