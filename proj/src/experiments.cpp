#include "rotaudit/experiments.hpp"

#include <stdexcept>

namespace rotaudit::experiments {

train::TrainConfig DeskSetup::train_config(const train::CohortSpec& c) const {
  train::TrainConfig t = train;
  t.checkpoint_steps = {mid_checkpoint};
  t.freeze_shared_io = c.kind == train::CohortKind::shared_frozen_io;
  return t;
}

std::filesystem::path DeskSetup::cohort_dir(const train::CohortSpec& c) const { return root / ("cohort_" + c.name()); }

const train::CohortSpec& DeskSetup::cohort(const std::string& name) const {
  if (name == "A") return cohort_a;
  if (name == "B") return cohort_b;
  throw std::invalid_argument("unknown cohort " + name + " (expected A or B)");
}

DeskSetup desk_setup(const std::filesystem::path& root) {
  DeskSetup s;
  s.root = root;
  return s;
}

DeskSetup setup_for_scale(const std::filesystem::path& root, const std::string& scale) {
  DeskSetup s = desk_setup(root);
  if (scale == "desk") return s;
  if (scale != "paper") throw std::invalid_argument("unknown scale " + scale + " (expected desk or paper)");
  s.model = model::ModelConfig::paper();
  s.train = train::TrainConfig::paper();
  s.dists = dyck::TaskDistributions::paper();
  s.mid_checkpoint = 24000;
  return s;
}

std::vector<model::WeightsF> cohort_models(const DeskSetup& s, const train::CohortSpec& c, bool verbose) {
  return train::train_cohort(s.model, s.train_config(c), c, s.dists, s.cohort_dir(c), verbose);
}

model::WeightsF mid_checkpoint(const DeskSetup& s, const train::CohortSpec& c, std::uint64_t seed) {
  const train::SeedPaths p{s.cohort_dir(c), seed};
  return io::load_checkpoint(p.checkpoint(s.mid_checkpoint));
}

std::vector<dyck::LabeledSequence> sae_batch(const DeskSetup& s, int n) {
  return dyck::sample_sequences(s.dists.train, static_cast<std::size_t>(n), 31337);
}

std::vector<dyck::LabeledSequence> audit_batch(const DeskSetup& s, int n) {
  return dyck::sample_sequences(s.dists.train, static_cast<std::size_t>(n), 27182);
}

std::map<std::string, double> tune_site_l1(const io::ActsBundle& acts, const SaePlan& plan) {
  std::map<std::string, double> out;
  Rng rng(plan.seed);
  for (const auto& site : acts.sites) {
    sae::SAEConfig cfg;
    cfg.expansion = plan.expansion;
    cfg.site = site;
    out[site] = sae::tune_l1(acts.site(site), cfg, plan.l1_grid, rng, 8.0, 40.0, plan.tuning_steps);
  }
  return out;
}

std::map<std::string, sae::SAEModel> train_site_saes(const io::ActsBundle& acts, const std::map<std::string, double>& l1,
                                                     const SaePlan& plan) {
  std::map<std::string, sae::SAEModel> out;
  for (const auto& site : acts.sites) {
    sae::SAEConfig cfg;
    cfg.expansion = plan.expansion;
    cfg.l1_coeff = l1.at(site);
    cfg.steps = plan.steps;
    cfg.site = site;
    Rng rng(plan.seed + std::hash<std::string>{}(site));
    out[site] = sae::train_sae(acts.site(site), cfg, rng);
  }
  return out;
}

std::map<std::string, sae::SAEModel> cached_site_saes(const io::ActsBundle& acts, const SaePlan& plan,
                                                      const std::filesystem::path& cache_dir,
                                                      const std::map<std::string, double>* l1) {
  std::filesystem::create_directories(cache_dir);
  std::map<std::string, double> coeffs;
  if (l1) {
    coeffs = *l1;
  } else if (const auto p = cache_dir / "l1.json"; std::filesystem::exists(p)) {
    coeffs = io::read_json(p).get<std::map<std::string, double>>();
  } else {
    coeffs = tune_site_l1(acts, plan);
    io::write_json(p, coeffs);
  }
  std::map<std::string, sae::SAEModel> out;
  for (const auto& site : acts.sites) {
    const auto path = cache_dir / (site + ".sae");
    const double want = coeffs.at(site);
    if (std::filesystem::exists(path)) {
      nlohmann::json meta;
      auto s = sae::load_sae(path, &meta);
      if (meta.value("steps", -1) == plan.steps && meta.value("l1_coeff", -1.0) == want && s.d() == acts.d_model) {
        out[site] = std::move(s);
        continue;
      }
    }
    sae::SAEConfig cfg;
    cfg.expansion = plan.expansion;
    cfg.l1_coeff = want;
    cfg.steps = plan.steps;
    cfg.site = site;
    Rng rng(plan.seed + std::hash<std::string>{}(site));
    auto s = sae::train_sae(acts.site(site), cfg, rng);
    sae::save_sae(path, s, {{"steps", plan.steps}, {"expansion", plan.expansion}, {"model_id", acts.model_id}});
    out[site] = std::move(s);
  }
  return out;
}

}  // namespace rotaudit::experiments
