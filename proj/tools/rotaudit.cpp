// rotaudit: command-line front end over the library. Every subcommand writes
// JSON (and CSV where a figure consumes it) under --out, which defaults to
// $ROTAUDIT_EXPERIMENTS_DIR or ./experiments.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rotaudit/audit.hpp"
#include "rotaudit/bars.hpp"
#include "rotaudit/experiments.hpp"
#include "rotaudit/figures.hpp"
#include "rotaudit/io.hpp"
#include "rotaudit/polyhedral.hpp"
#include "rotaudit/steering.hpp"
#include "rotaudit/symmetry.hpp"

using namespace rotaudit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string scale = "desk";
  std::string out;

  experiments::DeskSetup setup() const {
    return experiments::setup_for_scale(out.empty() ? io::experiments_dir() : fs::path(out), scale);
  }
};

void emit(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    io::write_json(path, j);
    std::cerr << "wrote " << path << '\n';
  }
}

// A model argument is a checkpoint path, or "A:<seed>" / "B:<seed>" naming a
// trained cohort member (optionally "@<step>" for a saved checkpoint).
model::WeightsF resolve_model(const experiments::DeskSetup& s, const std::string& spec) {
  if (spec.size() > 2 && spec[1] == ':' && (spec[0] == 'A' || spec[0] == 'B')) {
    const auto& cohort = s.cohort(spec.substr(0, 1));
    const auto at = spec.find('@');
    const std::uint64_t seed = std::stoull(spec.substr(2, at == std::string::npos ? std::string::npos : at - 2));
    const train::SeedPaths p{s.cohort_dir(cohort), seed};
    const auto path = at == std::string::npos ? p.final_checkpoint() : p.checkpoint(std::stoi(spec.substr(at + 1)));
    if (!fs::exists(path)) throw std::runtime_error("no checkpoint " + path.string() + " (run `rotaudit train` first)");
    return io::load_checkpoint(path);
  }
  return io::load_checkpoint(spec);
}

// A bundle argument is a bundle directory, or anything resolve_model accepts,
// in which case activations are extracted on the fixed audit batch.
io::ActsBundle resolve_bundle(const experiments::DeskSetup& s, const std::string& spec,
                              const std::vector<std::string>& sites) {
  if (fs::is_directory(spec)) return io::ingest_bundle(spec);
  const auto w = resolve_model(s, spec);
  return audit::bundle_from_model(w, experiments::audit_batch(s), spec,
                                  sites.empty() ? audit::internal_sites(w.config) : sites);
}

std::vector<std::string> parse_sites(const std::string& s) {
  if (s.empty() || s == "all") return {};
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
  return out;
}

MatD load_rotation(const std::string& path) {
  if (fs::path(path).extension() == ".npy") return io::load_array<double>(path);
  const auto j = io::read_json(path);
  const auto rows = j.at("R").get<std::vector<std::vector<double>>>();
  MatD r(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw std::runtime_error("rotation in " + path + " is not square");
    for (std::size_t k = 0; k < rows.size(); ++k) r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  }
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-hypothesis audit toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for sampling and optimisation")->capture_default_str();
  app.add_option("--scale", g.scale, "Model scale")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  app.add_option("--out", g.out, "Output root (default $ROTAUDIT_EXPERIMENTS_DIR or ./experiments)");

  // train ------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train a cohort (cached checkpoints are reused)");
  std::string cohort_name = "B";
  bool length_restricted = false, verbose = false;
  train_cmd->add_option("--cohort", cohort_name, "A (shared frozen I/O) or B (independent init)")->capture_default_str();
  train_cmd->add_flag("--length-restricted", length_restricted, "Cap training lengths below the long held-out range");
  train_cmd->add_flag("-v,--verbose", verbose, "Log progress");
  train_cmd->callback([&] {
    auto s = g.setup();
    if (length_restricted) {
      if (g.scale != "paper") throw CLI::ValidationError("--length-restricted", "only defined at paper scale");
      s.dists = dyck::TaskDistributions::paper_length_restricted();
      s.root /= "length_restricted";
    }
    const auto& c = s.cohort(cohort_name);
    const auto models = experiments::cohort_models(s, c, verbose);
    json summary = io::report_header("train", c.seeds);
    summary["cohort"] = c.name();
    summary["dir"] = s.cohort_dir(c).string();
    summary["parameters"] = s.model.parameter_count();
    emit(summary, "-");
  });

  // sae --------------------------------------------------------------------
  auto* sae_cmd = app.add_subcommand("sae", "Train per-site SAEs on one model's activations");
  std::string sae_model, sae_sites = "all";
  std::optional<double> sae_l1;
  int sae_steps = 6000, sae_expansion = 8;
  sae_cmd->add_option("--model", sae_model, "Checkpoint path, bundle dir, or A:<seed> / B:<seed>")->required();
  sae_cmd->add_option("--sites", sae_sites, "Comma-separated sites or 'all' (internal residual sites)");
  sae_cmd->add_option("--l1", sae_l1, "l1 coefficient (default: tuned per site for mean L0 in [8, 40])");
  sae_cmd->add_option("--steps", sae_steps)->capture_default_str();
  sae_cmd->add_option("--expansion", sae_expansion)->capture_default_str();
  sae_cmd->callback([&] {
    const auto s = g.setup();
    const auto sites = parse_sites(sae_sites);
    io::ActsBundle b;
    if (fs::is_directory(sae_model)) {
      b = io::ingest_bundle(sae_model);
    } else {
      const auto w = resolve_model(s, sae_model);
      b = audit::bundle_from_model(w, experiments::sae_batch(s), sae_model, sites.empty() ? audit::internal_sites(w.config) : sites);
    }
    experiments::SaePlan plan;
    plan.steps = sae_steps;
    plan.expansion = sae_expansion;
    plan.seed = g.seed;
    std::map<std::string, double> l1;
    if (sae_l1)
      for (const auto& site : b.sites) l1[site] = *sae_l1;
    std::string tag = b.model_id;
    for (char& ch : tag)
      if (ch == '/' || ch == ':' || ch == '@') ch = '_';
    const auto dir = s.root / "saes" / tag;
    const auto saes = experiments::cached_site_saes(b, plan, dir, sae_l1 ? &l1 : nullptr);
    json j = io::report_header("sae", {g.seed});
    j["dir"] = dir.string();
    for (const auto& [site, m] : saes)
      j["sites"][site] = {{"l1_coeff", m.l1_coeff},
                          {"l0", sae::mean_l0(m, b.site(site).cast<double>())},
                          {"ev", sae::explained_variance(m, b.site(site).cast<double>())}};
    emit(j, "-");
  });

  // audit ------------------------------------------------------------------
  auto* audit_cmd = app.add_subcommand("audit", "Per-site rotation audit of src against ref");
  std::string audit_src, audit_ref, audit_sites = "all", audit_sae_dir, audit_report, audit_rot_dir;
  double audit_l1 = 0.1;
  audit_cmd->add_option("--src", audit_src, "Checkpoint, bundle dir, or A:<seed>[@step] / B:<seed>[@step]")->required();
  audit_cmd->add_option("--ref", audit_ref, "Same forms as --src")->required();
  audit_cmd->add_option("--sites", audit_sites, "Comma-separated sites or 'all'");
  audit_cmd->add_option("--sae-dir", audit_sae_dir, "Directory of <site>.sae files for ref (default: train them)");
  audit_cmd->add_option("--l1", audit_l1, "l1 for SAEs trained here")->capture_default_str();
  audit_cmd->add_option("--report", audit_report, "Report path (default <out>/reports/audit_<seed>.json)");
  audit_cmd->add_option("--save-rotations", audit_rot_dir, "Write each site's fitted R as <dir>/<site>.npy");
  audit_cmd->callback([&] {
    const auto s = g.setup();
    const auto sites = parse_sites(audit_sites);
    const auto src = resolve_bundle(s, audit_src, sites);
    const auto ref = resolve_bundle(s, audit_ref, sites);
    std::map<std::string, sae::SAEModel> saes;
    if (!audit_sae_dir.empty()) {
      for (const auto& site : ref.sites) saes[site] = sae::load_sae(fs::path(audit_sae_dir) / (site + ".sae"));
    } else {
      experiments::SaePlan plan;
      plan.seed = g.seed;
      std::map<std::string, double> l1;
      for (const auto& site : ref.sites) l1[site] = audit_l1;
      saes = experiments::train_site_saes(ref, l1, plan);
    }
    const auto rep = audit::audit_pair(src, ref, saes, g.seed);
    if (!audit_rot_dir.empty())
      for (const auto& a : rep.sites) io::save_array(fs::path(audit_rot_dir) / (a.site + ".npy"), a.fit.R);
    emit(rep.to_json(), audit_report.empty() ? (s.root / "reports" / ("audit_" + std::to_string(g.seed) + ".json")).string()
                                             : audit_report);
  });

  // bars -------------------------------------------------------------------
  auto* bars_cmd = app.add_subcommand("bars", "Bars B, C and Pr");
  std::string bar = "b", bars_model, bars_reference = "oracle", bars_mode = "within", bars_report;
  int bars_samples = 1000000, bars_batch = 1024;
  bars_cmd->add_option("--bar", bar)->check(CLI::IsMember({"b", "c", "pr"}))->capture_default_str();
  bars_cmd->add_option("--model", bars_model, "Checkpoint or A:<seed> / B:<seed>")->required();
  bars_cmd->add_option("--reference", bars_reference, "'oracle' (labels) or a model; the anchor for cross mode")
      ->capture_default_str();
  bars_cmd->add_option("--mode", bars_mode)->check(CLI::IsMember({"within", "cross"}))->capture_default_str();
  bars_cmd->add_option("--samples", bars_samples, "Bar B sequences")->capture_default_str();
  bars_cmd->add_option("--batch", bars_batch, "Sequences in the ablation batch (C, Pr)")->capture_default_str();
  bars_cmd->add_option("--report", bars_report, "Report path (default <out>/reports/bar_<bar>.json)");
  bars_cmd->callback([&] {
    const auto s = g.setup();
    const auto w = resolve_model(s, bars_model);
    const auto report_path = bars_report.empty() ? (s.root / "reports" / ("bar_" + bar + ".json")).string() : bars_report;
    json j = io::report_header("bar", {g.seed});
    if (bar == "b") {
      bars::BarBOptions o;
      o.n_samples = bars_samples;
      o.seed = g.seed;
      std::optional<model::WeightsF> ref;
      if (bars_reference != "oracle") ref = resolve_model(s, bars_reference);
      j["bar"] = bars::bar_b(w, ref ? &*ref : nullptr, s.dists, o).to_json();
      emit(j, report_path);
      return;
    }
    const auto batch = bars::AblationBatch::make(dyck::sample_sequences(s.dists.train, static_cast<std::size_t>(bars_batch), g.seed));
    const std::string name = bar == "c" ? "C" : "Pr";
    bars::ComponentEffects e;
    if (bars_mode == "within") {
      e = bars::component_effects(w, batch, 32);
      j["bar"] = bars::bar_c_pr(name, e.ig, e.measured, "within").to_json();
    } else {
      if (bars_reference == "oracle") throw CLI::ValidationError("--reference", "cross mode needs an anchor model");
      const auto anchor = resolve_model(s, bars_reference);
      const auto predicted = bars::component_effects(anchor, batch, 32);
      const auto al = symmetry::multistart_align(anchor, w);
      const auto aligned = symmetry::apply_symmetry(model::fold_gains(w), al.element);
      e = bars::component_effects(aligned, batch, 32);
      j["bar"] = bars::bar_c_pr(name, predicted.ig, e.measured, "cross").to_json();
      j["alignment"] = al.to_json();
      j["anchor_effects"] = predicted.to_json();
    }
    j["effects"] = e.to_json();
    emit(j, report_path);
    auto csv_path = fs::path(report_path).replace_extension(".csv");
    figures::emit_figures({figures::effects_report(g.seed, e)}, csv_path.parent_path() / (csv_path.stem().string() + "_figures"));
  });

  // align ------------------------------------------------------------------
  auto* align_cmd = app.add_subcommand("align", "Bar P: symmetry alignment of b onto a");
  std::string align_a, align_b, align_report, align_objective = "smooth_max";
  std::string align_refine = "none";
  std::vector<double> align_lambdas;
  int align_starts = 16;
  align_cmd->add_option("--a", align_a, "Anchor model")->required();
  align_cmd->add_option("--b", align_b, "Model aligned onto the anchor")->required();
  align_cmd->add_option("--starts", align_starts, "Head-permutation starts")->capture_default_str();
  align_cmd->add_option("--refine", align_refine, "Refinement after coordinate descent")
      ->check(CLI::IsMember({"none", "cayley"}));
  align_cmd->add_option("--objective", align_objective, "Cayley weight objective")
      ->check(CLI::IsMember({"global", "mean_tensor", "smooth_max"}))
      ->capture_default_str();
  align_cmd->add_option("--lambda-sweep", align_lambdas, "Joint weight/activation sweep values")->delimiter(',');
  align_cmd->add_option("--report", align_report, "Report path (default <out>/reports/align.json)");
  align_cmd->callback([&] {
    const auto s = g.setup();
    const auto a = resolve_model(s, align_a);
    const auto b = resolve_model(s, align_b);
    symmetry::AlignOptions o;
    o.n_perm_starts = align_starts;
    o.seed = g.seed;
    const auto base = symmetry::multistart_align(a, b, o);
    json j = io::report_header("align", {g.seed});
    j["baseline"] = base.to_json();
    j["bar_p"] = symmetry::bar_p(base).to_json();
    symmetry::CayleyOptions co;
    co.objective = align_objective == "global"        ? symmetry::WeightObjective::global
                   : align_objective == "mean_tensor" ? symmetry::WeightObjective::mean_tensor
                                                      : symmetry::WeightObjective::smooth_max;
    if (align_refine == "cayley") {
      const auto r = symmetry::cayley_refine(base, a, b, nullptr, co);
      j["cayley"] = r.to_json();
      j["bar_p"] = symmetry::bar_p(r).to_json();
    }
    if (!align_lambdas.empty()) {
      const auto acts = symmetry::residual_acts(
          a, b, model::PackedBatch::from(dyck::sample_sequences(s.dists.train, 200, g.seed + 1)));
      for (double lambda : align_lambdas) {
        co.lambda = lambda;
        j["lambda_sweep"].push_back(symmetry::cayley_refine(base, a, b, &acts, co).to_json());
      }
    }
    emit(j, align_report.empty() ? (s.root / "reports" / "align.json").string() : align_report);
  });

  // steer ------------------------------------------------------------------
  auto* steer_cmd = app.add_subcommand("steer", "Steering-vector transfer curves across a cohort");
  std::string steer_kind = "depth", steer_site = "resid_mid_1", steer_rot, steer_cohort = "A", steer_report;
  std::uint64_t steer_source = 0;
  std::vector<std::uint64_t> steer_targets{1, 2};
  std::vector<double> steer_alphas = steering::default_alphas();
  bool steer_fit = false;
  steer_cmd->add_option("--vector", steer_kind)->check(CLI::IsMember({"depth", "sticky", "closer"}))->capture_default_str();
  steer_cmd->add_option("--cohort", steer_cohort)->capture_default_str();
  steer_cmd->add_option("--source", steer_source, "Source seed")->capture_default_str();
  steer_cmd->add_option("--targets", steer_targets, "Target seeds")->delimiter(',');
  steer_cmd->add_option("--alphas", steer_alphas, "Dose grid (0 is added if missing)")->delimiter(',');
  steer_cmd->add_option("--site", steer_site)->capture_default_str();
  steer_cmd->add_option("--rotate-with", steer_rot, "Rotation for cross-seed application: .npy or JSON {\"R\": [[...]]}");
  steer_cmd->add_flag("--rotate-fit", steer_fit, "Fit the source->target rotation at the site and also report rotated curves");
  steer_cmd->add_option("--report", steer_report, "Report path (default <out>/reports/steer_<vector>.json)");
  steer_cmd->callback([&] {
    const auto s = g.setup();
    const std::string prefix = steer_cohort + ":";
    const auto source = resolve_model(s, prefix + std::to_string(steer_source));
    if (std::find(steer_alphas.begin(), steer_alphas.end(), 0.0) == steer_alphas.end()) steer_alphas.insert(steer_alphas.begin(), 0.0);
    const auto kind = steering::vector_kind_from_string(steer_kind);
    const auto vec = steering::build_vector(source, steer_site, dyck::sample_sequences(s.dists.train, 600, g.seed + 5150),
                                            steering::contrast_for(kind), kind, steer_source);
    const auto eval = dyck::sample_sequences(s.dists.train, 400, g.seed + 5151);
    std::optional<MatD> fixed;
    if (!steer_rot.empty()) fixed = load_rotation(steer_rot);
    std::vector<steering::TransferCurve> curves;
    std::vector<steering::RegimeResult> regimes;
    for (auto t : steer_targets) {
      const auto target = resolve_model(s, prefix + std::to_string(t));
      auto add = [&](const MatD* r) {
        auto c = steering::transfer_curve(vec, source, target, eval, steer_alphas, r);
        c.target_seed = t;
        curves.push_back(c);
        regimes.push_back(steering::classify_regime(c));
      };
      add(fixed ? &*fixed : nullptr);
      if (steer_fit) {
        const auto batch = model::PackedBatch::from(dyck::sample_sequences(s.dists.train, 600, g.seed + 5152));
        const auto fit = rotation::fit_procrustes(model::forward(source, batch).site(steer_site).cast<double>(),
                                                  model::forward(target, batch).site(steer_site).cast<double>());
        add(&fit.R);
      }
    }
    auto j = figures::steering_report(curves, regimes);
    j["vector"] = vec.to_json();
    const auto path = steer_report.empty() ? (s.root / "reports" / ("steer_" + steer_kind + ".json")).string() : steer_report;
    emit(j, path);
    figures::emit_figures({j}, fs::path(path).parent_path() / (fs::path(path).stem().string() + "_figures"));
  });

  // lens4 ------------------------------------------------------------------
  auto* lens_cmd = app.add_subcommand("lens4", "Polyhedral activation-pattern census of one MLP layer");
  int lens_layer = 0, lens_seqs = 4000, lens_cells = 20;
  std::string lens_model = "B:100", lens_report;
  lens_cmd->add_option("--layer", lens_layer)->check(CLI::Range(0, 1))->capture_default_str();
  lens_cmd->add_option("--model", lens_model)->capture_default_str();
  lens_cmd->add_option("--sequences", lens_seqs)->capture_default_str();
  lens_cmd->add_option("--cells", lens_cells, "Cells checked for affinity")->capture_default_str();
  lens_cmd->add_option("--report", lens_report, "Report path (default stdout)");
  lens_cmd->callback([&] {
    const auto s = g.setup();
    const auto w = resolve_model(s, lens_model);
    if (lens_layer >= w.config.n_layers) throw CLI::ValidationError("--layer", "model has fewer layers");
    const auto batch = model::PackedBatch::from(dyck::sample_sequences(s.dists.train, static_cast<std::size_t>(lens_seqs), g.seed + 9090));
    const MatD in = model::forward(w, batch).site("mlp_in_" + std::to_string(lens_layer)).cast<double>();
    const auto cen = polyhedral::census(w, lens_layer, in);
    Rng rng(g.seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, in.rows() - 1);
    double worst = 0.0;
    for (int i = 0; i < lens_cells; ++i) {
      const MatD probes = polyhedral::probes_in_cell(w, lens_layer, in.row(pick(rng)), 80, 0.05, rng);
      const MatD pre = probes.row(0) * w.blocks[static_cast<std::size_t>(lens_layer)].W_in.cast<double>();
      worst = std::max(worst, polyhedral::verify_affine_cell(w, lens_layer, polyhedral::pattern_of(pre.data(), w.config.d_mlp), probes));
    }
    json j = io::report_header("census", {g.seed});
    j["census"] = cen.to_json();
    j["affine_check"] = {{"cells", lens_cells}, {"max_error", worst}};
    emit(j, lens_report);
  });

  // figures ----------------------------------------------------------------
  auto* fig_cmd = app.add_subcommand("figures", "CSV figure data from a directory of reports");
  std::string fig_reports, fig_out;
  fig_cmd->add_option("--reports", fig_reports, "Report directory (default <out>/reports)");
  fig_cmd->add_option("--dir", fig_out, "Output directory (default <out>/figures)");
  fig_cmd->callback([&] {
    const auto s = g.setup();
    const auto in = fig_reports.empty() ? s.root / "reports" : fs::path(fig_reports);
    const auto out = fig_out.empty() ? s.root / "figures" : fs::path(fig_out);
    for (const auto& p : figures::emit_figures(figures::load_reports(in), out)) std::cout << p.string() << '\n';
  });

  // ingest -----------------------------------------------------------------
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate an extracted activation bundle");
  std::string ingest_dir;
  ingest_cmd->add_option("bundle", ingest_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);
  ingest_cmd->callback([&] {
    const auto b = io::ingest_bundle(ingest_dir);
    json j = io::report_header("ingest", {});
    j["model_id"] = b.model_id;
    j["revision"] = b.revision;
    j["d_model"] = b.d_model;
    j["n_rows"] = b.n_rows;
    j["token_batch"] = b.token_batch;
    for (const auto& site : b.sites) {
      const MatD x = b.site(site).cast<double>();
      const RowVecD mu = x.colwise().mean();
      j["sites"][site] = {{"mean_norm", mu.norm()}, {"variance", (x.rowwise() - mu).squaredNorm() / static_cast<double>(x.size())}};
    }
    emit(j, "-");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "rotaudit: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
