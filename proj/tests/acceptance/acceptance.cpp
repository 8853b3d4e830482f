// End-to-end acceptance run at desk scale. Prints one PASS/FAIL line per
// criterion; the exit status is the number of failed criteria (capped).
//
// Trained cohorts, SAEs and reports are cached under the experiments
// directory (--experiments, else $ROTAUDIT_EXPERIMENTS_DIR, else
// ./experiments), so a second run only re-evaluates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
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
#include "rotaudit/rotation.hpp"
#include "rotaudit/steering.hpp"
#include "rotaudit/symmetry.hpp"

using namespace rotaudit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  std::string out(std::snprintf(nullptr, 0, f, xs...), '\0');
  std::snprintf(out.data(), out.size() + 1, f, xs...);
  return out;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void note(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

// Notes any seed whose held-out min accuracy (over heads and distributions)
// is below the desk training target.
void note_convergence(const experiments::DeskSetup& s, const train::CohortSpec& c) {
  for (const auto seed : c.seeds) {
    std::ifstream in(s.cohort_dir(c) / ("seed" + std::to_string(seed) + "_log.json"));
    if (!in) continue;
    const auto log = nlohmann::json::parse(in);
    double worst = 1.0;
    std::string where;
    for (const auto& [dist, accs] : log.at("evals").back().at("acc").items())
      for (std::size_t h = 0; h < accs.size(); ++h)
        if (accs[h].get<double>() < worst) {
          worst = accs[h].get<double>();
          where = dist + " head " + std::to_string(h);
        }
    if (worst < 0.999)
      note(fmt("seed %llu is below the 0.999 held-out accuracy target: %.4f on %s", (unsigned long long)seed, worst,
               where.c_str()));
  }
}

// Shared state, built lazily so single criteria can run alone.
struct Context {
  experiments::DeskSetup setup;
  fs::path reports;
  std::vector<model::WeightsF> cohort_a, cohort_b;
  std::map<std::uint64_t, std::map<std::string, sae::SAEModel>> saes_b;
  std::map<std::uint64_t, io::ActsBundle> audit_b;
  experiments::SaePlan plan;

  const std::vector<model::WeightsF>& a() {
    if (cohort_a.empty()) {
      cohort_a = experiments::cohort_models(setup, setup.cohort_a, true);
      note_convergence(setup, setup.cohort_a);
    }
    return cohort_a;
  }
  const std::vector<model::WeightsF>& b() {
    if (cohort_b.empty()) {
      cohort_b = experiments::cohort_models(setup, setup.cohort_b, true);
      note_convergence(setup, setup.cohort_b);
    }
    return cohort_b;
  }
  std::vector<std::pair<std::uint64_t, const model::WeightsF*>> all_seeds() {
    std::vector<std::pair<std::uint64_t, const model::WeightsF*>> out;
    for (std::size_t i = 0; i < a().size(); ++i) out.push_back({setup.cohort_a.seeds[i], &a()[i]});
    for (std::size_t i = 0; i < b().size(); ++i) out.push_back({setup.cohort_b.seeds[i], &b()[i]});
    return out;
  }

  // Reference SAEs for every cohort-B seed; l1 is tuned once on the anchor.
  const std::map<std::string, sae::SAEModel>& saes(std::size_t i) {
    const auto seed = setup.cohort_b.seeds[i];
    if (!saes_b.count(seed)) {
      const auto sites = audit::internal_sites(setup.model);
      const auto root = setup.root / "saes" / "B";
      const auto anchor_bundle =
          audit::bundle_from_model(b()[0], experiments::sae_batch(setup), "seed" + std::to_string(setup.cohort_b.seeds[0]), sites);
      const auto l1_path = root / "l1.json";
      std::map<std::string, double> l1;
      if (fs::exists(l1_path)) {
        l1 = io::read_json(l1_path).get<std::map<std::string, double>>();
      } else {
        note("tuning SAE l1 on the cohort-B anchor");
        l1 = experiments::tune_site_l1(anchor_bundle, plan);
        io::write_json(l1_path, l1);
      }
      const auto bundle = i == 0 ? anchor_bundle
                                 : audit::bundle_from_model(b()[i], experiments::sae_batch(setup), "seed" + std::to_string(seed), sites);
      note("SAEs for seed " + std::to_string(seed));
      saes_b[seed] = experiments::cached_site_saes(bundle, plan, root / ("seed" + std::to_string(seed)), &l1);
    }
    return saes_b[seed];
  }
  const io::ActsBundle& audit_bundle(std::size_t i) {
    const auto seed = setup.cohort_b.seeds[i];
    if (!audit_b.count(seed))
      audit_b[seed] = audit::bundle_from_model(b()[i], experiments::audit_batch(setup), "seed" + std::to_string(seed),
                                               audit::internal_sites(setup.model));
    return audit_b[seed];
  }
  void report(const std::string& name, const nlohmann::json& j) { io::write_json(reports / (name + ".json"), j); }
};

// ---------------------------------------------------------------------------

Outcome planted_rotation(Context&) {
  const auto t0 = Clock::now();
  Rng rng(1);
  const MatD a = random_normal<double>(4096, 64, rng);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const MatD q = rotation::haar_sample(64, rng, 0);
    const auto fit = rotation::fit_procrustes(a * q.transpose(), a);
    worst = std::max(worst, (fit.R - q).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 10.0,
          fmt("max|R-Q| = %.2e over 20 draws (limit 1e-5); %.2f s (limit 10 s)", worst, secs)};
}

Outcome haar_statistics(Context&) {
  const auto t0 = Clock::now();
  Rng rng(2);
  std::vector<double> frobs, pooled;
  for (int i = 0; i < 200; ++i) {
    const MatD q = rotation::haar_sample(64, rng);
    frobs.push_back((q - MatD::Identity(64, 64)).norm());
    const auto a = rotation::eigen_angles(q);
    pooled.insert(pooled.end(), a.begin(), a.end());
  }
  double mean = 0.0, var = 0.0;
  for (double f : frobs) mean += f / 200.0;
  for (double f : frobs) var += (f - mean) * (f - mean) / 199.0;
  const double pi = std::numbers::pi;
  const auto ks = rotation::ks_one_sample(pooled, [pi](double t) { return (t + pi) / (2.0 * pi); });
  const double secs = seconds_since(t0);
  const bool ok = std::abs(mean - 11.31) <= 0.05 && ks.p_value > 0.01 && std::sqrt(var) < 0.2 && secs < 30.0;
  return {ok, fmt("mean ||Q-I|| = %.4f (11.31 +- 0.05), sd %.3f; pooled angle KS vs uniform D = %.4f, p = %.3f "
                  "(> 0.01); %.1f s (limit 30 s)",
                  mean, std::sqrt(var), ks.statistic, ks.p_value, secs)};
}

Outcome desk_rotation(Context& ctx) {
  const auto t0 = Clock::now();
  const auto& seeds = ctx.setup.cohort_b.seeds;
  bool ok = true;
  double worst_naive = -1e300, worst_rot = 1e300, worst_gap = 0.0, frob_lo = 1e300, frob_hi = 0.0;
  nlohmann::json l0 = nlohmann::json::object();
  for (std::size_t r = 0; r < seeds.size(); ++r) {
    const auto& saes = ctx.saes(r);
    for (const auto& [site, s] : saes) l0["seed" + std::to_string(seeds[r])][site] = sae::mean_l0(s, ctx.audit_bundle(r).site(site).cast<double>());
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      if (s == r) continue;
      const auto rep = audit::audit_pair(ctx.audit_bundle(s), ctx.audit_bundle(r), saes, 17 + s * 10 + r);
      ctx.report("audit_B_" + std::to_string(seeds[s]) + "_to_" + std::to_string(seeds[r]), rep.to_json());
      for (const auto& a : rep.sites) {
        const double gap = std::abs(a.self_ev - a.rotated_ev);
        const double frob = a.fit.frob_from_identity;
        const bool site_ok = a.naive_ev < 0.0 && a.rotated_ev >= 0.9 && gap <= 0.05 && std::abs(frob - 8.0) <= 0.8;
        if (!site_ok)
          note(fmt("seed %llu -> %llu %s: naive %.3f rotated %.3f self %.3f frob %.3f", (unsigned long long)seeds[s],
                   (unsigned long long)seeds[r], a.site.c_str(), a.naive_ev, a.rotated_ev, a.self_ev, frob));
        ok = ok && site_ok;
        worst_naive = std::max(worst_naive, a.naive_ev);
        worst_rot = std::min(worst_rot, a.rotated_ev);
        worst_gap = std::max(worst_gap, gap);
        frob_lo = std::min(frob_lo, frob);
        frob_hi = std::max(frob_hi, frob);
      }
    }
  }
  ctx.report("sae_l0_B", l0);
  return {ok, fmt("6 ordered pairs x 5 sites: max naive EV %.3f (< 0), min rotated EV %.3f (>= 0.9), max |self-rotated| "
                  "%.3f (<= 0.05), ||R-I|| in [%.2f, %.2f] (8.0 +- 10%%); %.0f s",
                  worst_naive, worst_rot, worst_gap, frob_lo, frob_hi, seconds_since(t0))};
}

bars::AblationBatch effects_batch(const Context& ctx, int n) {
  return bars::AblationBatch::make(dyck::sample_sequences(ctx.setup.dists.train, static_cast<std::size_t>(n), 777));
}

Outcome ig_vs_ap(Context& ctx) {
  bool ok = true;
  double min_ig = 1.0, worst_secs = 0.0;
  std::string per_seed;
  const auto batch = effects_batch(ctx, 1024);
  for (const auto& [seed, w] : ctx.all_seeds()) {
    const auto t0 = Clock::now();
    const auto e = bars::component_effects(*w, batch, 32);
    const double secs = seconds_since(t0);
    ctx.report("effects_seed" + std::to_string(seed), figures::effects_report(seed, e));
    ok = ok && e.r_ig > 0.99 && e.r_ap < e.r_ig && secs < 300.0;
    min_ig = std::min(min_ig, e.r_ig);
    worst_secs = std::max(worst_secs, secs);
    per_seed += fmt(" %llu:(ig %.4f, ap %.3f)", (unsigned long long)seed, e.r_ig, e.r_ap);
  }
  return {ok, fmt("min r(IG) %.4f (> 0.99), r(AP) < r(IG) on every seed;%s; slowest seed %.0f s (limit 300 s)", min_ig,
                  per_seed.c_str(), worst_secs)};
}

Outcome ig_completeness(Context& ctx) {
  const auto t0 = Clock::now();
  const auto batch = effects_batch(ctx, 256);
  double worst = 0.0;
  std::string where;
  for (const auto& [seed, w] : ctx.all_seeds())
    for (const auto& c : model::enumerate_components(w->config)) {
      const double err = std::abs(bars::ig_predict(*w, batch, c, 256) - bars::mean_ablation_effect(*w, batch, c));
      if (err > worst) {
        worst = err;
        where = "seed " + std::to_string(seed) + " " + c.name();
      }
    }
  return {worst < 1e-3, fmt("max |IG(256) - mean-ablation| = %.2e nats at %s over 6 seeds x 10 components (< 1e-3); %.0f s",
                            worst, where.c_str(), seconds_since(t0))};
}

Outcome bar_machinery(Context& ctx) {
  const auto t0 = Clock::now();
  bars::BarBOptions opt;
  opt.n_samples = 60000;
  bars::BarBOptions small = opt;
  small.n_samples = 3000;
  const auto& w0 = ctx.a()[0];
  const double self = bars::bar_b(w0, &w0, ctx.setup.dists, small).value;
  bool ok = self == 0.0;
  double lo = 1e300, hi = 0.0, min_ratio = 1e300, min_decoy_mse = 1e300, max_other = 0.0;
  bool depth_dominant = true, isolated = true;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [seed, w] : ctx.all_seeds()) {
    const auto real = bars::bar_b(*w, nullptr, ctx.setup.dists, opt);
    const auto decoy_w = model::decoy_depth_unembed(*w);
    const auto decoy = bars::bar_b(decoy_w, nullptr, ctx.setup.dists, opt);
    const auto& ph = real.breakdown["per_head"];
    const bool dom = ph["depth"].get<double>() > ph["tok"].get<double>() && ph["depth"].get<double>() > ph["valid"].get<double>();
    const double ratio = decoy.value / real.value;
    const auto align = symmetry::multistart_align(*w, decoy_w);
    double other = 0.0;
    for (const auto& [name, mse] : align.per_tensor_mse)
      if (name != "unembed.W_U_depth") other = std::max(other, mse);
    const bool iso = align.max_tensor == "unembed.W_U_depth" && align.max_mse > bars::kBarPThreshold && other < bars::kBarPThreshold;
    rows.push_back({{"seed", seed}, {"bar_b", real.to_json()}, {"decoy_bar_b", decoy.to_json()}, {"ratio", ratio},
                    {"decoy_alignment", align.to_json()}});
    lo = std::min(lo, real.value);
    hi = std::max(hi, real.value);
    min_ratio = std::min(min_ratio, ratio);
    min_decoy_mse = std::min(min_decoy_mse, align.max_mse);
    max_other = std::max(max_other, other);
    depth_dominant = depth_dominant && dom;
    isolated = isolated && iso;
    note(fmt("seed %llu: Bar B %.3e (tok %.2e depth %.2e valid %.2e), decoy %.3e, decoy Bar P max %.3e at %s",
             (unsigned long long)seed, real.value, ph["tok"].get<double>(), ph["depth"].get<double>(),
             ph["valid"].get<double>(), decoy.value, align.max_mse, align.max_tensor.c_str()));
  }
  ctx.report("bars_desk", {{"self_bar_b", self}, {"seeds", rows}});
  ok = ok && lo >= 5e-5 && hi <= 1e-3 && depth_dominant && min_ratio >= 100.0 && isolated;
  return {ok, fmt("bar_b(m, m) = %g; trained Bar B in [%.2e, %.2e] (band [5e-5, 1e-3]), depth head dominant: %s; "
                  "min decoy/real %.0f (>= 100); decoy Bar P min max-MSE %.3e on unembed.W_U_depth, other tensors <= %.1e: %s; %.0f s",
                  self, lo, hi, depth_dominant ? "yes" : "no", min_ratio, min_decoy_mse, max_other,
                  isolated ? "isolated" : "not isolated", seconds_since(t0))};
}

Outcome alignment_suite(Context& ctx) {
  const auto t0 = Clock::now();
  const auto& A = ctx.a();
  const auto& seeds = ctx.setup.cohort_a.seeds;
  const auto self = symmetry::multistart_align(A[0], A[0]);
  const auto folded = model::fold_gains(A[0]);
  double planted = 0.0;
  Rng rng(77);
  for (int i = 0; i < 20; ++i) {
    const auto g = symmetry::SymmetryElement::random(folded.config, rng);
    symmetry::AlignOptions o;
    o.n_perm_starts = 4;
    o.seed = static_cast<std::uint64_t>(i);
    planted = std::max(planted, symmetry::multistart_align(folded, symmetry::apply_symmetry(folded, g), o).max_mse);
  }
  note(fmt("self %.2e, planted %.2e", self.max_mse, planted));
  bool cross_ok = true, cayley_ok = true, sweep_ok = true;
  double min_cross = 1e300, min_gain = 1e300, min_sweep = 1e300;
  nlohmann::json pairs = nlohmann::json::array();
  const auto sweep_batch = model::PackedBatch::from(dyck::sample_sequences(ctx.setup.dists.train, 200, 4040));
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = i + 1; j < A.size(); ++j) {
      const auto base = symmetry::multistart_align(A[i], A[j]);
      const auto refined = symmetry::cayley_refine(base, A[i], A[j], nullptr);
      const double gain = 1.0 - refined.max_mse / base.max_mse;
      const auto acts = symmetry::residual_acts(A[i], A[j], sweep_batch);
      nlohmann::json sweep = nlohmann::json::array();
      std::string sweep_txt;
      for (double lambda : {0.1, 1.0, 10.0, 100.0}) {
        symmetry::CayleyOptions co;
        co.lambda = lambda;
        const auto joint = symmetry::cayley_refine(base, A[i], A[j], &acts, co);
        sweep.push_back(joint.to_json());
        sweep_ok = sweep_ok && joint.max_mse >= bars::kBarPThreshold;
        min_sweep = std::min(min_sweep, joint.max_mse);
        sweep_txt += fmt(" %g:%.3f", lambda, joint.max_mse);
      }
      note(fmt("pair (%llu, %llu): baseline %.4f at %s (config %d), cayley %.4f at %s (-%.0f%%), lambda sweep%s",
               (unsigned long long)seeds[i], (unsigned long long)seeds[j], base.max_mse, base.max_tensor.c_str(),
               base.config_index, refined.max_mse, refined.max_tensor.c_str(), 100 * gain, sweep_txt.c_str()));
      pairs.push_back({{"a", seeds[i]}, {"b", seeds[j]}, {"baseline", base.to_json()}, {"cayley", refined.to_json()},
                       {"improvement", gain}, {"lambda_sweep", sweep}});
      cross_ok = cross_ok && base.max_mse > 0.05;
      cayley_ok = cayley_ok && gain >= 0.25;
      min_cross = std::min(min_cross, base.max_mse);
      min_gain = std::min(min_gain, gain);
    }
  ctx.report("alignment_A", {{"self", self.to_json()}, {"planted_worst_max_mse", planted}, {"pairs", pairs}});
  const bool ok = self.max_mse <= 1e-8 && planted <= 1e-6 && cross_ok && cayley_ok && sweep_ok;
  return {ok, fmt("self max MSE %.1e (<= 1e-8); planted worst %.1e over 20 (<= 1e-6); cross-seed baseline min %.4f "
                  "(> 0.05); Cayley min improvement %.0f%% (>= 25%%); lambda sweep min max-MSE %.4f (>= 1e-3 at every "
                  "lambda); %.0f s",
                  self.max_mse, planted, min_cross, 100 * min_gain, min_sweep, seconds_since(t0))};
}

// Mean |log(cross / within)| over the nonzero doses where both are positive.
double ratio_distance(const steering::TransferCurve& c) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < c.alphas.size(); ++i)
    if (c.alphas[i] != 0.0 && c.within[i] > 0.0 && c.cross[i] > 0.0) {
      sum += std::abs(std::log(c.cross[i] / c.within[i]));
      ++n;
    }
  return n ? sum / n : INFINITY;
}

Outcome steering_regimes(Context& ctx) {
  const auto t0 = Clock::now();
  const auto& A = ctx.a();
  const auto& seeds = ctx.setup.cohort_a.seeds;
  const std::string site = "resid_mid_1";
  const auto build_seqs = dyck::sample_sequences(ctx.setup.dists.train, 600, 5150);
  const auto eval_seqs = dyck::sample_sequences(ctx.setup.dists.train, 400, 5151);
  const auto fit_seqs = dyck::sample_sequences(ctx.setup.dists.train, 600, 5152);
  const auto alphas = steering::default_alphas();
  std::vector<steering::TransferCurve> curves;
  std::vector<steering::RegimeResult> regimes;
  bool ok = true;
  std::string txt;
  for (auto kind : {steering::VectorKind::depth, steering::VectorKind::sticky, steering::VectorKind::closer}) {
    const auto vec = steering::build_vector(A[0], site, build_seqs, steering::contrast_for(kind), kind, seeds[0]);
    for (std::size_t t = 1; t < A.size(); ++t) {
      auto curve = steering::transfer_curve(vec, A[0], A[t], eval_seqs, alphas);
      curve.target_seed = seeds[t];
      const auto regime = steering::classify_regime(curve);
      curves.push_back(curve);
      regimes.push_back(regime);
      txt += fmt(" %s->%llu %s (ratio %.2f at alpha %g, %.2f at alpha %g)", steering::to_string(kind).c_str(),
                 (unsigned long long)seeds[t], steering::to_string(regime.regime).c_str(), regime.small_alpha_ratio,
                 alphas[1], regime.matched_ratio, regime.matched_alpha);
      if (kind == steering::VectorKind::depth) ok = ok && regime.regime == steering::Regime::clean;
      if (kind == steering::VectorKind::closer) {
        ok = ok && regime.regime == steering::Regime::inverted;
        const auto batch = model::PackedBatch::from(fit_seqs);
        const MatD src = model::forward(A[0], batch).site(site).cast<double>();
        const MatD ref = model::forward(A[t], batch).site(site).cast<double>();
        const auto fit = rotation::fit_procrustes(src, ref);
        auto rotated = steering::transfer_curve(vec, A[0], A[t], eval_seqs, alphas, &fit.R);
        rotated.target_seed = seeds[t];
        const auto rot_regime = steering::classify_regime(rotated);
        curves.push_back(rotated);
        regimes.push_back(rot_regime);
        const double d_raw = ratio_distance(curve), d_rot = ratio_distance(rotated);
        const bool closer_to_one = d_rot < d_raw;
        ok = ok && closer_to_one;
        txt += fmt(" [rotated: ratio %.2f at alpha %g, %.2f at alpha %g; mean |log ratio| %.3f -> %.3f, %s]",
                   rot_regime.small_alpha_ratio, alphas[1], rot_regime.matched_ratio, rot_regime.matched_alpha, d_raw,
                   d_rot, closer_to_one ? "closer to 1" : "NOT closer to 1");
      }
    }
  }
  ctx.report("steering_A", figures::steering_report(curves, regimes));
  return {ok, fmt("site %s, source seed %llu:%s; %.0f s", site.c_str(), (unsigned long long)seeds[0], txt.c_str(),
                  seconds_since(t0))};
}

Outcome polyhedral_census(Context& ctx) {
  const auto t0 = Clock::now();
  const auto seqs = dyck::sample_sequences(ctx.setup.dists.train, 4000, 9090);
  const auto batch = model::PackedBatch::from(seqs);
  bool ordered = true;
  double worst = 0.0;
  std::string txt;
  nlohmann::json rows = nlohmann::json::array();
  Rng rng(123);
  for (const auto& [seed, w] : ctx.all_seeds()) {
    const auto pass = model::forward(*w, batch);
    std::array<std::int64_t, 2> unique{};
    for (int layer = 0; layer < 2; ++layer) {
      const MatD in = pass.site("mlp_in_" + std::to_string(layer)).cast<double>();
      const auto cen = polyhedral::census(*w, layer, in);
      unique[static_cast<std::size_t>(layer)] = cen.n_unique_patterns;
      rows.push_back({{"seed", seed}, {"census", cen.to_json()}});
      std::uniform_int_distribution<Eigen::Index> pick(0, in.rows() - 1);
      for (int i = 0; i < 20; ++i) {
        const Eigen::Index r = pick(rng);
        const MatD probes = polyhedral::probes_in_cell(*w, layer, in.row(r), 80, 0.05, rng);
        const MatD pre = probes.row(0) * w->blocks[static_cast<std::size_t>(layer)].W_in.cast<double>();
        const auto pattern = polyhedral::pattern_of(pre.data(), w->config.d_mlp);
        worst = std::max(worst, polyhedral::verify_affine_cell(*w, layer, pattern, probes));
      }
    }
    ordered = ordered && unique[1] > unique[0];
    txt += fmt(" %llu:(%lld, %lld)", (unsigned long long)seed, (long long)unique[0], (long long)unique[1]);
  }
  ctx.report("polyhedral_desk", {{"n_rows", batch.rows()}, {"censuses", rows}});
  return {ordered && worst < 1e-5,
          fmt("unique patterns (layer 0, layer 1) on %d rows:%s; layer 1 > layer 0 on every seed: %s; affine max error "
              "%.1e over 240 cells (< 1e-5); %.0f s",
              batch.rows(), txt.c_str(), ordered ? "yes" : "no", worst, seconds_since(t0))};
}

Outcome cross_checkpoint(Context& ctx) {
  const auto t0 = Clock::now();
  const auto& seeds = ctx.setup.cohort_b.seeds;
  const auto sites = audit::internal_sites(ctx.setup.model);
  bool ok = true;
  std::string txt;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    ctx.b();
    const auto mid = experiments::mid_checkpoint(ctx.setup, ctx.setup.cohort_b, seeds[i]);
    const auto src = audit::bundle_from_model(mid, experiments::audit_batch(ctx.setup),
                                              "seed" + std::to_string(seeds[i]) + "@" + std::to_string(ctx.setup.mid_checkpoint), sites);
    const auto rep = audit::audit_pair(src, ctx.audit_bundle(i), ctx.saes(i), 900 + i);
    ctx.report("audit_ckpt_seed" + std::to_string(seeds[i]), rep.to_json());
    double prev = 1e300;
    bool ev_ok = true, mono = true;
    std::string frobs;
    for (const auto& a : rep.sites) {
      ev_ok = ev_ok && a.rotated_ev > a.naive_ev;
      mono = mono && a.fit.frob_from_identity <= prev + 1e-9;
      prev = a.fit.frob_from_identity;
      frobs += fmt(" %.2f", a.fit.frob_from_identity);
      note(fmt("seed %llu %s: naive %.3f rotated %.3f self %.3f frob %.3f", (unsigned long long)seeds[i], a.site.c_str(),
               a.naive_ev, a.rotated_ev, a.self_ev, a.fit.frob_from_identity));
    }
    ok = ok && ev_ok && mono;
    txt += fmt(" %llu: EV %s, ||R-I|| by depth%s (%s);", (unsigned long long)seeds[i], ev_ok ? "ok" : "FAIL",
               frobs.c_str(), mono ? "non-increasing" : "NOT non-increasing");
  }
  return {ok, fmt("step %d vs final:%s %.0f s", ctx.setup.mid_checkpoint, txt.c_str(), seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale acceptance run"};
  std::string experiments_root;
  std::vector<int> only;
  app.add_option("--experiments", experiments_root, "Experiments root (cohorts, SAEs, reports)");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.setup = experiments::desk_setup(experiments_root.empty() ? io::experiments_dir() : fs::path(experiments_root));
  ctx.reports = ctx.setup.root / "reports";

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria = {
      {"planted-rotation recovery", planted_rotation},
      {"Haar statistics", haar_statistics},
      {"desk rotation hypothesis", desk_rotation},
      {"IG vs AP", ig_vs_ap},
      {"IG completeness", ig_completeness},
      {"bar machinery", bar_machinery},
      {"alignment suite", alignment_suite},
      {"steering regimes", steering_regimes},
      {"polyhedral census", polyhedral_census},
      {"cross-checkpoint audit", cross_checkpoint},
  };
  int failed = 0, ran = 0;
  std::ostringstream lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    ++ran;
    const std::string line = "criterion " + std::to_string(id) + " [" + (o.pass ? "PASS" : "FAIL") + "] " +
                             criteria[i].first + ": " + o.detail;
    std::cout << line << std::endl;
    lines << line << '\n';
  }
  try {
    const auto written = figures::emit_figures(figures::load_reports(ctx.reports), ctx.setup.root / "figures");
    std::cerr << "  .. wrote " << written.size() << " figure files under " << (ctx.setup.root / "figures") << std::endl;
  } catch (const std::exception& e) {
    std::cerr << "  .. figures skipped: " << e.what() << std::endl;
  }
  const std::string summary =
      "acceptance finished: " + std::to_string(ran - failed) + " of " + std::to_string(ran) + " criteria passed";
  std::cout << summary << std::endl;
  std::ofstream(ctx.setup.root / "acceptance.txt") << lines.str() << summary << '\n';
  return std::min(failed, 100);
}
