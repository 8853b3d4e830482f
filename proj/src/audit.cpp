#include "rotaudit/audit.hpp"

#include <cmath>
#include <stdexcept>

namespace rotaudit::audit {

namespace {

nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json SiteAudit::to_json() const {
  return {{"site", site},
          {"d", d},
          {"self_ev", self_ev},
          {"naive_ev", naive_ev},
          {"rotated_ev", rotated_ev},
          {"residual_mse", fit.residual_mse},
          {"frob_from_identity", fit.frob_from_identity},
          {"frob_prediction", frob_prediction},
          {"det", fit.det},
          {"rank", fit.rank},
          {"eigen_angles", angles},
          {"haar_angles", haar_angles},
          {"ks_vs_haar", {{"statistic", ks_vs_haar.statistic}, {"p_value", ks_vs_haar.p_value}}},
          {"permutation_distance", permutation_distance},
          {"firing", {{"mean_r_rotated", finite_or_null(firing_r_rotated)},
                      {"mean_r_naive", finite_or_null(firing_r_naive)},
                      {"scored_features", firing_scored}}}};
}

const SiteAudit& AuditReport::site(const std::string& name) const {
  for (const auto& s : sites)
    if (s.site == name) return s;
  throw std::out_of_range("audit report has no site " + name);
}

nlohmann::json AuditReport::to_json() const {
  nlohmann::json j = io::report_header("audit", {});
  j["src"] = src_id;
  j["ref"] = ref_id;
  j["fit_rows"] = fit_rows;
  j["eval_rows"] = eval_rows;
  j["sites"] = nlohmann::json::array();
  for (const auto& s : sites) j["sites"].push_back(s.to_json());
  return j;
}

SiteAudit audit_site(const std::string& site, const MatD& src, const MatD& ref, const sae::SAEModel& sae_ref, Rng& rng) {
  if (src.rows() != ref.rows() || src.cols() != ref.cols())
    throw std::invalid_argument("audit_site: " + site + " src and ref shapes differ");
  if (sae_ref.d() != ref.cols()) throw std::invalid_argument("audit_site: " + site + " SAE width mismatch");
  const Eigen::Index half = src.rows() / 2;
  if (half < 2) throw std::invalid_argument("audit_site: " + site + " has too few rows");
  const Eigen::Index rest = src.rows() - half;
  SiteAudit a;
  a.site = site;
  a.d = static_cast<int>(src.cols());
  a.fit = rotation::fit_procrustes(src.topRows(half), ref.topRows(half));
  a.fit.src = "src:" + site;
  a.fit.ref = "ref:" + site;
  const MatD src_eval = src.bottomRows(rest);
  const MatD ref_eval = ref.bottomRows(rest);
  a.self_ev = sae::explained_variance(sae_ref, ref_eval);
  a.naive_ev = sae::explained_variance(sae_ref, src_eval);
  a.rotated_ev = sae::explained_variance(sae_ref, src_eval, a.fit);
  a.frob_prediction = rotation::frob_identity_prediction(a.d);
  a.angles = rotation::eigen_angles(a.fit.R);
  a.haar_angles = rotation::eigen_angles(rotation::haar_sample(a.d, rng, a.fit.det > 0 ? 1 : -1));
  a.ks_vs_haar = rotation::ks_two_sample(a.angles, a.haar_angles);
  a.permutation_distance = rotation::best_permutation_distance(a.fit.R).distance;
  const auto rot = sae::firing_correlation(sae_ref, ref_eval, src_eval, &a.fit);
  const auto raw = sae::firing_correlation(sae_ref, ref_eval, src_eval, nullptr);
  a.firing_r_rotated = sae::finite_mean(rot);
  a.firing_r_naive = sae::finite_mean(raw);
  for (double r : rot) a.firing_scored += std::isfinite(r);
  return a;
}

AuditReport audit_pair(const io::ActsBundle& src, const io::ActsBundle& ref,
                       const std::map<std::string, sae::SAEModel>& sae_ref, std::uint64_t seed) {
  if (src.sites != ref.sites) throw std::invalid_argument("audit_pair: site lists differ between bundles");
  if (src.n_rows != ref.n_rows) throw std::invalid_argument("audit_pair: bundles have different row counts");
  AuditReport r;
  r.src_id = src.model_id + (src.revision.empty() ? "" : "@" + src.revision);
  r.ref_id = ref.model_id + (ref.revision.empty() ? "" : "@" + ref.revision);
  r.fit_rows = src.n_rows / 2;
  r.eval_rows = src.n_rows - r.fit_rows;
  Rng rng(seed);
  for (const auto& s : src.sites) {
    auto it = sae_ref.find(s);
    if (it == sae_ref.end()) throw std::invalid_argument("audit_pair: no reference SAE for site " + s);
    r.sites.push_back(audit_site(s, src.site(s).cast<double>(), ref.site(s).cast<double>(), it->second, rng));
  }
  return r;
}

io::ActsBundle bundle_from_model(const model::WeightsF& w, const std::vector<dyck::LabeledSequence>& seqs,
                                 const std::string& model_id, const std::vector<std::string>& sites) {
  const auto batch = model::PackedBatch::from(seqs);
  const auto pass = model::forward(w, batch);
  io::ActsBundle b;
  b.model_id = model_id;
  b.sites = sites;
  b.d_model = w.config.d_model;
  b.n_rows = batch.rows();
  b.token_batch = {{"n_sequences", batch.n_sequences()}, {"rows", batch.rows()}};
  for (const auto& s : sites) b.acts[s] = pass.site(s);
  return b;
}

std::vector<std::string> internal_sites(const model::ModelConfig& c) {
  auto all = model::residual_sites(c);
  return {all.begin() + 1, all.end() - 1};
}

}  // namespace rotaudit::audit
