#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/io.hpp"
#include "rotaudit/model.hpp"
#include "rotaudit/rotation.hpp"
#include "rotaudit/sae.hpp"

// Per-site rotation audit of one (src, ref) activation pair: naive and
// post-rotation SAE transfer, Haar statistics of the fitted rotation, and the
// permutation-distance control.
namespace rotaudit::audit {

struct SiteAudit {
  std::string site;
  int d = 0;
  double self_ev = 0.0;     // ref SAE on held-out ref rows
  double naive_ev = 0.0;    // ref SAE on raw src rows
  double rotated_ev = 0.0;  // ref SAE on fit.apply(src rows)
  rotation::RotationFit fit;
  double frob_prediction = 0.0;  // sqrt(2d)
  std::vector<double> angles;
  std::vector<double> haar_angles;  // one Haar draw on the fit's det component
  rotation::KsResult ks_vs_haar;
  double permutation_distance = 0.0;
  double firing_r_rotated = 0.0;  // mean per-feature Pearson r, NaN if none scored
  double firing_r_naive = 0.0;
  int firing_scored = 0;

  nlohmann::json to_json() const;
};

struct AuditReport {
  std::string src_id, ref_id;
  std::int64_t fit_rows = 0, eval_rows = 0;
  std::vector<SiteAudit> sites;

  const SiteAudit& site(const std::string& name) const;
  nlohmann::json to_json() const;
};

/// Rows [0, n/2) fit the rotation, rows [n/2, n) evaluate it. Both matrices
/// must come from the same token batch.
SiteAudit audit_site(const std::string& site, const MatD& src, const MatD& ref, const sae::SAEModel& sae_ref, Rng& rng);

/// Audits every site listed in both bundles (same order as src). Throws
/// std::invalid_argument on a site or row-count mismatch, or a missing SAE.
AuditReport audit_pair(const io::ActsBundle& src, const io::ActsBundle& ref,
                       const std::map<std::string, sae::SAEModel>& sae_ref, std::uint64_t seed = 0);

/// Residual-site activations of `w` on `seqs`, packed row-wise.
io::ActsBundle bundle_from_model(const model::WeightsF& w, const std::vector<dyck::LabeledSequence>& seqs,
                                 const std::string& model_id, const std::vector<std::string>& sites);

/// Residual sites strictly between the embedding and the pre-unembed site,
/// in depth order.
std::vector<std::string> internal_sites(const model::ModelConfig& c);

}  // namespace rotaudit::audit
