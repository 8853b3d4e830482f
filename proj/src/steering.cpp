#include "rotaudit/steering.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rotaudit::steering {

using model::ForwardPass;
using model::PackedBatch;
using model::WeightsF;

std::string to_string(VectorKind k) {
  switch (k) {
    case VectorKind::depth: return "depth";
    case VectorKind::sticky: return "sticky";
    case VectorKind::closer: return "closer";
  }
  return "?";
}

VectorKind vector_kind_from_string(const std::string& s) {
  if (s == "depth") return VectorKind::depth;
  if (s == "sticky") return VectorKind::sticky;
  if (s == "closer") return VectorKind::closer;
  throw std::invalid_argument("unknown steering vector: " + s);
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::clean: return "clean";
    case Regime::partial: return "partial";
    case Regime::inverted: return "inverted";
  }
  return "?";
}

Contrast contrast_for(VectorKind k) {
  using dyck::LabeledSequence;
  switch (k) {
    case VectorKind::depth:
      return {"depth>=4", "depth<=1", [](const LabeledSequence& s, int i) { return s.depth[i] >= 4; },
              [](const LabeledSequence& s, int i) { return s.depth[i] <= 1; }};
    case VectorKind::sticky:
      return {"flag=0", "flag=1", [](const LabeledSequence& s, int i) { return s.valid[i] == 0; },
              [](const LabeledSequence& s, int i) { return s.valid[i] == 1; }};
    case VectorKind::closer:
      return {"closer", "opener", [](const LabeledSequence& s, int i) { return dyck::is_closer(s.tokens[i]); },
              [](const LabeledSequence& s, int i) { return dyck::is_opener(s.tokens[i]); }};
  }
  throw std::invalid_argument("contrast_for: bad kind");
}

nlohmann::json SteeringVector::to_json() const {
  return {{"site", site},
          {"kind", to_string(kind)},
          {"positive", positive},
          {"negative", negative},
          {"source_seed", source_seed},
          {"n_pos", n_pos},
          {"n_neg", n_neg},
          {"norm", v.norm()},
          {"v", std::vector<double>(v.data(), v.data() + v.size())}};
}

SteeringVector build_vector(const WeightsF& w, const std::string& site, const std::vector<dyck::LabeledSequence>& seqs,
                            const Contrast& contrast, VectorKind kind, std::uint64_t source_seed) {
  const auto batch = PackedBatch::from(seqs);
  const MatD acts = model::forward(w, batch).site(site).cast<double>();
  RowVecD sp = RowVecD::Zero(acts.cols());
  RowVecD sn = RowVecD::Zero(acts.cols());
  SteeringVector out;
  for (int s = 0; s < batch.n_sequences(); ++s)
    for (int i = 0; i < batch.seq_len(s); ++i) {
      const auto row = acts.row(batch.offsets[s] + i);
      if (contrast.pos(seqs[s], i)) {
        sp += row;
        ++out.n_pos;
      }
      if (contrast.neg(seqs[s], i)) {
        sn += row;
        ++out.n_neg;
      }
    }
  if (out.n_pos == 0 || out.n_neg == 0)
    throw std::invalid_argument("build_vector: empty " + std::string(out.n_pos == 0 ? "positive" : "negative") +
                                " selection for " + to_string(kind));
  out.v = sp / static_cast<double>(out.n_pos) - sn / static_cast<double>(out.n_neg);
  out.site = site;
  out.kind = kind;
  out.positive = contrast.positive;
  out.negative = contrast.negative;
  out.source_seed = source_seed;
  return out;
}

ForwardPass<float> apply_steering(const WeightsF& w, const RowVecD& v, double alpha, const std::string& site,
                                  const PackedBatch& batch) {
  if (alpha == 0.0) return model::forward(w, batch);
  model::Intervention<float> iv;
  iv.steer_site = site;
  iv.steer = (alpha * v).cast<float>();
  return model::forward(w, batch, &iv);
}

namespace {

int argmax_row(const MatF& m, Eigen::Index r) {
  Eigen::Index j = 0;
  m.row(r).maxCoeff(&j);
  return static_cast<int>(j);
}

}  // namespace

double effect_metric(VectorKind k, const ForwardPass<float>& clean, const ForwardPass<float>& steered,
                     const std::vector<dyck::LabeledSequence>& seqs) {
  const auto rows = clean.logits_depth.rows();
  double num = 0.0;
  double den = 0.0;
  Eigen::Index r = 0;
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i, ++r) {
      switch (k) {
        case VectorKind::depth:
          num += argmax_row(steered.logits_depth, r) > argmax_row(clean.logits_depth, r);
          den += 1.0;
          break;
        case VectorKind::sticky:
          if (s.valid[i] == 1) {
            num += (argmax_row(steered.logits_valid, r) == 0) - (argmax_row(clean.logits_valid, r) == 0);
            den += 1.0;
          }
          break;
        case VectorKind::closer:
          if (dyck::is_closer(s.tokens[i])) {
            auto ok = [&](const ForwardPass<float>& p) {
              return argmax_row(p.logits_tok, r) == s.bracket_type[i] && argmax_row(p.logits_depth, r) == s.depth[i] &&
                     argmax_row(p.logits_valid, r) == s.valid[i];
            };
            num += static_cast<double>(ok(clean)) - static_cast<double>(ok(steered));
            den += 1.0;
          }
          break;
      }
    }
  }
  if (r != rows) throw std::invalid_argument("effect_metric: sequences do not match the batch");
  if (den == 0.0) throw std::invalid_argument("effect_metric: no rows qualify for " + to_string(k));
  return num / den;
}

nlohmann::json TransferCurve::to_json() const {
  nlohmann::json ratios = nlohmann::json::array();
  for (double x : ratio) ratios.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
  return {{"kind", to_string(kind)}, {"alphas", alphas},           {"within", within},
          {"cross", cross},          {"ratio", ratios},            {"rotated", rotated},
          {"source_seed", source_seed}, {"target_seed", target_seed}};
}

std::vector<double> default_alphas() { return {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}; }

TransferCurve transfer_curve(const SteeringVector& vec, const WeightsF& source, const WeightsF& target,
                             const std::vector<dyck::LabeledSequence>& seqs, const std::vector<double>& alphas,
                             const MatD* rotation) {
  const auto batch = PackedBatch::from(seqs);
  const RowVecD cross_v = rotation ? RowVecD(vec.v * *rotation) : vec.v;
  const auto clean_src = model::forward(source, batch);
  const auto clean_tgt = model::forward(target, batch);
  TransferCurve c;
  c.kind = vec.kind;
  c.alphas = alphas;
  c.rotated = rotation != nullptr;
  for (double a : alphas) {
    const double w = effect_metric(vec.kind, clean_src, apply_steering(source, vec.v, a, vec.site, batch), seqs);
    const double x = effect_metric(vec.kind, clean_tgt, apply_steering(target, cross_v, a, vec.site, batch), seqs);
    c.within.push_back(w);
    c.cross.push_back(x);
    c.ratio.push_back(w != 0.0 ? x / w : std::numeric_limits<double>::quiet_NaN());
  }
  return c;
}

nlohmann::json RegimeResult::to_json() const {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return {{"regime", to_string(regime)},
          {"matched_alpha", matched_alpha},
          {"matched_ratio", num(matched_ratio)},
          {"small_alpha_ratio", num(small_alpha_ratio)},
          {"dose_multiple", num(dose_multiple)},
          {"sign_flip", sign_flip},
          {"cross_exceeds_at_small_alpha", cross_exceeds_at_small_alpha},
          {"reason", reason},
          {"thresholds", {{"clean", {kCleanLo, kCleanHi}}, {"matched_fraction_of_max", 0.5}}}};
}

RegimeResult classify_regime(const TransferCurve& c) {
  std::vector<std::array<double, 3>> pts;  // alpha, within, cross
  for (std::size_t i = 0; i < c.alphas.size(); ++i) pts.push_back({c.alphas[i], c.within[i], c.cross[i]});
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a[0] < b[0]; });
  if (pts.empty() || pts.front()[0] != 0.0) pts.insert(pts.begin(), {0.0, 0.0, 0.0});
  if (pts.size() < 4) throw std::invalid_argument("classify_regime: need at least 3 nonzero doses");
  const double w_top = pts.back()[1];
  if (w_top == 0.0) throw std::invalid_argument("classify_regime: degenerate curve (no within-seed effect at the top dose)");
  const double sign = w_top > 0 ? 1.0 : -1.0;
  for (auto& p : pts) {
    p[1] *= sign;
    p[2] *= sign;
  }
  double w_max = 0.0;
  for (const auto& p : pts) w_max = std::max(w_max, p[1]);

  RegimeResult r;
  std::size_t m = 1;
  while (pts[m][1] < 0.5 * w_max) ++m;
  r.matched_alpha = pts[m][0];
  r.matched_ratio = pts[m][2] / pts[m][1];
  const auto& small = pts[1];
  r.small_alpha_ratio = small[1] != 0.0 ? small[2] / small[1] : (small[2] > 0 ? INFINITY : small[2] < 0 ? -INFINITY : 0.0);
  r.cross_exceeds_at_small_alpha = r.small_alpha_ratio > kCleanHi;
  r.sign_flip = pts[m][2] < 0.0 || pts.back()[2] < 0.0;

  // dose at which the (running-max) cross curve first reaches the matched within effect
  const double target = pts[m][1];
  r.dose_multiple = INFINITY;
  double prev_a = 0.0, prev_x = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double x = std::max(prev_x, pts[i][2]);
    if (x >= target) {
      const double a = x == prev_x ? prev_a : prev_a + (target - prev_x) / (x - prev_x) * (pts[i][0] - prev_a);
      r.dose_multiple = a / r.matched_alpha;
      break;
    }
    prev_a = pts[i][0];
    prev_x = x;
  }

  char buf[160];
  if (r.sign_flip) {
    r.regime = Regime::inverted;
    r.reason = "cross effect has the opposite sign";
  } else if (r.cross_exceeds_at_small_alpha) {
    r.regime = Regime::inverted;
    std::snprintf(buf, sizeof buf, "cross/within = %.3g at the smallest dose", r.small_alpha_ratio);
    r.reason = buf;
  } else if (r.matched_ratio > kCleanHi) {
    r.regime = Regime::inverted;
    std::snprintf(buf, sizeof buf, "cross/within = %.3g at the matched dose", r.matched_ratio);
    r.reason = buf;
  } else if (r.matched_ratio >= kCleanLo) {
    r.regime = Regime::clean;
    std::snprintf(buf, sizeof buf, "cross/within = %.3g at alpha %.3g", r.matched_ratio, r.matched_alpha);
    r.reason = buf;
  } else {
    r.regime = Regime::partial;
    std::snprintf(buf, sizeof buf, "cross/within = %.3g at alpha %.3g; cross needs %.3gx the dose", r.matched_ratio,
                  r.matched_alpha, r.dose_multiple);
    r.reason = buf;
  }
  return r;
}

}  // namespace rotaudit::steering
