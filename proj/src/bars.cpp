#include "rotaudit/bars.hpp"

#include <cmath>
#include <stdexcept>

namespace rotaudit::bars {

using model::ComponentId;
using model::Intervention;
using model::WeightsF;

nlohmann::json BarReport::to_json() const {
  return {{"bar", bar}, {"value", value}, {"threshold", threshold}, {"pass", pass}, {"breakdown", breakdown}};
}

namespace {

// Per-row log-softmax in double.
std::vector<double> log_softmax_row(const MatF& z, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(z.cols()));
  double mx = z(r, 0);
  for (Eigen::Index c = 1; c < z.cols(); ++c) mx = std::max(mx, static_cast<double>(z(r, c)));
  double sum = 0.0;
  for (Eigen::Index c = 0; c < z.cols(); ++c) sum += std::exp(static_cast<double>(z(r, c)) - mx);
  const double lse = mx + std::log(sum);
  for (Eigen::Index c = 0; c < z.cols(); ++c) out[static_cast<std::size_t>(c)] = static_cast<double>(z(r, c)) - lse;
  return out;
}

double kl_row(const MatF& ref, const MatF& model, Eigen::Index r) {
  const auto lp = log_softmax_row(ref, r);
  const auto lq = log_softmax_row(model, r);
  double kl = 0.0;
  for (std::size_t c = 0; c < lp.size(); ++c) {
    const double p = std::exp(lp[c]);
    if (p > 0) kl += p * (lp[c] - lq[c]);
  }
  return std::max(0.0, kl);
}

}  // namespace

BarReport bar_b(const WeightsF& w, const WeightsF* reference, const dyck::TaskDistributions& dists,
                const BarBOptions& opt) {
  if (opt.n_samples < 3) throw std::invalid_argument("bar_b: need at least one sequence per distribution");
  const std::array<std::pair<const char*, dyck::DistributionSpec>, 3> parts = {
      std::pair{"train", dists.train}, std::pair{"compositional", dists.compositional},
      std::pair{"long", dists.long_range}};
  const std::array<const char*, 3> heads = {"tok", "depth", "valid"};
  std::array<double, 3> head_sum{};
  double positions = 0.0;
  nlohmann::json per_dist = nlohmann::json::object();
  Rng rng(opt.seed);
  for (const auto& [name, spec] : parts) {
    std::array<double, 3> dist_sum{};
    double dist_positions = 0.0;
    int remaining = opt.n_samples / 3;
    while (remaining > 0) {
      const int n = std::min(remaining, opt.chunk);
      remaining -= n;
      const auto seqs = dyck::sample_sequences(spec, static_cast<std::size_t>(n), rng);
      const auto batch = model::PackedBatch::from(seqs);
      const auto labels = model::Labels::from(seqs);
      const auto fp = model::forward(w, batch);
      std::optional<model::ForwardPass<float>> rp;
      if (reference) rp = model::forward(*reference, batch);
      const std::array<const MatF*, 3> logits = {&fp.logits_tok, &fp.logits_depth, &fp.logits_valid};
      const std::array<const std::vector<int>*, 3> targets = {&labels.tok, &labels.depth, &labels.valid};
      for (std::size_t k = 0; k < 3; ++k) {
        double s = 0.0;
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
          if (rp) {
            const std::array<const MatF*, 3> ref_logits = {&rp->logits_tok, &rp->logits_depth, &rp->logits_valid};
            s += kl_row(*ref_logits[k], *logits[k], r);
          } else {
            s += -log_softmax_row(*logits[k], r)[static_cast<std::size_t>((*targets[k])[static_cast<std::size_t>(r)])];
          }
        }
        dist_sum[k] += s;
      }
      dist_positions += batch.rows();
    }
    nlohmann::json d = {{"positions", dist_positions}};
    double dist_total = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      d[heads[k]] = dist_sum[k] / dist_positions;
      dist_total += dist_sum[k];
      head_sum[k] += dist_sum[k];
    }
    d["mean"] = dist_total / (3.0 * dist_positions);
    per_dist[name] = d;
    positions += dist_positions;
  }
  BarReport rep;
  rep.bar = "B";
  rep.threshold = kBarBThreshold;
  rep.value = (head_sum[0] + head_sum[1] + head_sum[2]) / (3.0 * positions);
  rep.pass = rep.value < rep.threshold;
  rep.breakdown = {{"reference", reference ? "model" : "label_oracle"},
                   {"n_sequences", 3 * (opt.n_samples / 3)},
                   {"positions", positions},
                   {"per_distribution", per_dist}};
  for (std::size_t k = 0; k < 3; ++k) rep.breakdown["per_head"][heads[k]] = head_sum[k] / positions;
  return rep;
}

AblationBatch AblationBatch::make(const std::vector<dyck::LabeledSequence>& seqs) {
  return {model::PackedBatch::from(seqs), model::Labels::from(seqs)};
}

RowVecF component_mean(const WeightsF& w, const AblationBatch& b, const ComponentId& c) {
  Intervention<float> probe;
  probe.component = c;
  probe.baseline = RowVecF::Zero(w.config.d_model);
  probe.alpha = 1.0f;
  const auto fp = model::forward(w, b.batch, &probe);
  return fp.component_clean.cast<double>().colwise().mean().cast<float>();
}

double clean_loss(const WeightsF& w, const AblationBatch& b) {
  return model::loss_and_grad(model::forward(w, b.batch), b.labels, false).loss;
}

double mean_ablation_effect(const WeightsF& w, const AblationBatch& b, const ComponentId& c) {
  Intervention<float> iv;
  iv.component = c;
  iv.baseline = component_mean(w, b, c);
  iv.alpha = 0.0f;
  const double ablated = model::loss_and_grad(model::forward(w, b.batch, &iv), b.labels, false).loss;
  return ablated - clean_loss(w, b);
}

namespace {

// <dL/d(component output) at mixing weight alpha, direction> in double.
double directional_grad(const WeightsF& w, const AblationBatch& b, const ComponentId& c, const RowVecF& mean,
                        float alpha, bool toward_mean) {
  Intervention<float> iv;
  iv.component = c;
  iv.baseline = mean;
  iv.alpha = alpha;
  const auto fp = model::forward(w, b.batch, &iv);
  const auto lg = model::loss_and_grad(fp, b.labels);
  const auto g = model::backward(w, b.batch, fp, lg, &iv, false);
  const MatF& grad = c.is_mlp() ? g.d_mlp_out[static_cast<std::size_t>(c.layer)] : g.d_attn_out[static_cast<std::size_t>(c.layer)];
  // clean - mean per row
  MatD diff = fp.component_clean.cast<double>();
  diff.rowwise() -= mean.cast<double>();
  const double dot = (grad.cast<double>().array() * diff.array()).sum();
  return toward_mean ? -dot : dot;
}

}  // namespace

double ap_predict(const WeightsF& w, const AblationBatch& b, const ComponentId& c) {
  return directional_grad(w, b, c, component_mean(w, b, c), 1.0f, true);
}

double ig_predict(const WeightsF& w, const AblationBatch& b, const ComponentId& c, int n_steps) {
  if (n_steps < 2) throw std::invalid_argument("ig_predict: need at least 2 steps");
  const RowVecF mean = component_mean(w, b, c);
  double sum = 0.0;
  for (int k = 0; k < n_steps; ++k) {
    const float alpha = static_cast<float>((k + 0.5) / n_steps);
    sum += directional_grad(w, b, c, mean, alpha, true);
  }
  return sum / n_steps;
}

nlohmann::json ComponentEffects::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < components.size(); ++i)
    rows.push_back({{"component", components[i].name()}, {"measured", measured[i]}, {"ap", ap[i]}, {"ig", ig[i]}});
  return {{"components", rows}, {"r_ap", r_ap}, {"r_ig", r_ig}};
}

ComponentEffects component_effects(const WeightsF& w, const AblationBatch& b, int ig_steps) {
  ComponentEffects e;
  e.components = model::enumerate_components(w.config);
  for (const auto& c : e.components) {
    e.measured.push_back(mean_ablation_effect(w, b, c));
    e.ap.push_back(ap_predict(w, b, c));
    e.ig.push_back(ig_predict(w, b, c, ig_steps));
  }
  e.r_ap = pearson(e.ap, e.measured);
  e.r_ig = pearson(e.ig, e.measured);
  return e;
}

BarReport bar_c_pr(const std::string& bar, const std::vector<double>& predictions,
                   const std::vector<double>& measurements, const std::string& mode) {
  if (predictions.size() != measurements.size()) throw std::invalid_argument("bar_c_pr: length mismatch");
  if (predictions.size() < 3) throw std::invalid_argument("bar_c_pr: need at least 3 components");
  const double r = pearson(predictions, measurements);
  if (!std::isfinite(r)) throw std::invalid_argument("bar_c_pr: zero-variance inputs");
  BarReport rep;
  rep.bar = bar;
  rep.value = r;
  rep.threshold = kBarCThreshold;
  rep.pass = r > kBarCThreshold;
  rep.breakdown = {{"mode", mode}, {"predictions", predictions}, {"measurements", measurements}};
  if (mode == "cross") rep.breakdown["shared_measurement"] = true;
  return rep;
}

}  // namespace rotaudit::bars
