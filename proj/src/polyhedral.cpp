#include "rotaudit/polyhedral.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

#include <Eigen/Dense>

namespace rotaudit::polyhedral {

namespace {

struct PatternHash {
  std::size_t operator()(const Pattern& p) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto w : p) {
      h ^= w + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      h *= 0x100000001b3ull;
    }
    return static_cast<std::size_t>(h);
  }
};

void check_layer(const model::WeightsF& w, int layer) {
  if (layer < 0 || layer >= w.config.n_layers) throw std::invalid_argument("polyhedral: bad layer " + std::to_string(layer));
}

MatD pre_activations(const model::WeightsF& w, int layer, const MatD& inputs) {
  check_layer(w, layer);
  if (inputs.cols() != w.config.d_model) throw std::invalid_argument("polyhedral: input width != d_model");
  return inputs * w.blocks[layer].W_in.cast<double>();
}

}  // namespace

Pattern pattern_of(const double* pre, int n) {
  Pattern p(static_cast<std::size_t>((n + 63) / 64), 0);
  for (int j = 0; j < n; ++j)
    if (pre[j] > 0.0) p[static_cast<std::size_t>(j / 64)] |= (1ull << (j % 64));
  return p;
}

nlohmann::json PatternCensus::to_json() const {
  nlohmann::json common = nlohmann::json::array();
  for (const auto& [p, count] : most_common) {
    int active = 0;
    for (auto word : p) active += __builtin_popcountll(word);
    common.push_back({{"count", count}, {"active_neurons", active}});
  }
  return {{"layer", layer},
          {"n_samples", n_samples},
          {"n_unique_patterns", n_unique_patterns},
          {"alive_neuron_count", alive_neuron_count},
          {"neuron_score", neuron_score},
          {"most_common", common}};
}

MatD mlp_output(const model::WeightsF& w, int layer, const MatD& inputs) {
  return pre_activations(w, layer, inputs).cwiseMax(0.0) * w.blocks[layer].W_out.cast<double>();
}

PatternCensus census(const model::WeightsF& w, int layer, const MatD& inputs) {
  const MatD pre = pre_activations(w, layer, inputs);
  const int m = static_cast<int>(pre.cols());
  std::unordered_map<Pattern, std::int64_t, PatternHash> counts;
  for (Eigen::Index r = 0; r < pre.rows(); ++r) ++counts[pattern_of(pre.row(r).data(), m)];
  PatternCensus c;
  c.layer = layer;
  c.n_samples = pre.rows();
  c.n_unique_patterns = static_cast<std::int64_t>(counts.size());
  const auto& b = w.blocks[layer];
  for (int j = 0; j < m; ++j) {
    const double s = static_cast<double>(b.W_in.col(j).norm()) * static_cast<double>(b.W_out.row(j).norm());
    c.neuron_score.push_back(s);
    c.alive_neuron_count += s > 0.0;
  }
  std::vector<std::pair<Pattern, std::int64_t>> all(counts.begin(), counts.end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  all.resize(std::min<std::size_t>(all.size(), 20));
  c.most_common = std::move(all);
  return c;
}

double verify_affine_cell(const model::WeightsF& w, int layer, const Pattern& pattern, const MatD& probes) {
  const MatD pre = pre_activations(w, layer, probes);
  const int m = static_cast<int>(pre.cols());
  for (Eigen::Index r = 0; r < pre.rows(); ++r)
    if (pattern_of(pre.row(r).data(), m) != pattern)
      throw std::invalid_argument("verify_affine_cell: probe " + std::to_string(r) + " lies outside the cell");
  const Eigen::Index d = probes.cols();
  const Eigen::Index half = probes.rows() / 2;
  if (half < d + 1) throw std::invalid_argument("verify_affine_cell: need at least 2 (d + 1) probes");
  const MatD y = mlp_output(w, layer, probes);
  Eigen::MatrixXd X(half, d + 1);
  X.leftCols(d) = probes.topRows(half);
  X.col(d).setOnes();
  const Eigen::MatrixXd coef = X.colPivHouseholderQr().solve(Eigen::MatrixXd(y.topRows(half)));
  const Eigen::Index rest = probes.rows() - half;
  Eigen::MatrixXd Xt(rest, d + 1);
  Xt.leftCols(d) = probes.bottomRows(rest);
  Xt.col(d).setOnes();
  return (Xt * coef - Eigen::MatrixXd(y.bottomRows(rest))).cwiseAbs().maxCoeff();
}

MatD probes_in_cell(const model::WeightsF& w, int layer, const RowVecD& center, int n, double radius, Rng& rng) {
  const MatD c0 = center;
  const MatD pre0 = pre_activations(w, layer, c0);
  const int m = static_cast<int>(pre0.cols());
  const Pattern target = pattern_of(pre0.row(0).data(), m);
  MatD out(n, center.size());
  for (int attempt = 0; attempt < 60; ++attempt, radius *= 0.5) {
    int got = 0;
    for (int tries = 0; tries < 20 * n && got < n; ++tries) {
      RowVecD x = center + random_normal<double>(1, center.size(), rng, radius);
      const MatD pre = pre_activations(w, layer, x);
      if (pattern_of(pre.row(0).data(), m) == target) out.row(got++) = x;
    }
    if (got == n) return out;
  }
  throw std::runtime_error("probes_in_cell: could not stay inside the cell");
}

}  // namespace rotaudit::polyhedral
