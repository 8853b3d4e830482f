#include "rotaudit/sae.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "rotaudit/assignment.hpp"
#include "rotaudit/io.hpp"

namespace rotaudit::sae {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct Adam {
  MatD m, v;
  void init(Eigen::Index r, Eigen::Index c) {
    m = MatD::Zero(r, c);
    v = MatD::Zero(r, c);
  }
  void step(MatD& p, const MatD& g, double lr, double bc1, double bc2) {
    m = kBeta1 * m + (1 - kBeta1) * g;
    v = kBeta2 * v + (1 - kBeta2) * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps);
  }
};

void normalize_rows(MatD& d) {
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const double n = d.row(i).norm();
    if (n > 0) d.row(i) /= n;
  }
}

MatD apply_rotation(const MatD& acts, const MatD& r) {
  if (r.rows() != acts.cols() || r.cols() != acts.cols()) throw std::invalid_argument("rotation has wrong shape");
  if (operator_norm(r.transpose() * r - MatD::Identity(r.rows(), r.cols())) > 1e-4)
    throw std::invalid_argument("rotation is not orthogonal to 1e-4");
  return acts * r;
}

}  // namespace

MatD SAEModel::encode(const MatD& x) const {
  if (x.cols() != d()) throw std::invalid_argument("SAE encode: width mismatch");
  MatD pre = (x.rowwise() - b_pre.cast<double>().row(0)) * W_enc.cast<double>();
  pre.rowwise() += b_enc.cast<double>().row(0);
  return pre.cwiseMax(0.0);
}

MatD SAEModel::decode(const MatD& f) const {
  MatD out = f * W_dec.cast<double>();
  out.rowwise() += b_pre.cast<double>().row(0);
  return out;
}

SAEModel train_sae(const MatF& acts_f, const SAEConfig& config, Rng& rng, TrainStats* stats) {
  const auto n = acts_f.rows();
  const auto d = acts_f.cols();
  const auto m = static_cast<Eigen::Index>(config.expansion) * d;
  if (n == 0 || d == 0) throw std::invalid_argument("train_sae: empty activations");
  const bool under_sampled = n < 10 * m;
  if (under_sampled)
    std::cerr << "train_sae: " << n << " rows for a dictionary of " << m << " (fewer than 10 per entry)\n";

  const MatD acts = acts_f.cast<double>();
  const RowVecD mu = column_mean(acts);
  const double var = (acts.rowwise() - mu).squaredNorm() / static_cast<double>(n * d);
  if (!(var > 0)) throw std::invalid_argument("train_sae: zero-variance activations");
  const double s = std::sqrt(var);
  const MatD z = (acts.rowwise() - mu) / s;

  // Normalised-space parameters.
  MatD D = random_normal<double>(m, d, rng);
  normalize_rows(D);
  MatD W = D.transpose();
  MatD b = MatD::Zero(1, m);
  MatD c = MatD::Zero(1, d);
  Adam aW, ab, ac, aD;
  aW.init(d, m);
  ab.init(1, m);
  ac.init(1, d);
  aD.init(m, d);

  const int batch = static_cast<int>(std::min<Eigen::Index>(config.batch_size, n));
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  MatD x(batch, d);
  double last_loss = 0.0;
  for (int step = 1; step <= config.steps; ++step) {
    for (int r = 0; r < batch; ++r) x.row(r) = z.row(pick(rng));
    const MatD xc = x.rowwise() - c.row(0);
    MatD pre = xc * W;
    pre.rowwise() += b.row(0);
    const MatD f = pre.cwiseMax(0.0);
    MatD xh = f * D;
    xh.rowwise() += c.row(0);
    const MatD e = xh - x;
    const double loss = e.squaredNorm() / batch + config.l1_coeff * f.sum() / batch;
    if (!std::isfinite(loss)) throw std::runtime_error("train_sae: loss is not finite at step " + std::to_string(step));
    last_loss = loss;

    const MatD dxh = e * (2.0 / batch);
    const MatD gD = f.transpose() * dxh;
    MatD df = dxh * D.transpose();
    df.array() += config.l1_coeff / batch;
    const MatD dpre = (pre.array() > 0.0).select(df, 0.0);
    const MatD gW = xc.transpose() * dpre;
    const MatD gb = dpre.colwise().sum();
    const MatD gc = dxh.colwise().sum() - (dpre * W.transpose()).colwise().sum();

    const double bc1 = 1 - std::pow(kBeta1, step);
    const double bc2 = 1 - std::pow(kBeta2, step);
    aW.step(W, gW, config.lr, bc1, bc2);
    ab.step(b, gb, config.lr, bc1, bc2);
    ac.step(c, gc, config.lr, bc1, bc2);
    aD.step(D, gD, config.lr, bc1, bc2);
    normalize_rows(D);
  }

  SAEModel out;
  out.site = config.site;
  out.l1_coeff = config.l1_coeff;
  out.W_enc = W.cast<float>();
  out.b_enc = (b * s).cast<float>();
  out.b_pre = (mu + c.row(0) * s).cast<float>();
  out.W_dec = D.cast<float>();
  if (stats) {
    stats->final_loss = last_loss;
    stats->l0 = mean_l0(out, acts);
    stats->ev = explained_variance(out, acts);
    stats->under_sampled = under_sampled;
  }
  return out;
}

double mean_l0(const SAEModel& sae, const MatD& acts) {
  const MatD f = sae.encode(acts);
  return static_cast<double>((f.array() > 0.0).count()) / static_cast<double>(std::max<Eigen::Index>(1, f.rows()));
}

double tune_l1(const MatF& acts, SAEConfig config, const std::vector<double>& grid, Rng& rng, double lo, double hi,
               int tuning_steps) {
  if (grid.empty()) throw std::invalid_argument("tune_l1: empty grid");
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  config.steps = tuning_steps;
  double best = sorted.front();
  double best_gap = std::numeric_limits<double>::infinity();
  const MatD acts_d = acts.cast<double>();
  for (double l1 : sorted) {
    config.l1_coeff = l1;
    Rng local(rng());
    const auto sae = train_sae(acts, config, local);
    const double l0 = mean_l0(sae, acts_d);
    if (l0 >= lo && l0 <= hi) return l1;
    const double gap = l0 < lo ? lo - l0 : l0 - hi;
    if (gap < best_gap) {
      best_gap = gap;
      best = l1;
    }
  }
  return best;
}

double explained_variance(const SAEModel& sae, const MatD& acts) {
  if (acts.rows() == 0) throw std::invalid_argument("explained_variance: empty activations");
  const double total = (acts.rowwise() - column_mean(acts)).squaredNorm();
  if (!(total > 0)) throw std::invalid_argument("explained_variance: zero-variance activations");
  return 1.0 - (acts - sae.reconstruct(acts)).squaredNorm() / total;
}

double explained_variance(const SAEModel& sae, const MatD& acts, const MatD& rotation) {
  return explained_variance(sae, apply_rotation(acts, rotation));
}

double explained_variance(const SAEModel& sae, const MatD& acts, const rotation::RotationFit& fit) {
  if (operator_norm(fit.R.transpose() * fit.R - MatD::Identity(fit.R.rows(), fit.R.cols())) > 1e-4)
    throw std::invalid_argument("explained_variance: fitted rotation is not orthogonal to 1e-4");
  return explained_variance(sae, fit.apply(acts));
}

std::vector<bool> alive_features(const SAEModel& sae, const MatD& acts) {
  const MatD f = sae.encode(acts);
  std::vector<bool> alive(static_cast<std::size_t>(f.cols()));
  for (Eigen::Index j = 0; j < f.cols(); ++j) alive[static_cast<std::size_t>(j)] = (f.col(j).array() > 0.0).any();
  return alive;
}

Matching match_decoders(const SAEModel& a, const SAEModel& b, const std::vector<bool>* alive_a,
                        const std::vector<bool>* alive_b) {
  if (a.m() != b.m() || a.d() != b.d()) throw std::invalid_argument("match_decoders: dictionary shapes differ");
  const MatD cos = a.W_dec.cast<double>() * b.W_dec.cast<double>().transpose();
  const MatD score = cos.cwiseAbs();
  Matching out;
  out.pairs = max_score_assignment(score);
  auto live = [](const std::vector<bool>* mask, int i) { return !mask || (*mask)[static_cast<std::size_t>(i)]; };
  for (int i = 0; i < a.m(); ++i) {
    out.dead_a += live(alive_a, i) ? 0 : 1;
    out.dead_b += live(alive_b, i) ? 0 : 1;
  }
  int counted = 0;
  int above = 0;
  int matched = 0;
  double sum_max = 0.0;
  double sum_matched = 0.0;
  for (int i = 0; i < a.m(); ++i) {
    const int j = out.pairs[static_cast<std::size_t>(i)];
    out.cosines.push_back(score(i, j));
    out.signs.push_back(cos(i, j) < 0 ? -1.0 : 1.0);
    if (!live(alive_a, i)) {
      out.max_cos.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    double mx = 0.0;
    for (int k = 0; k < b.m(); ++k)
      if (live(alive_b, k)) mx = std::max(mx, score(i, k));
    out.max_cos.push_back(mx);
    sum_max += mx;
    above += mx > 0.5 ? 1 : 0;
    ++counted;
    if (live(alive_b, j)) {
      sum_matched += score(i, j);
      ++matched;
    }
  }
  out.frac_above_half = counted ? static_cast<double>(above) / counted : 0.0;
  out.mean_max_cos = counted ? sum_max / counted : 0.0;
  out.mean_matched_cos = matched ? sum_matched / matched : 0.0;
  return out;
}

namespace {

std::vector<double> correlate_codes(const MatD& fa, const MatD& fb, int min_rows) {
  std::vector<double> r(static_cast<std::size_t>(fa.cols()), std::numeric_limits<double>::quiet_NaN());
  std::vector<double> xa(static_cast<std::size_t>(fa.rows())), xb(static_cast<std::size_t>(fa.rows()));
  for (Eigen::Index j = 0; j < fa.cols(); ++j) {
    const auto na = (fa.col(j).array() > 0.0).count();
    const auto nb = (fb.col(j).array() > 0.0).count();
    if (na < min_rows || nb < min_rows) continue;
    for (Eigen::Index i = 0; i < fa.rows(); ++i) {
      xa[static_cast<std::size_t>(i)] = fa(i, j);
      xb[static_cast<std::size_t>(i)] = fb(i, j);
    }
    r[static_cast<std::size_t>(j)] = pearson(xa, xb);
  }
  return r;
}

}  // namespace

std::vector<double> firing_correlation(const SAEModel& sae, const MatD& acts_a, const MatD& acts_b,
                                       const rotation::RotationFit* fit, int min_rows) {
  if (acts_a.rows() != acts_b.rows()) throw std::invalid_argument("firing_correlation: row counts differ");
  const MatD fa = sae.encode(acts_a);
  const MatD fb = sae.encode(fit ? fit->apply(acts_b) : acts_b);
  return correlate_codes(fa, fb, min_rows);
}

std::vector<double> firing_correlation(const SAEModel& sae, const MatD& acts_a, const MatD& acts_b,
                                       const MatD& rotation, int min_rows) {
  if (acts_a.rows() != acts_b.rows()) throw std::invalid_argument("firing_correlation: row counts differ");
  return correlate_codes(sae.encode(acts_a), sae.encode(apply_rotation(acts_b, rotation)), min_rows);
}

double finite_mean(const std::vector<double>& xs) {
  double s = 0.0;
  int n = 0;
  for (double x : xs)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

void save_sae(const std::filesystem::path& path, const SAEModel& sae, const nlohmann::json& meta) {
  nlohmann::json m = meta;
  m["site"] = sae.site;
  m["l1_coeff"] = sae.l1_coeff;
  io::write_tensor_file(path, m,
                        {{"W_enc", &sae.W_enc}, {"b_pre", &sae.b_pre}, {"b_enc", &sae.b_enc}, {"W_dec", &sae.W_dec}});
}

SAEModel load_sae(const std::filesystem::path& path, nlohmann::json* meta) {
  const auto f = io::read_tensor_file(path);
  SAEModel s;
  s.W_enc = f.at("W_enc");
  s.b_pre = f.at("b_pre");
  s.b_enc = f.at("b_enc");
  s.W_dec = f.at("W_dec");
  s.site = f.meta.value("site", "");
  s.l1_coeff = f.meta.value("l1_coeff", 0.0);
  if (s.W_dec.rows() != s.m() || s.W_dec.cols() != s.d() || s.b_pre.cols() != s.d() || s.b_enc.cols() != s.m())
    throw std::runtime_error("inconsistent SAE tensors in " + path.string());
  if (meta) *meta = f.meta;
  return s;
}

}  // namespace rotaudit::sae
