#include "rotaudit/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "rotaudit/assignment.hpp"
#include "rotaudit/rotation.hpp"

namespace rotaudit::symmetry {

using model::ModelConfig;
using model::ResidualAxis;
using model::WeightsD;
using model::WeightsF;

namespace {

MatD polar(const MatD& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

double nuclear_norm(const MatD& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().sum();
}

std::vector<int> iota_perm(int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

bool is_permutation_of(const std::vector<int>& p, int n) {
  if (static_cast<int>(p.size()) != n) return false;
  std::vector<char> seen(n, 0);
  for (int v : p) {
    if (v < 0 || v >= n || seen[v]) return false;
    seen[v] = 1;
  }
  return true;
}

void require_unit_gains(const WeightsD& w) {
  auto unit = [](const MatD& g) { return (g.array() - 1.0).abs().maxCoeff() <= 1e-12; };
  bool ok = unit(w.ln_final);
  for (const auto& b : w.blocks) ok = ok && unit(b.ln1) && unit(b.ln2);
  if (!ok) throw std::invalid_argument("symmetry action needs folded weights (unit RMSNorm gains)");
}

/// Same element with the residual rotation replaced by the identity.
SymmetryElement without_rotation(const SymmetryElement& g) {
  SymmetryElement h = g;
  h.resid_rot = MatD::Identity(g.resid_rot.rows(), g.resid_rot.cols());
  return h;
}

double global_mse(const WeightsD& a, const WeightsD& b) {
  double sse = 0.0;
  double n = 0.0;
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    sse += (*ta[i].second - *tb[i].second).squaredNorm();
    n += static_cast<double>(ta[i].second->size());
  }
  return sse / n;
}

/// min over u > 0 of ||u a - c||^2 + ||e / u - b||^2, from the quadratic
/// coefficients A2 = ||a||^2, ac = a.c, E2 = ||e||^2, eb = e.b.
std::pair<double, double> best_scale(double A2, double ac, double E2, double eb, double C2B2) {
  constexpr double lo = 1e-6;
  constexpr double hi = 1e6;
  auto f = [&](double u) { return u * u * A2 - 2.0 * u * ac + E2 / (u * u) - 2.0 * eb / u + C2B2; };
  std::vector<double> cand{lo, hi, 1.0};
  if (A2 > 1e-300) {
    // A2 u^4 - ac u^3 + eb u - E2 = 0
    Eigen::Matrix4d comp = Eigen::Matrix4d::Zero();
    comp(1, 0) = comp(2, 1) = comp(3, 2) = 1.0;
    comp(0, 3) = E2 / A2;
    comp(1, 3) = -eb / A2;
    comp(2, 3) = 0.0;
    comp(3, 3) = ac / A2;
    Eigen::EigenSolver<Eigen::Matrix4d> es(comp, false);
    for (int i = 0; i < 4; ++i) {
      auto r = es.eigenvalues()[i];
      if (std::abs(r.imag()) <= 1e-7 * (1.0 + std::abs(r.real())) && r.real() > 0) {
        double u = std::clamp(r.real(), lo, hi);
        // one Newton polish on the quartic
        double p = ((A2 * u - ac) * u * u + eb) * u - E2;
        double dp = (4.0 * A2 * u - 3.0 * ac) * u * u + eb;
        if (dp != 0.0) {
          double un = u - p / dp;
          if (un > 0) u = std::clamp(un, lo, hi);
        }
        cand.push_back(u);
      }
    }
  } else if (E2 > 0 && eb > 0) {
    cand.push_back(std::clamp(E2 / eb, lo, hi));
  }
  double best_u = 1.0;
  double best = std::numeric_limits<double>::infinity();
  for (double u : cand) {
    double v = f(u);
    if (v < best) {
      best = v;
      best_u = u;
    }
  }
  return {best_u, std::max(best, 0.0)};
}

void head_step(const WeightsD& a, const WeightsD& br, SymmetryElement& g) {
  const ModelConfig& c = a.config;
  const int dh = c.d_head;
  const int H = c.n_heads;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& A = a.blocks[l];
    const auto& B = br.blocks[l];
    std::vector<MatD> xqk(H), xvo(H), yqk(H), yvo(H);
    auto stack = [&](const MatD& top, const MatD& bottom) {
      MatD s(top.rows() + bottom.rows(), top.cols());
      s << top, bottom;
      return s;
    };
    for (int h = 0; h < H; ++h) {
      xqk[h] = stack(B.W_Q.middleCols(h * dh, dh), B.W_K.middleCols(h * dh, dh));
      xvo[h] = stack(B.W_V.middleCols(h * dh, dh), B.W_O.middleRows(h * dh, dh).transpose());
      yqk[h] = stack(A.W_Q.middleCols(h * dh, dh), A.W_K.middleCols(h * dh, dh));
      yvo[h] = stack(A.W_V.middleCols(h * dh, dh), A.W_O.middleRows(h * dh, dh).transpose());
    }
    MatD cost(H, H);
    for (int h = 0; h < H; ++h)
      for (int p = 0; p < H; ++p) {
        cost(h, p) = xqk[p].squaredNorm() + yqk[h].squaredNorm() - 2.0 * nuclear_norm(xqk[p].transpose() * yqk[h]) +
                     xvo[p].squaredNorm() + yvo[h].squaredNorm() - 2.0 * nuclear_norm(xvo[p].transpose() * yvo[h]);
      }
    auto perm = min_cost_assignment(cost);
    for (int h = 0; h < H; ++h) {
      int p = perm[h];
      g.head_perm[l][h] = p;
      g.qk_rot[l][h] = polar(xqk[p].transpose() * yqk[h]);
      g.vo_rot[l][h] = polar(xvo[p].transpose() * yvo[h]);
    }
  }
}

void mlp_step(const WeightsD& a, const WeightsD& br, SymmetryElement& g) {
  const ModelConfig& c = a.config;
  const int m = c.d_mlp;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& A = a.blocks[l];
    const auto& B = br.blocks[l];
    MatD ac = B.W_in.transpose() * A.W_in;    // [k, j] = a_k . c_j
    MatD eb = B.W_out * A.W_out.transpose();  // [k, j] = e_k . b_j
    Eigen::VectorXd a2 = B.W_in.colwise().squaredNorm().transpose();
    Eigen::VectorXd c2 = A.W_in.colwise().squaredNorm().transpose();
    Eigen::VectorXd e2 = B.W_out.rowwise().squaredNorm();
    Eigen::VectorXd b2 = A.W_out.rowwise().squaredNorm();
    MatD cost(m, m);
    MatD scale(m, m);
    for (int j = 0; j < m; ++j)
      for (int k = 0; k < m; ++k) {
        auto [u, v] = best_scale(a2[k], ac(k, j), e2[k], eb(k, j), c2[j] + b2[j]);
        cost(j, k) = v;
        scale(j, k) = u;
      }
    auto perm = min_cost_assignment(cost);
    for (int j = 0; j < m; ++j) {
      g.mlp_perm[l][j] = perm[j];
      g.mlp_scale[l][j] = scale(j, perm[j]);
    }
  }
}

MatD residual_procrustes(const WeightsD& a, const WeightsD& bt) {
  const int d = a.config.d_model;
  MatD M = MatD::Zero(d, d);
  auto ta = a.tensors();
  auto tb = bt.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    switch (model::residual_axis(ta[i].first)) {
      case ResidualAxis::cols: M += tb[i].second->transpose() * *ta[i].second; break;
      case ResidualAxis::rows: M += *tb[i].second * ta[i].second->transpose(); break;
      default: break;
    }
  }
  return polar(M);
}

void finalize(AlignmentResult& r, const WeightsD& a, const WeightsD& b) {
  WeightsD aligned = apply_symmetry(b, r.element);
  r.per_tensor_mse = per_tensor_mse(a, aligned);
  r.max_mse = -1.0;
  for (const auto& [name, v] : r.per_tensor_mse)
    if (v > r.max_mse) {
      r.max_mse = v;
      r.max_tensor = name;
    }
  r.global_mse = global_mse(a, aligned);
}

std::vector<int> random_perm(int n, Rng& rng) {
  auto p = iota_perm(n);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

SymmetryElement SymmetryElement::identity(const ModelConfig& c) {
  SymmetryElement g;
  const MatD I = MatD::Identity(c.d_head, c.d_head);
  for (int l = 0; l < c.n_layers; ++l) {
    g.head_perm.push_back(iota_perm(c.n_heads));
    g.qk_rot.emplace_back(c.n_heads, I);
    g.vo_rot.emplace_back(c.n_heads, I);
    g.mlp_perm.push_back(iota_perm(c.d_mlp));
    g.mlp_scale.emplace_back(c.d_mlp, 1.0);
  }
  g.resid_rot = MatD::Identity(c.d_model, c.d_model);
  return g;
}

SymmetryElement SymmetryElement::random(const ModelConfig& c, Rng& rng) {
  SymmetryElement g = identity(c);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (int l = 0; l < c.n_layers; ++l) {
    g.head_perm[l] = random_perm(c.n_heads, rng);
    for (int h = 0; h < c.n_heads; ++h) {
      g.qk_rot[l][h] = rotation::haar_sample(c.d_head, rng, (rng() & 1) ? 1 : -1);
      g.vo_rot[l][h] = rotation::haar_sample(c.d_head, rng, (rng() & 1) ? 1 : -1);
    }
    g.mlp_perm[l] = random_perm(c.d_mlp, rng);
    for (auto& s : g.mlp_scale[l]) s = std::exp(normal(rng));
  }
  g.resid_rot = rotation::haar_sample(c.d_model, rng);
  return g;
}

SymmetryElement SymmetryElement::inverse() const {
  SymmetryElement inv = *this;
  for (std::size_t l = 0; l < head_perm.size(); ++l) {
    for (std::size_t h = 0; h < head_perm[l].size(); ++h) {
      int p = head_perm[l][h];
      inv.head_perm[l][p] = static_cast<int>(h);
      inv.qk_rot[l][p] = qk_rot[l][h].transpose();
      inv.vo_rot[l][p] = vo_rot[l][h].transpose();
    }
    for (std::size_t j = 0; j < mlp_perm[l].size(); ++j) {
      int k = mlp_perm[l][j];
      inv.mlp_perm[l][k] = static_cast<int>(j);
      inv.mlp_scale[l][k] = 1.0 / mlp_scale[l][j];
    }
  }
  inv.resid_rot = resid_rot.transpose();
  return inv;
}

void SymmetryElement::validate(const ModelConfig& c) const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("symmetry element: " + what); };
  if (static_cast<int>(head_perm.size()) != c.n_layers || static_cast<int>(mlp_perm.size()) != c.n_layers ||
      static_cast<int>(qk_rot.size()) != c.n_layers || static_cast<int>(vo_rot.size()) != c.n_layers ||
      static_cast<int>(mlp_scale.size()) != c.n_layers)
    bad("layer count");
  for (int l = 0; l < c.n_layers; ++l) {
    if (!is_permutation_of(head_perm[l], c.n_heads)) bad("head permutation");
    if (!is_permutation_of(mlp_perm[l], c.d_mlp)) bad("mlp permutation");
    if (static_cast<int>(qk_rot[l].size()) != c.n_heads || static_cast<int>(vo_rot[l].size()) != c.n_heads)
      bad("head rotation count");
    for (int h = 0; h < c.n_heads; ++h) {
      for (const MatD* q : {&qk_rot[l][h], &vo_rot[l][h]}) {
        if (q->rows() != c.d_head || q->cols() != c.d_head || orthogonality_error(*q) > 1e-6)
          bad("head rotation not orthogonal");
      }
    }
    if (static_cast<int>(mlp_scale[l].size()) != c.d_mlp) bad("mlp scale count");
    for (double s : mlp_scale[l])
      if (!(s > 0.0) || !std::isfinite(s)) bad("mlp scale must be positive");
  }
  if (resid_rot.rows() != c.d_model || resid_rot.cols() != c.d_model || orthogonality_error(resid_rot) > 1e-6)
    bad("residual rotation not orthogonal");
}

WeightsD apply_symmetry(const WeightsD& w, const SymmetryElement& g) {
  const ModelConfig& c = w.config;
  g.validate(c);
  require_unit_gains(w);
  const MatD& R = g.resid_rot;
  const int dh = c.d_head;
  WeightsD out = w;
  out.W_E = w.W_E * R;
  out.W_pos = w.W_pos * R;
  out.W_U_tok = R.transpose() * w.W_U_tok;
  out.W_U_depth = R.transpose() * w.W_U_depth;
  out.W_U_valid = R.transpose() * w.W_U_valid;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = w.blocks[l];
    auto& o = out.blocks[l];
    for (int h = 0; h < c.n_heads; ++h) {
      int p = g.head_perm[l][h];
      o.W_Q.middleCols(h * dh, dh) = R.transpose() * b.W_Q.middleCols(p * dh, dh) * g.qk_rot[l][h];
      o.W_K.middleCols(h * dh, dh) = R.transpose() * b.W_K.middleCols(p * dh, dh) * g.qk_rot[l][h];
      o.W_V.middleCols(h * dh, dh) = R.transpose() * b.W_V.middleCols(p * dh, dh) * g.vo_rot[l][h];
      o.W_O.middleRows(h * dh, dh) = g.vo_rot[l][h].transpose() * b.W_O.middleRows(p * dh, dh) * R;
    }
    MatD win = R.transpose() * b.W_in;
    MatD wout = b.W_out * R;
    for (int j = 0; j < c.d_mlp; ++j) {
      int k = g.mlp_perm[l][j];
      double s = g.mlp_scale[l][j];
      o.W_in.col(j) = s * win.col(k);
      o.W_out.row(j) = wout.row(k) / s;
    }
  }
  return out;
}

WeightsF apply_symmetry(const WeightsF& w, const SymmetryElement& g) {
  return apply_symmetry(w.cast<double>(), g).cast<float>();
}

std::map<std::string, double> per_tensor_mse(const WeightsD& a, const WeightsD& b) {
  if (!(a.config == b.config)) throw std::invalid_argument("per_tensor_mse: config mismatch");
  std::map<std::string, double> out;
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    out[ta[i].first] = (*ta[i].second - *tb[i].second).squaredNorm() / static_cast<double>(ta[i].second->size());
  return out;
}

nlohmann::json AlignmentResult::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["lambda"] = lambda;
  j["max_mse"] = max_mse;
  j["max_tensor"] = max_tensor;
  j["global_mse"] = global_mse;
  j["per_tensor_mse"] = per_tensor_mse;
  j["config_index"] = config_index;
  j["with_rotation"] = with_rotation;
  j["history"] = history;
  if (act_mse) j["act_mse"] = *act_mse;
  j["resid_rot_frob_from_identity"] =
      (element.resid_rot - MatD::Identity(element.resid_rot.rows(), element.resid_rot.cols())).norm();
  return j;
}

// ---------------------------------------------------------------------------

AlignmentResult align_from(const WeightsD& folded_a, const WeightsD& folded_b,
                           const std::vector<std::vector<int>>& head_start, bool with_rotation, int iterations) {
  require_unit_gains(folded_a);
  require_unit_gains(folded_b);
  if (!(folded_a.config == folded_b.config)) throw std::invalid_argument("align: config mismatch");
  const ModelConfig& c = folded_a.config;
  AlignmentResult r;
  r.with_rotation = with_rotation;
  r.element = SymmetryElement::identity(c);
  r.element.head_perm = head_start;
  r.element.validate(c);
  for (int it = 0; it < iterations; ++it) {
    if (with_rotation) {
      WeightsD bt = apply_symmetry(folded_b, without_rotation(r.element));
      r.element.resid_rot = residual_procrustes(folded_a, bt);
    }
    WeightsD br = model::rotate_residual(folded_b, r.element.resid_rot);
    head_step(folded_a, br, r.element);
    mlp_step(folded_a, br, r.element);
    r.history.push_back(global_mse(folded_a, apply_symmetry(folded_b, r.element)));
  }
  finalize(r, folded_a, folded_b);
  return r;
}

AlignmentResult multistart_align(const WeightsF& a, const WeightsF& b, const AlignOptions& options) {
  WeightsD fa = model::fold_gains(a.cast<double>());
  WeightsD fb = model::fold_gains(b.cast<double>());
  Rng rng(options.seed);
  AlignmentResult best;
  bool have = false;
  for (int s = 0; s < options.n_perm_starts; ++s) {
    std::vector<std::vector<int>> start;
    for (int l = 0; l < a.config.n_layers; ++l) start.push_back(random_perm(a.config.n_heads, rng));
    for (int rot = 0; rot < 2; ++rot) {
      AlignmentResult r = align_from(fa, fb, start, rot == 0, options.iterations);
      r.config_index = 2 * s + rot;
      if (!have || r.max_mse < best.max_mse) {
        best = std::move(r);
        have = true;
      }
    }
  }
  return best;
}

MatD cayley(const MatD& skew) {
  const Eigen::Index d = skew.rows();
  MatD I = MatD::Identity(d, d);
  Eigen::MatrixXd plus = I + skew;
  return (I - skew) * plus.partialPivLu().inverse();
}

ActPair residual_acts(const WeightsF& a, const WeightsF& b, const model::PackedBatch& batch) {
  ActPair out;
  auto pa = model::forward(a, batch);
  auto pb = model::forward(b, batch);
  for (const auto& s : model::residual_sites(a.config)) {
    out.a.push_back(pa.site(s).cast<double>());
    out.b.push_back(pb.site(s).cast<double>());
  }
  return out;
}

double activation_mse(const ActPair& acts, const MatD& R) {
  if (acts.a.empty() || acts.a.size() != acts.b.size()) throw std::invalid_argument("activation_mse: bad ActPair");
  double total = 0.0;
  for (std::size_t s = 0; s < acts.a.size(); ++s)
    total += (acts.b[s] * R - acts.a[s]).squaredNorm() / static_cast<double>(acts.a[s].size());
  return total / static_cast<double>(acts.a.size());
}

AlignmentResult cayley_refine(const AlignmentResult& base, const WeightsF& a, const WeightsF& b, const ActPair* acts,
                              const CayleyOptions& options) {
  const double lambda = options.lambda;
  if (lambda != 0.0 && acts == nullptr) throw std::invalid_argument("cayley_refine: lambda > 0 needs activations");
  WeightsD fa = model::fold_gains(a.cast<double>());
  WeightsD fb = model::fold_gains(b.cast<double>());
  const int d = fa.config.d_model;
  WeightsD bt = apply_symmetry(fb, without_rotation(base.element));

  // Every per-tensor MSE is affine in R: (k_t - 2 <R, M_t>) / n_t.
  struct Term {
    MatD M;
    double k = 0.0;
    double n = 1.0;
  };
  std::vector<Term> terms;
  double total_n = 0.0;
  {
    auto ta = fa.tensors();
    auto tb = bt.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) {
      Term t;
      t.n = static_cast<double>(ta[i].second->size());
      total_n += t.n;
      switch (model::residual_axis(ta[i].first)) {
        case ResidualAxis::cols:
          t.M = tb[i].second->transpose() * *ta[i].second;
          t.k = tb[i].second->squaredNorm() + ta[i].second->squaredNorm();
          break;
        case ResidualAxis::rows:
          t.M = *tb[i].second * ta[i].second->transpose();
          t.k = tb[i].second->squaredNorm() + ta[i].second->squaredNorm();
          break;
        default:
          t.M = MatD::Zero(d, d);
          t.k = (*tb[i].second - *ta[i].second).squaredNorm();
          break;
      }
      terms.push_back(std::move(t));
    }
  }
  std::vector<Term> act_terms;
  if (acts) {
    for (std::size_t s = 0; s < acts->a.size(); ++s) {
      Term t;
      t.n = static_cast<double>(acts->a[s].size());
      t.M = acts->b[s].transpose() * acts->a[s];
      t.k = acts->b[s].squaredNorm() + acts->a[s].squaredNorm();
      act_terms.push_back(std::move(t));
    }
  }

  const MatD R0 = base.element.resid_rot;
  std::vector<double> mse(terms.size());
  double tau = 1.0;
  {
    double m0 = 0.0;
    for (const auto& t : terms) m0 = std::max(m0, (t.k - 2.0 * (R0.array() * t.M.array()).sum()) / t.n);
    tau = std::max(options.temperature * m0, 1e-300);
  }

  // loss and dL/dR at R
  auto evaluate = [&](const MatD& R, MatD& G) {
    for (std::size_t i = 0; i < terms.size(); ++i)
      mse[i] = (terms[i].k - 2.0 * (R.array() * terms[i].M.array()).sum()) / terms[i].n;
    std::vector<double> wt(terms.size());
    double weight_loss = 0.0;
    switch (options.objective) {
      case WeightObjective::global:
        for (std::size_t i = 0; i < terms.size(); ++i) {
          wt[i] = terms[i].n / total_n;
          weight_loss += wt[i] * mse[i];
        }
        break;
      case WeightObjective::mean_tensor:
        for (std::size_t i = 0; i < terms.size(); ++i) {
          wt[i] = 1.0 / static_cast<double>(terms.size());
          weight_loss += wt[i] * mse[i];
        }
        break;
      case WeightObjective::smooth_max: {
        double mx = *std::max_element(mse.begin(), mse.end());
        double z = 0.0;
        for (std::size_t i = 0; i < terms.size(); ++i) z += std::exp((mse[i] - mx) / tau);
        for (std::size_t i = 0; i < terms.size(); ++i) wt[i] = std::exp((mse[i] - mx) / tau) / z;
        weight_loss = mx + tau * std::log(z);
        break;
      }
    }
    G = MatD::Zero(d, d);
    for (std::size_t i = 0; i < terms.size(); ++i) G -= (1.0 - lambda) * wt[i] * 2.0 / terms[i].n * terms[i].M;
    double act_loss = 0.0;
    for (const auto& t : act_terms) {
      const double w = 1.0 / static_cast<double>(act_terms.size());
      act_loss += w * (t.k - 2.0 * (R.array() * t.M.array()).sum()) / t.n;
      G -= lambda * w * 2.0 / t.n * t.M;
    }
    return (1.0 - lambda) * weight_loss + lambda * act_loss;
  };

  MatD S = MatD::Zero(d, d);
  MatD m1 = MatD::Zero(d, d);
  MatD m2 = MatD::Zero(d, d);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const MatD I = MatD::Identity(d, d);
  MatD G;
  double best_loss = evaluate(R0, G);
  MatD best_R = R0;
  double prev = best_loss;
  for (int step = 1; step <= options.steps; ++step) {
    MatD C = cayley(S);
    MatD R = R0 * C;
    double loss = evaluate(R, G);
    if (loss < best_loss) {
      best_loss = loss;
      best_R = R;
    }
    if (step > 1 && std::abs(prev - loss) <= options.rel_tol * std::max(std::abs(prev), 1e-300)) break;
    prev = loss;
    Eigen::MatrixXd plus = I + S;
    MatD X = plus.partialPivLu().inverse();
    MatD gS = -(I + C).transpose() * (R0.transpose() * G) * X.transpose();
    gS = (0.5 * (gS - gS.transpose())).eval();
    m1 = b1 * m1 + (1 - b1) * gS;
    m2 = b2 * m2 + (1 - b2) * gS.cwiseProduct(gS);
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    MatD upd = (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps);
    S -= options.lr * upd;
    S = (0.5 * (S - S.transpose())).eval();
  }

  AlignmentResult r = base;
  r.element.resid_rot = best_R;
  r.method = lambda == 0.0 ? "cayley" : "joint";
  r.lambda = lambda;
  r.history.clear();
  finalize(r, fa, fb);
  if (acts) r.act_mse = activation_mse(*acts, best_R);
  return r;
}

bars::BarReport bar_p(const AlignmentResult& result) {
  bars::BarReport rep;
  rep.bar = "P";
  rep.value = result.max_mse;
  rep.threshold = bars::kBarPThreshold;
  rep.pass = result.max_mse < bars::kBarPThreshold;
  rep.breakdown = result.to_json();
  return rep;
}

}  // namespace rotaudit::symmetry
