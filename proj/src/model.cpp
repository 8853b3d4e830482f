#include "rotaudit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rotaudit::model {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// "resid_mid_1" -> {"resid_mid", 1}
std::pair<std::string, int> split_site(const std::string& site) {
  const auto pos = site.rfind('_');
  if (pos == std::string::npos || pos + 1 >= site.size())
    throw std::invalid_argument("malformed site name: " + site);
  try {
    return {site.substr(0, pos), std::stoi(site.substr(pos + 1))};
  } catch (const std::exception&) {
    throw std::invalid_argument("malformed site name: " + site);
  }
}

template <typename S>
void rms_forward(const Mat<S>& x, const Mat<S>& gain, Mat<S>& normed, Mat<S>& scaled,
                 std::vector<double>& inv_rms) {
  const auto rows = x.rows();
  const auto d = x.cols();
  normed.resize(rows, d);
  inv_rms.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double v = static_cast<double>(x(r, c));
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    inv_rms[static_cast<std::size_t>(r)] = inv;
    for (Eigen::Index c = 0; c < d; ++c) normed(r, c) = static_cast<S>(static_cast<double>(x(r, c)) * inv);
  }
  scaled = normed.array().rowwise() * gain.row(0).array();
}

// dL/dx given dL/d(normed), using normed = x * inv_rms.
template <typename S>
Mat<S> rms_backward(const Mat<S>& normed, const std::vector<double>& inv_rms, const Mat<S>& d_normed) {
  const auto rows = normed.rows();
  const auto d = normed.cols();
  Mat<S> dx(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (Eigen::Index c = 0; c < d; ++c)
      dot += static_cast<double>(d_normed(r, c)) * static_cast<double>(normed(r, c));
    dot /= static_cast<double>(d);
    const double inv = inv_rms[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < d; ++c)
      dx(r, c) = static_cast<S>(inv * (static_cast<double>(d_normed(r, c)) - static_cast<double>(normed(r, c)) * dot));
  }
  return dx;
}

template <typename S>
void add_steer(Mat<S>& x, const Intervention<S>* iv, const std::string& site) {
  if (iv && !iv->steer_site.empty() && iv->steer_site == site) {
    if (iv->steer.size() != x.cols()) throw std::invalid_argument("steering vector width mismatch");
    x.rowwise() += iv->steer;
  }
}

template <typename S>
Mat<S> mix_with_baseline(const Mat<S>& clean, const Intervention<S>& iv) {
  if (iv.baseline.size() != clean.cols()) throw std::invalid_argument("intervention baseline width mismatch");
  Mat<S> out = clean * iv.alpha;
  out.rowwise() += iv.baseline * (S(1) - iv.alpha);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_head = 8;
  c.d_mlp = 128;
  c.n_ctx = 34;
  return c;
}

std::int64_t ModelConfig::parameter_count() const {
  const std::int64_t d = d_model;
  const std::int64_t attn = static_cast<std::int64_t>(n_heads) * d_head;
  const std::int64_t per_layer = 2 * d + 4 * d * attn + 2 * d * d_mlp;
  return vocab * d + n_layers * per_layer + d + d * (vocab + dyck::kDepthClasses + dyck::kValidClasses);
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_head <= 0 || d_mlp <= 0 || n_ctx <= 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (vocab < dyck::kMeaningfulTokens) throw std::invalid_argument("ModelConfig: vocab too small");
  if (n_pos_dims != 6 || d_model < n_pos_dims)
    throw std::invalid_argument("ModelConfig: positional buffer needs 6 reserved dims");
}

// ---------------------------------------------------------------------------
// Weights

template <typename S>
ModelWeights<S> ModelWeights<S>::zeros(const ModelConfig& c) {
  c.validate();
  ModelWeights<S> w;
  w.config = c;
  const int attn = c.n_heads * c.d_head;
  w.W_E = Mat<S>::Zero(c.vocab, c.d_model);
  w.W_pos = Mat<S>::Zero(c.n_ctx, c.d_model);
  w.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : w.blocks) {
    b.ln1 = Mat<S>::Ones(1, c.d_model);
    b.W_Q = Mat<S>::Zero(c.d_model, attn);
    b.W_K = Mat<S>::Zero(c.d_model, attn);
    b.W_V = Mat<S>::Zero(c.d_model, attn);
    b.W_O = Mat<S>::Zero(attn, c.d_model);
    b.ln2 = Mat<S>::Ones(1, c.d_model);
    b.W_in = Mat<S>::Zero(c.d_model, c.d_mlp);
    b.W_out = Mat<S>::Zero(c.d_mlp, c.d_model);
  }
  w.ln_final = Mat<S>::Ones(1, c.d_model);
  w.W_U_tok = Mat<S>::Zero(c.d_model, c.vocab);
  w.W_U_depth = Mat<S>::Zero(c.d_model, dyck::kDepthClasses);
  w.W_U_valid = Mat<S>::Zero(c.d_model, dyck::kValidClasses);
  return w;
}

template <typename S>
std::vector<std::pair<std::string, Mat<S>*>> ModelWeights<S>::tensors() {
  std::vector<std::pair<std::string, Mat<S>*>> out;
  out.emplace_back("embed.W_E", &W_E);
  out.emplace_back("pos.W_pos", &W_pos);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    auto& b = blocks[l];
    out.emplace_back(p + "ln1.w", &b.ln1);
    out.emplace_back(p + "attn.W_Q", &b.W_Q);
    out.emplace_back(p + "attn.W_K", &b.W_K);
    out.emplace_back(p + "attn.W_V", &b.W_V);
    out.emplace_back(p + "attn.W_O", &b.W_O);
    out.emplace_back(p + "ln2.w", &b.ln2);
    out.emplace_back(p + "mlp.W_in", &b.W_in);
    out.emplace_back(p + "mlp.W_out", &b.W_out);
  }
  out.emplace_back("ln_final.w", &ln_final);
  out.emplace_back("unembed.W_U_tok", &W_U_tok);
  out.emplace_back("unembed.W_U_depth", &W_U_depth);
  out.emplace_back("unembed.W_U_valid", &W_U_valid);
  return out;
}

template <typename S>
std::vector<std::pair<std::string, const Mat<S>*>> ModelWeights<S>::tensors() const {
  auto mut = const_cast<ModelWeights<S>*>(this)->tensors();
  std::vector<std::pair<std::string, const Mat<S>*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(name, ptr);
  return out;
}

template <typename S>
Mat<S>& ModelWeights<S>::tensor(const std::string& name) {
  for (auto& [n, ptr] : tensors())
    if (n == name) return *ptr;
  throw std::out_of_range("unknown tensor: " + name);
}

template <typename S>
const Mat<S>& ModelWeights<S>::tensor(const std::string& name) const {
  return const_cast<ModelWeights<S>*>(this)->tensor(name);
}

template <typename S>
bool ModelWeights<S>::is_trainable(const std::string& name) const {
  return name != "pos.W_pos" && !frozen.contains(name);
}

template <typename S>
template <typename T>
ModelWeights<T> ModelWeights<S>::cast() const {
  ModelWeights<T> out = ModelWeights<T>::zeros(config);
  out.frozen = frozen;
  auto dst = out.tensors();
  auto src = tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<T>();
  return out;
}

ResidualAxis residual_axis(const std::string& name) {
  if (ends_with(name, ".w")) return ResidualAxis::gain;
  if (name == "embed.W_E" || name == "pos.W_pos" || ends_with(name, "attn.W_O") || ends_with(name, "mlp.W_out"))
    return ResidualAxis::cols;
  if (ends_with(name, "attn.W_Q") || ends_with(name, "attn.W_K") || ends_with(name, "attn.W_V") ||
      ends_with(name, "mlp.W_in") || name.starts_with("unembed."))
    return ResidualAxis::rows;
  return ResidualAxis::none;
}

const std::vector<std::string>& shared_io_tensor_names() {
  static const std::vector<std::string> names = {"embed.W_E", "unembed.W_U_tok", "unembed.W_U_depth",
                                                 "unembed.W_U_valid"};
  return names;
}

template <typename S>
Mat<S> positional_buffer(const ModelConfig& c) {
  Mat<S> p = Mat<S>::Zero(c.n_ctx, c.d_model);
  const double omega = 2.0 * std::numbers::pi / c.n_ctx;
  for (int t = 0; t < c.n_ctx; ++t) {
    const double td = t;
    p(t, 0) = static_cast<S>(td / c.n_ctx);
    p(t, 1) = static_cast<S>(1.0 / (td + 1.0));
    p(t, 2) = static_cast<S>(std::log(td + 1.0));
    p(t, 3) = static_cast<S>(t == 0 ? 1.0 : 0.0);
    p(t, 4) = static_cast<S>(std::cos(omega * td));
    p(t, 5) = static_cast<S>(std::sin(omega * td));
  }
  return p;
}

WeightsF init_weights(const ModelConfig& c, Rng& rng, const WeightsF* shared_io) {
  WeightsF w = WeightsF::zeros(c);
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * c.n_layers);
  w.W_E = random_normal<float>(c.vocab, c.d_model, rng, base);
  w.W_pos = positional_buffer<float>(c);
  for (auto& b : w.blocks) {
    b.W_Q = random_normal<float>(b.W_Q.rows(), b.W_Q.cols(), rng, base);
    b.W_K = random_normal<float>(b.W_K.rows(), b.W_K.cols(), rng, base);
    b.W_V = random_normal<float>(b.W_V.rows(), b.W_V.cols(), rng, base);
    b.W_O = random_normal<float>(b.W_O.rows(), b.W_O.cols(), rng, resid);
    b.W_in = random_normal<float>(b.W_in.rows(), b.W_in.cols(), rng, base);
    b.W_out = random_normal<float>(b.W_out.rows(), b.W_out.cols(), rng, resid);
  }
  w.W_U_tok = random_normal<float>(c.d_model, c.vocab, rng, base);
  w.W_U_depth = random_normal<float>(c.d_model, dyck::kDepthClasses, rng, base);
  w.W_U_valid = random_normal<float>(c.d_model, dyck::kValidClasses, rng, base);

  if (shared_io) {
    if (!(shared_io->config == c)) throw std::invalid_argument("init_weights: shared_io config mismatch");
    for (const auto& name : shared_io_tensor_names()) {
      const auto& src = shared_io->tensor(name);
      auto& dst = w.tensor(name);
      if (src.rows() != dst.rows() || src.cols() != dst.cols())
        throw std::invalid_argument("init_weights: shared_io shape mismatch on " + name);
      dst = src;
      w.frozen.insert(name);
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Batches

PackedBatch PackedBatch::from(const std::vector<dyck::LabeledSequence>& seqs) {
  std::vector<std::vector<int>> toks;
  toks.reserve(seqs.size());
  for (const auto& s : seqs) toks.push_back(s.tokens);
  return from_tokens(toks);
}

PackedBatch PackedBatch::from_tokens(const std::vector<std::vector<int>>& seqs) {
  PackedBatch b;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t < s.size(); ++t) {
      b.tokens.push_back(s[t]);
      b.positions.push_back(static_cast<int>(t));
    }
    b.offsets.push_back(static_cast<int>(b.tokens.size()));
  }
  return b;
}

Labels Labels::from(const std::vector<dyck::LabeledSequence>& seqs) {
  Labels l;
  for (const auto& s : seqs) {
    l.tok.insert(l.tok.end(), s.bracket_type.begin(), s.bracket_type.end());
    l.depth.insert(l.depth.end(), s.depth.begin(), s.depth.end());
    l.valid.insert(l.valid.end(), s.valid.begin(), s.valid.end());
  }
  return l;
}

std::string ComponentId::name() const {
  return "L" + std::to_string(layer) + (is_mlp() ? std::string("-mlp") : "-H" + std::to_string(head));
}

std::vector<ComponentId> enumerate_components(const ModelConfig& c) {
  std::vector<ComponentId> out;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) out.push_back({l, h});
    out.push_back({l, -1});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sites

std::vector<std::string> residual_sites(const ModelConfig& c) {
  std::vector<std::string> out;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto i = std::to_string(l);
    out.push_back("resid_pre_" + i);
    out.push_back("resid_mid_" + i);
    out.push_back("resid_post_" + i);
  }
  out.push_back("resid_pre_" + std::to_string(c.n_layers));
  return out;
}

std::vector<std::string> site_names(const ModelConfig& c) {
  auto out = residual_sites(c);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto i = std::to_string(l);
    out.push_back("attn_out_" + i);
    out.push_back("mlp_in_" + i);
    out.push_back("mlp_pre_" + i);
    out.push_back("mlp_post_" + i);
  }
  return out;
}

int site_width(const ModelConfig& c, const std::string& site) {
  const auto [kind, layer] = split_site(site);
  if (layer < 0 || layer > c.n_layers) throw std::invalid_argument("site layer out of range: " + site);
  if (kind == "mlp_pre" || kind == "mlp_post") return c.d_mlp;
  if (kind == "resid_pre" || kind == "resid_mid" || kind == "resid_post" || kind == "attn_out" || kind == "mlp_in")
    return c.d_model;
  throw std::invalid_argument("unknown site: " + site);
}

template <typename S>
Mat<S> ForwardPass<S>::site(const std::string& name) const {
  const auto [kind, l] = split_site(name);
  const int n_layers = static_cast<int>(layers.size());
  if (kind == "resid_pre" && l == n_layers) return final_norm;
  if (l < 0 || l >= n_layers) throw std::invalid_argument("site layer out of range: " + name);
  const auto& t = layers[static_cast<std::size_t>(l)];
  if (kind == "resid_pre") return t.x_in;
  if (kind == "resid_mid") return t.x_mid;
  if (kind == "resid_post") return t.x_out;
  if (kind == "attn_out") return t.attn_out;
  if (kind == "mlp_in") return t.h2;
  if (kind == "mlp_pre") return t.pre;
  if (kind == "mlp_post") return t.post;
  throw std::invalid_argument("unknown site: " + name);
}

// ---------------------------------------------------------------------------
// Forward

template <typename S>
ForwardPass<S> forward(const ModelWeights<S>& w, const PackedBatch& batch, const Intervention<S>* iv) {
  const auto& c = w.config;
  const int rows = batch.rows();
  const int d = c.d_model;
  const int dh = c.d_head;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (iv && iv->component && (iv->component->layer < 0 || iv->component->layer >= c.n_layers ||
                              iv->component->head >= c.n_heads))
    throw std::invalid_argument("intervention component out of range");

  ForwardPass<S> fp;
  Mat<S> x(rows, d);
  for (int r = 0; r < rows; ++r) {
    const int tok = batch.tokens[static_cast<std::size_t>(r)];
    const int pos = batch.positions[static_cast<std::size_t>(r)];
    if (tok < 0 || tok >= c.vocab) throw std::invalid_argument("forward: token id outside vocab");
    if (pos >= c.n_ctx) throw std::invalid_argument("forward: sequence longer than n_ctx");
    x.row(r) = w.W_E.row(tok) + w.W_pos.row(pos);
  }

  fp.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = w.blocks[static_cast<std::size_t>(l)];
    auto& t = fp.layers[static_cast<std::size_t>(l)];
    const auto li = std::to_string(l);
    add_steer(x, iv, "resid_pre_" + li);
    t.x_in = x;

    rms_forward(t.x_in, b.ln1, t.n1, t.h1, t.inv_rms1);
    t.q = t.h1 * b.W_Q;
    t.k = t.h1 * b.W_K;
    t.v = t.h1 * b.W_V;
    t.z = Mat<S>::Zero(rows, c.n_heads * dh);
    t.probs.resize(static_cast<std::size_t>(batch.n_sequences() * c.n_heads));
    for (int s = 0; s < batch.n_sequences(); ++s) {
      const int off = batch.offsets[static_cast<std::size_t>(s)];
      const int T = batch.seq_len(s);
      for (int h = 0; h < c.n_heads; ++h) {
        Mat<S> scores = (t.q.block(off, h * dh, T, dh) * t.k.block(off, h * dh, T, dh).transpose()) * scale;
        Mat<S>& p = t.probs[static_cast<std::size_t>(s * c.n_heads + h)];
        p = Mat<S>::Zero(T, T);
        for (int i = 0; i < T; ++i) {
          double mx = static_cast<double>(scores(i, 0));
          for (int j = 1; j <= i; ++j) mx = std::max(mx, static_cast<double>(scores(i, j)));
          double sum = 0.0;
          std::vector<double> e(static_cast<std::size_t>(i + 1));
          for (int j = 0; j <= i; ++j) {
            e[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(scores(i, j)) - mx);
            sum += e[static_cast<std::size_t>(j)];
          }
          for (int j = 0; j <= i; ++j) p(i, j) = static_cast<S>(e[static_cast<std::size_t>(j)] / sum);
        }
        t.z.block(off, h * dh, T, dh).noalias() = p * t.v.block(off, h * dh, T, dh);
      }
    }
    t.attn_out = t.z * b.W_O;
    if (iv && iv->component && iv->component->layer == l && !iv->component->is_mlp()) {
      const int h = iv->component->head;
      fp.component_clean = t.z.middleCols(h * dh, dh) * b.W_O.middleRows(h * dh, dh);
      t.attn_out += mix_with_baseline(fp.component_clean, *iv) - fp.component_clean;
    }
    t.x_mid = t.x_in + t.attn_out;
    add_steer(t.x_mid, iv, "resid_mid_" + li);

    rms_forward(t.x_mid, b.ln2, t.n2, t.h2, t.inv_rms2);
    t.pre = t.h2 * b.W_in;
    t.post = t.pre.cwiseMax(S(0));
    t.mlp_out = t.post * b.W_out;
    if (iv && iv->component && iv->component->layer == l && iv->component->is_mlp()) {
      fp.component_clean = t.mlp_out;
      t.mlp_out = mix_with_baseline(fp.component_clean, *iv);
    }
    t.x_out = t.x_mid + t.mlp_out;
    add_steer(t.x_out, iv, "resid_post_" + li);
    x = t.x_out;
  }

  Mat<S> scaled;
  rms_forward(x, w.ln_final, fp.final_norm, scaled, fp.inv_rms_final);
  fp.logits_tok = scaled * w.W_U_tok;
  fp.logits_depth = scaled * w.W_U_depth;
  fp.logits_valid = scaled * w.W_U_valid;
  return fp;
}

SequenceOutputs forward(const WeightsF& w, const std::vector<int>& tokens) {
  const auto batch = PackedBatch::from_tokens({tokens});
  const auto fp = forward(w, batch);
  return {fp.logits_tok, fp.logits_depth, fp.logits_valid, collect_cache(fp, site_names(w.config))};
}

ActivationCache collect_cache(const ForwardPass<float>& pass, const std::vector<std::string>& sites) {
  ActivationCache cache;
  for (const auto& s : sites) cache.emplace(s, pass.site(s));
  return cache;
}

// ---------------------------------------------------------------------------
// Loss

template <typename S>
LossGrad<S> loss_and_grad(const ForwardPass<S>& pass, const Labels& labels, bool want_grad) {
  const int rows = labels.rows();
  if (pass.logits_tok.rows() != rows) throw std::invalid_argument("loss_and_grad: label count mismatch");
  LossGrad<S> lg;
  const std::array<const Mat<S>*, 3> logits = {&pass.logits_tok, &pass.logits_depth, &pass.logits_valid};
  const std::array<const std::vector<int>*, 3> targets = {&labels.tok, &labels.depth, &labels.valid};
  std::array<Mat<S>*, 3> grads = {&lg.d_tok, &lg.d_depth, &lg.d_valid};
  const double inv_rows = 1.0 / std::max(rows, 1);
  for (int k = 0; k < 3; ++k) {
    const auto& z = *logits[static_cast<std::size_t>(k)];
    const auto& y = *targets[static_cast<std::size_t>(k)];
    auto& g = *grads[static_cast<std::size_t>(k)];
    if (want_grad) g.resize(z.rows(), z.cols());
    double total = 0.0;
    std::vector<double> e(static_cast<std::size_t>(z.cols()));
    for (int r = 0; r < rows; ++r) {
      const int label = y[static_cast<std::size_t>(r)];
      double mx = static_cast<double>(z.row(r).maxCoeff());
      double sum = 0.0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        e[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(z(r, c)) - mx);
        sum += e[static_cast<std::size_t>(c)];
      }
      total += std::log(sum) + mx - static_cast<double>(z(r, label));
      if (want_grad) {
        for (Eigen::Index c = 0; c < z.cols(); ++c) {
          const double p = e[static_cast<std::size_t>(c)] / sum - (c == label ? 1.0 : 0.0);
          g(r, c) = static_cast<S>(p * inv_rows);
        }
      }
    }
    lg.per_head[static_cast<std::size_t>(k)] = total * inv_rows;
    lg.loss += total * inv_rows;
  }
  return lg;
}

std::array<double, 3> head_accuracy(const ForwardPass<float>& pass, const Labels& labels) {
  std::array<double, 3> acc{};
  const std::array<const MatF*, 3> logits = {&pass.logits_tok, &pass.logits_depth, &pass.logits_valid};
  const std::array<const std::vector<int>*, 3> targets = {&labels.tok, &labels.depth, &labels.valid};
  const int rows = labels.rows();
  for (std::size_t k = 0; k < 3; ++k) {
    int correct = 0;
    for (int r = 0; r < rows; ++r) {
      Eigen::Index arg = 0;
      logits[k]->row(r).maxCoeff(&arg);
      if (static_cast<int>(arg) == (*targets[k])[static_cast<std::size_t>(r)]) ++correct;
    }
    acc[k] = rows ? static_cast<double>(correct) / rows : 1.0;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Backward

template <typename S>
Gradients<S> backward(const ModelWeights<S>& w, const PackedBatch& batch, const ForwardPass<S>& fp,
                      const LossGrad<S>& lg, const Intervention<S>* iv, bool param_grads) {
  const auto& c = w.config;
  const int dh = c.d_head;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  Gradients<S> g;
  if (param_grads) {
    g.params = ModelWeights<S>::zeros(c);
    for (auto& [name, t] : g.params.tensors()) t->setZero();
  }
  g.d_attn_out.resize(static_cast<std::size_t>(c.n_layers));
  g.d_mlp_out.resize(static_cast<std::size_t>(c.n_layers));

  // Unembed and final norm.
  Mat<S> scaled = fp.final_norm.array().rowwise() * w.ln_final.row(0).array();
  Mat<S> d_scaled = lg.d_tok * w.W_U_tok.transpose() + lg.d_depth * w.W_U_depth.transpose() +
                    lg.d_valid * w.W_U_valid.transpose();
  if (param_grads) {
    g.params.W_U_tok.noalias() = scaled.transpose() * lg.d_tok;
    g.params.W_U_depth.noalias() = scaled.transpose() * lg.d_depth;
    g.params.W_U_valid.noalias() = scaled.transpose() * lg.d_valid;
    g.params.ln_final = (d_scaled.array() * fp.final_norm.array()).colwise().sum();
  }
  Mat<S> d_normed = d_scaled.array().rowwise() * w.ln_final.row(0).array();
  Mat<S> dx = rms_backward(fp.final_norm, fp.inv_rms_final, d_normed);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& b = w.blocks[static_cast<std::size_t>(l)];
    const auto& t = fp.layers[static_cast<std::size_t>(l)];
    auto* gb = param_grads ? &g.params.blocks[static_cast<std::size_t>(l)] : nullptr;
    const bool mlp_target = iv && iv->component && iv->component->layer == l && iv->component->is_mlp();
    const bool head_target = iv && iv->component && iv->component->layer == l && !iv->component->is_mlp();

    // MLP
    g.d_mlp_out[static_cast<std::size_t>(l)] = dx;
    Mat<S> d_mlp = mlp_target ? Mat<S>(dx * iv->alpha) : dx;
    Mat<S> d_post = d_mlp * b.W_out.transpose();
    Mat<S> d_pre = (t.pre.array() > S(0)).select(d_post, S(0));
    if (gb) {
      gb->W_out.noalias() = t.post.transpose() * d_mlp;
      gb->W_in.noalias() = t.h2.transpose() * d_pre;
    }
    Mat<S> d_h2 = d_pre * b.W_in.transpose();
    if (gb) gb->ln2 = (d_h2.array() * t.n2.array()).colwise().sum();
    Mat<S> d_n2 = d_h2.array().rowwise() * b.ln2.row(0).array();
    Mat<S> d_mid = dx + rms_backward(t.n2, t.inv_rms2, d_n2);

    // Attention
    g.d_attn_out[static_cast<std::size_t>(l)] = d_mid;
    Mat<S> dz = d_mid * b.W_O.transpose();
    if (gb) gb->W_O.noalias() = t.z.transpose() * d_mid;
    if (head_target) {
      const int h = iv->component->head;
      dz.middleCols(h * dh, dh) *= iv->alpha;
      if (gb) gb->W_O.middleRows(h * dh, dh) *= iv->alpha;
    }
    Mat<S> dq = Mat<S>::Zero(t.q.rows(), t.q.cols());
    Mat<S> dk = Mat<S>::Zero(t.k.rows(), t.k.cols());
    Mat<S> dv = Mat<S>::Zero(t.v.rows(), t.v.cols());
    for (int s = 0; s < batch.n_sequences(); ++s) {
      const int off = batch.offsets[static_cast<std::size_t>(s)];
      const int T = batch.seq_len(s);
      for (int h = 0; h < c.n_heads; ++h) {
        const Mat<S>& p = t.probs[static_cast<std::size_t>(s * c.n_heads + h)];
        const auto dzh = dz.block(off, h * dh, T, dh);
        Mat<S> dp = dzh * t.v.block(off, h * dh, T, dh).transpose();
        dv.block(off, h * dh, T, dh).noalias() = p.transpose() * dzh;
        Mat<S> ds(T, T);
        for (int i = 0; i < T; ++i) {
          double dot = 0.0;
          for (int j = 0; j <= i; ++j) dot += static_cast<double>(p(i, j)) * static_cast<double>(dp(i, j));
          for (int j = 0; j < T; ++j)
            ds(i, j) = j <= i ? static_cast<S>(static_cast<double>(p(i, j)) * (static_cast<double>(dp(i, j)) - dot))
                              : S(0);
        }
        ds *= scale;
        dq.block(off, h * dh, T, dh).noalias() = ds * t.k.block(off, h * dh, T, dh);
        dk.block(off, h * dh, T, dh).noalias() = ds.transpose() * t.q.block(off, h * dh, T, dh);
      }
    }
    if (gb) {
      gb->W_Q.noalias() = t.h1.transpose() * dq;
      gb->W_K.noalias() = t.h1.transpose() * dk;
      gb->W_V.noalias() = t.h1.transpose() * dv;
    }
    Mat<S> d_h1 = dq * b.W_Q.transpose() + dk * b.W_K.transpose() + dv * b.W_V.transpose();
    if (gb) gb->ln1 = (d_h1.array() * t.n1.array()).colwise().sum();
    Mat<S> d_n1 = d_h1.array().rowwise() * b.ln1.row(0).array();
    dx = d_mid + rms_backward(t.n1, t.inv_rms1, d_n1);
  }

  if (param_grads) {
    for (int r = 0; r < batch.rows(); ++r) g.params.W_E.row(batch.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Transforms

template <typename S>
ModelWeights<S> fold_gains(const ModelWeights<S>& w) {
  ModelWeights<S> f = w;
  auto scale_rows = [](Mat<S>& m, const Mat<S>& gain) { m = m.array().colwise() * gain.row(0).transpose().array(); };
  for (auto& b : f.blocks) {
    scale_rows(b.W_Q, b.ln1);
    scale_rows(b.W_K, b.ln1);
    scale_rows(b.W_V, b.ln1);
    scale_rows(b.W_in, b.ln2);
    b.ln1.setOnes();
    b.ln2.setOnes();
  }
  scale_rows(f.W_U_tok, f.ln_final);
  scale_rows(f.W_U_depth, f.ln_final);
  scale_rows(f.W_U_valid, f.ln_final);
  f.ln_final.setOnes();
  return f;
}

bool has_unit_gains(const WeightsF& w, double tol) {
  for (const auto& [name, t] : w.tensors())
    if (residual_axis(name) == ResidualAxis::gain && (t->array() - 1.0f).abs().maxCoeff() > tol) return false;
  return true;
}

FoldedModel fold_rmsnorm(const WeightsF& w) {
  FoldedModel out{fold_gains(w), {}};
  for (const auto& [name, t] : out.weights.tensors()) {
    std::string role;
    if (name == "embed.W_E") role = "token embedding: opener/closer/family/special features";
    else if (name == "pos.W_pos") role = "fixed positional buffer: counter, inverse counter, log, BOS, cos, sin";
    else if (name.starts_with("unembed.")) role = "readout for the " + name.substr(10) + " head (final gain folded)";
    else if (residual_axis(name) == ResidualAxis::gain) role = "unit gain (folded)";
    else if (name.find("attn") != std::string::npos) role = "attention weights (norm gain folded into reads)";
    else role = "ReLU MLP (norm gain folded into W_in)";
    out.roles[name] = role;
  }
  const auto norms = head_norms(out);
  std::vector<double> qk;
  std::vector<double> ov;
  for (const auto& h : norms) {
    qk.push_back(h.qk_norm);
    ov.push_back(h.ov_norm);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? 0.0 : v[v.size() / 2];
  };
  const double qk_med = median(qk);
  const double ov_med = median(ov);
  for (const auto& h : norms) {
    const std::string key = "blocks." + std::to_string(h.layer) + ".head." + std::to_string(h.head);
    std::string sig = h.qk_norm < qk_med ? "low |QK|" : "high |QK|";
    sig += h.ov_norm >= ov_med ? ", high |OV|" : ", low |OV|";
    if (h.qk_norm < qk_med && h.ov_norm >= ov_med) sig += ": near-uniform causal average (counter-like)";
    else if (h.qk_norm >= qk_med) sig += ": selective lookup";
    out.roles[key] = sig;
  }
  return out;
}

template <typename S>
ModelWeights<S> rotate_residual(const ModelWeights<S>& w, const Mat<S>& q) {
  if (q.rows() != w.config.d_model || q.cols() != w.config.d_model)
    throw std::invalid_argument("rotate_residual: rotation has wrong shape");
  ModelWeights<S> out = w;
  for (auto& [name, t] : out.tensors()) {
    switch (residual_axis(name)) {
      case ResidualAxis::cols: *t = (*t) * q; break;
      case ResidualAxis::rows: *t = q.transpose() * (*t); break;
      case ResidualAxis::gain:
        if ((t->array() - S(1)).abs().maxCoeff() > S(1e-6))
          throw std::invalid_argument("rotate_residual: fold RMSNorm gains first (" + name + ")");
        break;
      case ResidualAxis::none: break;
    }
  }
  return out;
}

std::vector<HeadNorm> head_norms(const FoldedModel& folded) {
  const auto& w = folded.weights;
  const int dh = w.config.d_head;
  std::vector<HeadNorm> out;
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto& b = w.blocks[static_cast<std::size_t>(l)];
    for (int h = 0; h < w.config.n_heads; ++h) {
      const MatD wq = b.W_Q.middleCols(h * dh, dh).cast<double>();
      const MatD wk = b.W_K.middleCols(h * dh, dh).cast<double>();
      const MatD wv = b.W_V.middleCols(h * dh, dh).cast<double>();
      const MatD wo = b.W_O.middleRows(h * dh, dh).cast<double>();
      out.push_back({l, h, (wq * wk.transpose()).norm(), (wv * wo).norm()});
    }
  }
  return out;
}

WeightsF decoy_depth_unembed(const WeightsF& w) {
  WeightsF out = w;
  for (int pair = 0; pair < 4; ++pair) {
    const auto mean = ((w.W_U_depth.col(2 * pair) + w.W_U_depth.col(2 * pair + 1)) * 0.5f).eval();
    out.W_U_depth.col(2 * pair) = mean;
    out.W_U_depth.col(2 * pair + 1) = mean;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

template struct ModelWeights<float>;
template struct ModelWeights<double>;
template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;
template ModelWeights<double> ModelWeights<double>::cast<double>() const;
template Mat<float> positional_buffer<float>(const ModelConfig&);
template Mat<double> positional_buffer<double>(const ModelConfig&);
template struct ForwardPass<float>;
template struct ForwardPass<double>;
template ForwardPass<float> forward<float>(const WeightsF&, const PackedBatch&, const Intervention<float>*);
template ForwardPass<double> forward<double>(const WeightsD&, const PackedBatch&, const Intervention<double>*);
template LossGrad<float> loss_and_grad<float>(const ForwardPass<float>&, const Labels&, bool);
template LossGrad<double> loss_and_grad<double>(const ForwardPass<double>&, const Labels&, bool);
template Gradients<float> backward<float>(const WeightsF&, const PackedBatch&, const ForwardPass<float>&,
                                          const LossGrad<float>&, const Intervention<float>*, bool);
template Gradients<double> backward<double>(const WeightsD&, const PackedBatch&, const ForwardPass<double>&,
                                            const LossGrad<double>&, const Intervention<double>*, bool);
template WeightsF fold_gains<float>(const WeightsF&);
template WeightsD fold_gains<double>(const WeightsD&);
template WeightsF rotate_residual<float>(const WeightsF&, const MatF&);
template WeightsD rotate_residual<double>(const WeightsD&, const MatD&);

}  // namespace rotaudit::model
