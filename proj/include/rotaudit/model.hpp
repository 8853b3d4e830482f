#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rotaudit/dyck.hpp"
#include "rotaudit/linalg.hpp"

// Two-layer pre-RMSNorm transformer with three per-position classification
// heads (bracket type, depth, valid). No biases anywhere; the positional
// buffer is fixed and analytic.
namespace rotaudit::model {

inline constexpr double kRmsEps = 1e-8;

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_head = 16;
  int d_mlp = 256;
  int n_ctx = 64;
  int vocab = dyck::kVocab;
  int n_pos_dims = 6;

  static ModelConfig paper();
  /// d_model 32, 4 heads of width 8, d_mlp 128, context 34.
  static ModelConfig desk();

  /// Trainable parameters; the positional buffer is excluded.
  std::int64_t parameter_count() const;
  int n_components() const { return n_layers * (n_heads + 1); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct Block {
  Mat<S> ln1;  // 1 x d
  Mat<S> W_Q, W_K, W_V;  // d x (n_heads * d_head), head h owns columns [h*d_head, (h+1)*d_head)
  Mat<S> W_O;            // (n_heads * d_head) x d
  Mat<S> ln2;  // 1 x d
  Mat<S> W_in;   // d x d_mlp
  Mat<S> W_out;  // d_mlp x d
};

/// How a tensor touches the residual basis: residual index along rows (read
/// side, rotated as R^T T), along columns (write side, T R), or not at all.
enum class ResidualAxis { rows, cols, gain, none };

template <typename S>
struct ModelWeights {
  ModelConfig config;
  Mat<S> W_E;    // vocab x d
  Mat<S> W_pos;  // n_ctx x d, fixed
  std::vector<Block<S>> blocks;
  Mat<S> ln_final;  // 1 x d
  Mat<S> W_U_tok;    // d x vocab
  Mat<S> W_U_depth;  // d x 9
  Mat<S> W_U_valid;  // d x 2
  std::set<std::string> frozen;

  static ModelWeights zeros(const ModelConfig& config);

  std::vector<std::pair<std::string, Mat<S>*>> tensors();
  std::vector<std::pair<std::string, const Mat<S>*>> tensors() const;
  Mat<S>& tensor(const std::string& name);
  const Mat<S>& tensor(const std::string& name) const;

  bool is_trainable(const std::string& name) const;

  template <typename T>
  ModelWeights<T> cast() const;
};

using WeightsF = ModelWeights<float>;
using WeightsD = ModelWeights<double>;

ResidualAxis residual_axis(const std::string& tensor_name);

/// Names of the tensors shared (and frozen) across a shared-I/O cohort.
const std::vector<std::string>& shared_io_tensor_names();

/// Fixed analytic positional buffer: columns 0..5 hold
/// [t/n_ctx, 1/(t+1), log(t+1), 1{t=0}, cos(wt), sin(wt)] with w = 2*pi/n_ctx.
template <typename S>
Mat<S> positional_buffer(const ModelConfig& config);

/// Scaled-normal initialisation (0.02, residual writers 0.02/sqrt(2 n_layers)),
/// unit gains. Tensors named in `shared_io` are copied from it and frozen.
WeightsF init_weights(const ModelConfig& config, Rng& rng, const WeightsF* shared_io = nullptr);

// ---------------------------------------------------------------------------
// Batches

/// Variable-length sequences packed row-wise; sequence i owns rows
/// [offsets[i], offsets[i+1]).
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> offsets{0};

  static PackedBatch from(const std::vector<dyck::LabeledSequence>& seqs);
  static PackedBatch from_tokens(const std::vector<std::vector<int>>& seqs);
  int rows() const { return static_cast<int>(tokens.size()); }
  int n_sequences() const { return static_cast<int>(offsets.size()) - 1; }
  int seq_len(int i) const { return offsets[i + 1] - offsets[i]; }
};

struct Labels {
  std::vector<int> tok, depth, valid;
  static Labels from(const std::vector<dyck::LabeledSequence>& seqs);
  int rows() const { return static_cast<int>(tok.size()); }
};

// ---------------------------------------------------------------------------
// Components and interventions

struct ComponentId {
  int layer = 0;
  int head = -1;  // -1 selects the MLP
  bool is_mlp() const { return head < 0; }
  std::string name() const;
  bool operator==(const ComponentId&) const = default;
};

/// The n_layers * (n_heads + 1) heads and MLPs, heads first within a layer.
std::vector<ComponentId> enumerate_components(const ModelConfig& config);

template <typename S>
struct Intervention {
  /// Output of `component` becomes baseline + alpha * (clean - baseline).
  std::optional<ComponentId> component;
  RowVec<S> baseline;
  S alpha = S(1);
  /// `steer` is added to every row of the residual stream at `steer_site`
  /// (one of resid_pre_L, resid_mid_L, resid_post_L) before downstream use.
  std::string steer_site;
  RowVec<S> steer;
};

// ---------------------------------------------------------------------------
// Forward / backward

template <typename S>
struct LayerTape {
  Mat<S> x_in, n1, h1, q, k, v, z, attn_out, x_mid, n2, h2, pre, post, mlp_out, x_out;
  std::vector<double> inv_rms1, inv_rms2;
  std::vector<Mat<S>> probs;  // [seq * n_heads + head], T x T lower triangular
};

template <typename S>
struct ForwardPass {
  Mat<S> logits_tok, logits_depth, logits_valid;
  std::vector<LayerTape<S>> layers;
  Mat<S> final_norm;  // rms-normalised final residual, before the final gain
  std::vector<double> inv_rms_final;
  /// Clean output of the intervened component (rows x d), when one is set.
  Mat<S> component_clean;

  /// Activation matrix at a named site (see site_names()).
  Mat<S> site(const std::string& name) const;
};

/// resid_pre_0, resid_mid_0, resid_post_0, resid_pre_1, ..., resid_pre_{L} (pre-unembed).
std::vector<std::string> residual_sites(const ModelConfig& config);
/// Residual sites plus mlp_in/mlp_pre/mlp_post/attn_out per layer.
std::vector<std::string> site_names(const ModelConfig& config);
int site_width(const ModelConfig& config, const std::string& site);

using ActivationCache = std::map<std::string, MatF>;

template <typename S>
ForwardPass<S> forward(const ModelWeights<S>& w, const PackedBatch& batch,
                       const Intervention<S>* intervention = nullptr);

/// Single-sequence convenience wrapper.
struct SequenceOutputs {
  MatF logits_tok, logits_depth, logits_valid;
  ActivationCache cache;
};
SequenceOutputs forward(const WeightsF& w, const std::vector<int>& tokens);

ActivationCache collect_cache(const ForwardPass<float>& pass, const std::vector<std::string>& sites);

template <typename S>
struct LossGrad {
  double loss = 0.0;                       // mean over rows of summed per-head CE
  std::array<double, 3> per_head{};        // mean CE per head (tok, depth, valid)
  Mat<S> d_tok, d_depth, d_valid;
};

template <typename S>
LossGrad<S> loss_and_grad(const ForwardPass<S>& pass, const Labels& labels, bool want_grad = true);

template <typename S>
struct Gradients {
  ModelWeights<S> params;
  std::vector<Mat<S>> d_attn_out;  // dL/d(attention output) per layer == dL/d(any head output)
  std::vector<Mat<S>> d_mlp_out;   // dL/d(MLP output) per layer
};

template <typename S>
Gradients<S> backward(const ModelWeights<S>& w, const PackedBatch& batch, const ForwardPass<S>& pass,
                      const LossGrad<S>& lg, const Intervention<S>* intervention = nullptr,
                      bool param_grads = true);

/// Per-position argmax accuracy for each of the three heads.
std::array<double, 3> head_accuracy(const ForwardPass<float>& pass, const Labels& labels);

// ---------------------------------------------------------------------------
// Weight-space transforms and diagnostics

struct FoldedModel {
  WeightsF weights;
  std::map<std::string, std::string> roles;
};

/// Absorb RMSNorm gains into the adjacent read-side weights; gains become 1.
template <typename S>
ModelWeights<S> fold_gains(const ModelWeights<S>& w);
FoldedModel fold_rmsnorm(const WeightsF& w);
bool has_unit_gains(const WeightsF& w, double tol = 0.0);

/// Rotate the residual basis by orthogonal Q. Requires unit gains.
template <typename S>
ModelWeights<S> rotate_residual(const ModelWeights<S>& w, const Mat<S>& q);

struct HeadNorm {
  int layer = 0;
  int head = 0;
  double qk_norm = 0.0;  // ||W_Q^h W_K^h^T||_F (d x d QK circuit)
  double ov_norm = 0.0;  // ||W_V^h W_O^h||_F (d x d OV circuit)
};
std::vector<HeadNorm> head_norms(const FoldedModel& folded);

/// Depth-unembed decoy: class columns {0,1},{2,3},{4,5},{6,7} replaced by their pair mean.
WeightsF decoy_depth_unembed(const WeightsF& w);

}  // namespace rotaudit::model
