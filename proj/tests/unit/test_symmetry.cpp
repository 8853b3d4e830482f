#include <gtest/gtest.h>

#include <cmath>

#include "rotaudit/rotation.hpp"
#include "rotaudit/symmetry.hpp"

using namespace rotaudit;
using namespace rotaudit::model;
using namespace rotaudit::symmetry;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_head = 4;
  c.d_mlp = 32;
  c.n_ctx = 12;
  return c;
}

// Folded random weights with unit gains.
WeightsD random_folded(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  WeightsD w = WeightsD::zeros(c);
  for (auto& [name, t] : w.tensors()) {
    if (residual_axis(name) == ResidualAxis::gain)
      t->setOnes();
    else if (name == "pos.W_pos")
      *t = positional_buffer<double>(c);
    else
      *t = random_normal<double>(t->rows(), t->cols(), rng, name == "embed.W_E" ? 1.0 : 0.3);
  }
  return w;
}

double max_abs_diff(const WeightsD& a, const WeightsD& b) {
  double m = 0.0;
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) m = std::max(m, (*ta[i].second - *tb[i].second).cwiseAbs().maxCoeff());
  return m;
}


}  // namespace

TEST(Symmetry, InverseRoundTrip) {
  const auto c = small_config();
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const WeightsD w = random_folded(c, 100 + t);
    const auto g = SymmetryElement::random(c, rng);
    EXPECT_LT(max_abs_diff(apply_symmetry(apply_symmetry(w, g), g.inverse()), w), 1e-10);
    EXPECT_LT(max_abs_diff(apply_symmetry(apply_symmetry(w, g.inverse()), g), w), 1e-10);
  }
}

TEST(Symmetry, PreservesFunction) {
  const auto c = small_config();
  Rng rng(2);
  const WeightsD w = random_folded(c, 7);
  const auto batch = PackedBatch::from_tokens({{0, 3, 5, 4, 6, 1}, {0, 7, 8, 1}});
  const auto ref = forward(w, batch);
  for (int t = 0; t < 5; ++t) {
    const auto out = forward(apply_symmetry(w, SymmetryElement::random(c, rng)), batch);
    EXPECT_LT((out.logits_tok - ref.logits_tok).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((out.logits_depth - ref.logits_depth).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((out.logits_valid - ref.logits_valid).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Symmetry, RejectsUnfoldedAndMalformed) {
  const auto c = small_config();
  WeightsD w = random_folded(c, 3);
  auto g = SymmetryElement::identity(c);
  w.blocks[0].ln1(0, 0) = 2.0;
  EXPECT_THROW(apply_symmetry(w, g), std::invalid_argument);
  w.blocks[0].ln1(0, 0) = 1.0;
  g.mlp_scale[1][3] = -1.0;
  EXPECT_THROW(apply_symmetry(w, g), std::invalid_argument);
  g = SymmetryElement::identity(c);
  g.head_perm[0][0] = 1;
  EXPECT_THROW(apply_symmetry(w, g), std::invalid_argument);
  g = SymmetryElement::identity(c);
  g.resid_rot(0, 1) = 0.5;
  EXPECT_THROW(apply_symmetry(w, g), std::invalid_argument);
}

TEST(Symmetry, SelfAlignmentIsExact) {
  const auto c = small_config();
  const WeightsF w = random_folded(c, 11).cast<float>();
  const auto r = multistart_align(w, w, {.n_perm_starts = 4, .iterations = 6, .seed = 5});
  EXPECT_LE(r.max_mse, 1e-8);
}

TEST(Symmetry, RecoversPlantedElements) {
  const auto c = small_config();
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const WeightsD a = random_folded(c, 200 + t);
    const WeightsD b = apply_symmetry(a, SymmetryElement::random(c, rng));
    const auto r = multistart_align(a.cast<float>(), b.cast<float>(), {.n_perm_starts = 2, .iterations = 6, .seed = 9});
    EXPECT_LE(r.max_mse, 1e-6) << "planted element " << t;
    EXPECT_TRUE(r.with_rotation);
  }
}

TEST(Symmetry, CoordinateDescentIsMonotone) {
  const auto c = small_config();
  Rng rng(4);
  for (int t = 0; t < 6; ++t) {
    const WeightsD a = random_folded(c, 300 + t);
    const WeightsD b = random_folded(c, 400 + t);
    std::vector<std::vector<int>> start;
    for (int l = 0; l < c.n_layers; ++l) {
      std::vector<int> p{0, 1, 2, 3};
      std::shuffle(p.begin(), p.end(), rng);
      start.push_back(p);
    }
    const auto r = align_from(a, b, start, true, 6);
    ASSERT_EQ(r.history.size(), 6u);
    for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1] * (1 + 1e-12));
    EXPECT_NEAR(r.history.back(), r.global_mse, 1e-12);
  }
}

TEST(Symmetry, UnrelatedModelsDoNotAlign) {
  const auto c = small_config();
  const auto r = multistart_align(random_folded(c, 1).cast<float>(), random_folded(c, 2).cast<float>(),
                                  {.n_perm_starts = 2, .iterations = 3, .seed = 1});
  EXPECT_GT(r.max_mse, 1e-2);
  EXPECT_FALSE(bar_p(r).pass);
}

TEST(Symmetry, CayleyIsOrthogonal) {
  Rng rng(5);
  for (int d : {2, 5, 32, 64}) {
    MatD a = random_normal<double>(d, d, rng, 3.0);
    const MatD s = 0.5 * (a - a.transpose());
    const MatD q = cayley(s);
    EXPECT_LT(orthogonality_error(q), 1e-8);
    EXPECT_NEAR(determinant(q), 1.0, 1e-12);
  }
  EXPECT_LT((cayley(MatD::Zero(4, 4)) - MatD::Identity(4, 4)).norm(), 1e-15);
}

TEST(Symmetry, CayleyRefinementRecoversPerturbedRotation) {
  const auto c = small_config();
  Rng rng(6);
  const WeightsD a = random_folded(c, 50);
  const auto g = SymmetryElement::random(c, rng);
  const WeightsD b = apply_symmetry(a, g);
  AlignmentResult base;
  base.element = g.inverse();
  MatD k = random_normal<double>(c.d_model, c.d_model, rng, 0.05);
  base.element.resid_rot = base.element.resid_rot * cayley(0.5 * (k - k.transpose()));
  const auto wa = a.cast<float>();
  const auto wb = b.cast<float>();
  const double before = per_tensor_mse(a, apply_symmetry(b, base.element)).at("embed.W_E");
  for (auto obj : {WeightObjective::global, WeightObjective::mean_tensor, WeightObjective::smooth_max}) {
    const auto r = cayley_refine(base, wa, wb, nullptr, {.steps = 500, .objective = obj});
    EXPECT_LT(orthogonality_error(r.element.resid_rot), 1e-8);
    EXPECT_LT(r.per_tensor_mse.at("embed.W_E"), before * 1e-2);
    EXPECT_EQ(r.method, "cayley");
  }
}

TEST(Symmetry, ActivationTermIsZeroForRotatedCopy) {
  const auto c = small_config();
  Rng rng(8);
  const WeightsD a = random_folded(c, 60);
  const MatD q = rotation::haar_sample(c.d_model, rng);
  const WeightsD b = rotate_residual(a, q);
  const auto batch = PackedBatch::from_tokens({{0, 3, 5, 4, 6, 1}, {0, 7, 8, 9, 2, 1}});
  const auto acts = residual_acts(a.cast<float>(), b.cast<float>(), batch);
  EXPECT_EQ(acts.a.size(), residual_sites(c).size());
  EXPECT_LT(activation_mse(acts, q.transpose()), 1e-9);
  EXPECT_GT(activation_mse(acts, MatD::Identity(c.d_model, c.d_model)), 1e-3);
}

TEST(Symmetry, BarPThreshold) {
  AlignmentResult r;
  r.max_mse = 9e-4;
  EXPECT_TRUE(bar_p(r).pass);
  r.max_mse = 1e-3;
  EXPECT_FALSE(bar_p(r).pass);
  EXPECT_EQ(bar_p(r).bar, "P");
}
