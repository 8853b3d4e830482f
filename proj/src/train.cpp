#include "rotaudit/train.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include "rotaudit/io.hpp"

namespace rotaudit::train {

using model::WeightsF;

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 128;
  c.max_steps = 20000;
  return c;
}

std::string CohortSpec::name() const { return kind == CohortKind::shared_frozen_io ? "A" : "B"; }

double lr_at(int step, const TrainConfig& c) {
  if (step <= 0) return 0.0;
  if (step < c.warmup_steps) return c.peak_lr * step / c.warmup_steps;
  const double span = std::max(1, c.max_steps - c.warmup_steps);
  const double progress = std::min(1.0, (step - c.warmup_steps) / span);
  const double floor = c.lr_floor_fraction * c.peak_lr;
  return floor + (c.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(WeightsF& params, const WeightsF& grads, AdamState& state, double lr, const TrainConfig& c) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params.tensors()) {
    if (!params.is_trainable(name)) continue;
    const MatF& g = grads.tensor(name);
    if (g.rows() != p->rows() || g.cols() != p->cols()) throw std::invalid_argument("adamw_step: shape mismatch on " + name);
    auto [mit, m_new] = state.m.try_emplace(name, MatF::Zero(p->rows(), p->cols()));
    auto [vit, v_new] = state.v.try_emplace(name, MatF::Zero(p->rows(), p->cols()));
    MatF& m = mit->second;
    MatF& v = vit->second;
    for (Eigen::Index i = 0; i < p->size(); ++i) {
      const double gi = g.data()[i];
      const double mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
      m.data()[i] = static_cast<float>(mi);
      v.data()[i] = static_cast<float>(vi);
      double pi = p->data()[i];
      pi -= lr * c.weight_decay * pi;
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_eps);
      p->data()[i] = static_cast<float>(pi);
    }
  }
}

HeldOut HeldOut::make(const dyck::TaskDistributions& d, int n, std::uint64_t seed) {
  HeldOut h;
  h.sets.emplace_back("train_holdout", dyck::sample_sequences(d.train, static_cast<std::size_t>(n), seed + 1));
  h.sets.emplace_back("compositional", dyck::sample_sequences(d.compositional, static_cast<std::size_t>(n), seed + 2));
  h.sets.emplace_back("long", dyck::sample_sequences(d.long_range, static_cast<std::size_t>(n), seed + 3));
  return h;
}

EvalResult evaluate(const WeightsF& w, const HeldOut& held_out, int chunk) {
  EvalResult r;
  r.min_acc = 1.0;
  for (const auto& [name, seqs] : held_out.sets) {
    std::array<double, 3> correct{};
    double rows = 0.0;
    double loss = 0.0;
    for (std::size_t start = 0; start < seqs.size(); start += static_cast<std::size_t>(chunk)) {
      const std::vector<dyck::LabeledSequence> part(
          seqs.begin() + static_cast<std::ptrdiff_t>(start),
          seqs.begin() + static_cast<std::ptrdiff_t>(std::min(seqs.size(), start + static_cast<std::size_t>(chunk))));
      const auto labels = model::Labels::from(part);
      const auto fp = model::forward(w, model::PackedBatch::from(part));
      const auto acc = model::head_accuracy(fp, labels);
      for (int k = 0; k < 3; ++k) correct[static_cast<std::size_t>(k)] += acc[static_cast<std::size_t>(k)] * labels.rows();
      loss += model::loss_and_grad(fp, labels, false).loss * labels.rows();
      rows += labels.rows();
    }
    std::array<double, 3> acc{};
    for (int k = 0; k < 3; ++k) {
      acc[static_cast<std::size_t>(k)] = correct[static_cast<std::size_t>(k)] / rows;
      r.min_acc = std::min(r.min_acc, acc[static_cast<std::size_t>(k)]);
    }
    r.acc[name] = acc;
    r.loss += loss / rows / static_cast<double>(held_out.sets.size());
  }
  return r;
}

std::filesystem::path SeedPaths::final_checkpoint() const { return dir / ("seed" + std::to_string(seed) + "_final.ckpt"); }
std::filesystem::path SeedPaths::checkpoint(int step) const {
  return dir / ("seed" + std::to_string(seed) + "_step" + std::to_string(step) + ".ckpt");
}
std::filesystem::path SeedPaths::log() const { return dir / ("seed" + std::to_string(seed) + "_log.json"); }

namespace {

nlohmann::json eval_json(const EvalResult& e) {
  nlohmann::json j = {{"min_acc", e.min_acc}, {"loss", e.loss}};
  for (const auto& [name, acc] : e.acc) j["acc"][name] = acc;
  return j;
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"peak_lr", c.peak_lr},           {"betas", {c.beta1, c.beta2}},
          {"weight_decay", c.weight_decay}, {"warmup_steps", c.warmup_steps},
          {"max_steps", c.max_steps},       {"batch_size", c.batch_size},
          {"early_stop_bonus", c.early_stop_bonus}, {"target_acc", c.target_acc},
          {"freeze_shared_io", c.freeze_shared_io}, {"checkpoint_steps", c.checkpoint_steps},
          {"eval_every", c.eval_every},     {"eval_sequences", c.eval_sequences}};
}

nlohmann::json dists_json(const dyck::TaskDistributions& d) {
  auto one = [](const dyck::DistributionSpec& s) {
    return nlohmann::json{{"kind", dyck::to_string(s.kind)}, {"lo", s.lo}, {"hi", s.hi}, {"valid_fraction", s.valid_fraction}};
  };
  return {{"train", one(d.train)}, {"compositional", one(d.compositional)}, {"long", one(d.long_range)}};
}

constexpr std::uint64_t kDataStream = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kHeldOutSeed = 777000;

}  // namespace

TrainResult train_seed(const model::ModelConfig& mc, const TrainConfig& config, const CohortSpec& cohort,
                       std::uint64_t seed, const dyck::TaskDistributions& dists, const std::filesystem::path& out_dir,
                       const WeightsF* anchor, bool verbose) {
  const bool needs_anchor = cohort.kind == CohortKind::shared_frozen_io && config.freeze_shared_io &&
                            seed != cohort.anchor_seed;
  if (needs_anchor && !anchor) throw std::invalid_argument("train_seed: shared-I/O cohort seed needs the anchor weights");

  Rng init_rng(seed);
  Rng data_rng(seed ^ kDataStream);
  TrainResult res;
  res.weights = model::init_weights(mc, init_rng, needs_anchor ? anchor : nullptr);
  WeightsF& w = res.weights;
  const auto held_out = HeldOut::make(dists, config.eval_sequences, kHeldOutSeed);
  const SeedPaths paths{out_dir, seed};
  std::filesystem::create_directories(out_dir);

  std::map<std::string, MatF> frozen_copy;
  for (const auto& name : w.frozen) frozen_copy.emplace(name, w.tensor(name));

  AdamState adam;
  nlohmann::json curve = nlohmann::json::array();
  nlohmann::json evals = nlohmann::json::array();
  std::int64_t stop_at = config.max_steps;
  double running = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  const io::CheckpointMeta base_meta{cohort.name(), 0, seed, {}};

  std::int64_t step = 0;
  while (step < stop_at) {
    const auto batch_seqs = dyck::sample_sequences(dists.train, static_cast<std::size_t>(config.batch_size), data_rng);
    const auto batch = model::PackedBatch::from(batch_seqs);
    const auto labels = model::Labels::from(batch_seqs);
    const auto fp = model::forward(w, batch);
    const auto lg = model::loss_and_grad(fp, labels);
    if (!std::isfinite(lg.loss))
      throw std::runtime_error("training diverged at step " + std::to_string(step) + " for seed " + std::to_string(seed) +
                               ": loss is not finite");
    const auto grads = model::backward(w, batch, fp, lg);
    ++step;
    adamw_step(w, grads.params, adam, lr_at(static_cast<int>(step), config), config);
    running = step == 1 ? lg.loss : 0.98 * running + 0.02 * lg.loss;
    res.final_train_loss = lg.loss;

    if (step % config.log_every == 0) curve.push_back({{"step", step}, {"loss", lg.loss}, {"lr", lr_at(static_cast<int>(step), config)}});
    for (int cs : config.checkpoint_steps) {
      if (cs == step) {
        auto meta = base_meta;
        meta.step = step;
        io::save_checkpoint(paths.checkpoint(cs), w, meta);
      }
    }
    if (step % config.eval_every == 0 || step == stop_at) {
      const auto e = evaluate(w, held_out);
      auto ej = eval_json(e);
      ej["step"] = step;
      evals.push_back(ej);
      if (!res.first_crossing && e.min_acc >= config.target_acc) {
        res.first_crossing = step;
        stop_at = std::min<std::int64_t>(config.max_steps, step + config.early_stop_bonus);
      }
      if (verbose) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "seed " << seed << " step " << step << " loss " << running << " min_acc " << e.min_acc << " ("
                  << secs << " s)\n";
      }
    }
  }

  for (const auto& [name, t] : frozen_copy)
    if (w.tensor(name) != t) throw std::logic_error("frozen tensor changed during training: " + name);

  res.final_step = step;
  res.final_eval = evaluate(w, held_out);
  // Train loss on a fresh batch at the final weights (not the pre-update batch loss).
  {
    const auto seqs = dyck::sample_sequences(dists.train, 1024, kHeldOutSeed + 10);
    res.final_train_loss =
        model::loss_and_grad(model::forward(w, model::PackedBatch::from(seqs)), model::Labels::from(seqs), false).loss;
  }
  res.log = io::report_header("training_log", {seed});
  res.log["cohort"] = cohort.name();
  res.log["model_config"] = io::config_to_json(mc);
  res.log["train_config"] = train_config_json(config);
  res.log["distributions"] = dists_json(dists);
  res.log["final_step"] = step;
  res.log["first_crossing"] = res.first_crossing ? nlohmann::json(*res.first_crossing) : nlohmann::json(nullptr);
  res.log["final_eval"] = eval_json(res.final_eval);
  res.log["final_train_loss"] = res.final_train_loss;
  res.log["curve"] = curve;
  res.log["evals"] = evals;
  res.log["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  auto meta = base_meta;
  meta.step = step;
  meta.extra = {{"final_eval", eval_json(res.final_eval)}, {"final_train_loss", res.final_train_loss}};
  io::save_checkpoint(paths.final_checkpoint(), w, meta);
  io::write_json(paths.log(), res.log);
  return res;
}

WeightsF load_or_train(const model::ModelConfig& mc, const TrainConfig& config, const CohortSpec& cohort,
                       std::uint64_t seed, const dyck::TaskDistributions& dists, const std::filesystem::path& out_dir,
                       const WeightsF* anchor, bool verbose) {
  const SeedPaths paths{out_dir, seed};
  if (std::filesystem::exists(paths.final_checkpoint())) {
    bool complete = true;
    for (int cs : config.checkpoint_steps) complete = complete && std::filesystem::exists(paths.checkpoint(cs));
    auto w = io::load_checkpoint(paths.final_checkpoint());
    if (complete && w.config == mc) return w;
  }
  return train_seed(mc, config, cohort, seed, dists, out_dir, anchor, verbose).weights;
}

std::vector<WeightsF> train_cohort(const model::ModelConfig& mc, const TrainConfig& config, const CohortSpec& cohort,
                                   const dyck::TaskDistributions& dists, const std::filesystem::path& out_dir,
                                   bool verbose) {
  std::vector<WeightsF> out(cohort.seeds.size());
  std::optional<WeightsF> anchor;
  if (cohort.kind == CohortKind::shared_frozen_io) {
    anchor = load_or_train(mc, config, cohort, cohort.anchor_seed, dists, out_dir, nullptr, verbose);
  }
  for (std::size_t i = 0; i < cohort.seeds.size(); ++i) {
    const auto s = cohort.seeds[i];
    if (anchor && s == cohort.anchor_seed) {
      out[i] = *anchor;
      continue;
    }
    out[i] = load_or_train(mc, config, cohort, s, dists, out_dir, anchor ? &*anchor : nullptr, verbose);
  }
  return out;
}

}  // namespace rotaudit::train
