#pragma once

// Two-stage training: warm-up on freshly synthesized template samples with
// all four objectives, then the main stage on stored descriptions whose
// orders come from a parser, supervising the target only.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vigor/adam.hpp"
#include "vigor/dataset.hpp"
#include "vigor/losses.hpp"
#include "vigor/model.hpp"
#include "vigor/orderparse.hpp"
#include "vigor/rng.hpp"
#include "vigor/synthgen.hpp"

namespace vigor {

struct TrainConfig {
  std::uint64_t warmup_steps = 0;
  std::uint64_t main_steps = 0;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::uint64_t eval_every = 0;
  // Probability of replacing a proposal label with a random class when
  // building masks, emulating predicted rather than true labels.
  double label_noise = 0.0;

  void validate() const {
    if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be > 0");
    if (label_noise < 0.0 || label_noise > 1.0) {
      throw ContractError("TrainConfig: label_noise must be in [0, 1]");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"warmup_steps", c.warmup_steps},
       {"main_steps", c.main_steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"seed", c.seed},
       {"loss_weights",
        {{"ref", c.weights.ref}, {"mask", c.weights.mask}, {"text", c.weights.text}, {"crd", c.weights.crd}}},
       {"eval_every", c.eval_every},
       {"label_noise", c.label_noise}};
}

// Missing keys keep their current values, so a config file may be partial.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("warmup_steps", c.warmup_steps);
  opt("main_steps", c.main_steps);
  opt("batch_size", c.batch_size);
  opt("learning_rate", c.learning_rate);
  opt("seed", c.seed);
  opt("eval_every", c.eval_every);
  opt("label_noise", c.label_noise);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    if (w.contains("ref")) w.at("ref").get_to(c.weights.ref);
    if (w.contains("mask")) w.at("mask").get_to(c.weights.mask);
    if (w.contains("text")) w.at("text").get_to(c.weights.text);
    if (w.contains("crd")) w.at("crd").get_to(c.weights.crd);
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d}, {"blocks", c.blocks}, {"heads", c.heads}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("d", c.d);
  opt("blocks", c.blocks);
  opt("heads", c.heads);
  opt("seed", c.seed);
}

// Mutable training progress; everything needed to resume bit-exactly.
struct TrainState {
  AdamState adam;
  std::uint64_t warmup_step = 0;
  std::uint64_t main_step = 0;
  Rng rng;

  explicit TrainState(std::uint64_t seed = 0) : rng(mix_seed(seed ^ 0x7a11ULL)) {}
};

// Turns an example into its (untrimmed) referential order.
using OrderSource = std::function<std::vector<std::string>(const GroundingExample&)>;

inline OrderSource stored_order_source() {
  return [](const GroundingExample& e) { return e.order; };
}

inline OrderSource parser_order_source(std::shared_ptr<OrderParser> parser,
                                       std::shared_ptr<const ClassVocab> vocab) {
  return [parser = std::move(parser), vocab = std::move(vocab)](const GroundingExample& e) {
    return parser->parse(e.description, *vocab).names;
  };
}

inline OrderSource rule_order_source(std::shared_ptr<const ClassVocab> vocab) {
  return parser_order_source(std::make_shared<RuleOrderParser>(), std::move(vocab));
}

using StepCallback = std::function<void(Stage, std::uint64_t step, const LossBreakdown&)>;

inline std::vector<int> noisy_labels(const Scene& scene, double noise, std::size_t classes, Rng& rng) {
  std::vector<int> labels = scene.labels();
  if (noise <= 0.0) return labels;
  for (int& l : labels)
    if (rng.bernoulli(noise)) l = static_cast<int>(rng.index(classes));
  return labels;
}

// Forward pass and the stage's unweighted loss terms for one example.
// Warm-up requires anchor ids and an order of exactly B names.
inline LossTerms example_terms(Tape& tape, const GroundingModel& model, const GroundingExample& ex,
                               std::span<const std::string> order, std::span<const int> labels,
                               Stage stage) {
  const ForwardOutput out = forward(tape, model, ex.scene, labels, order, ex.description);
  LossTerms terms;
  terms.mask = loss_mask(out.mask_logits, out.masks);
  terms.text = loss_text(out.text_logits, ex.scene.proposals.at(static_cast<std::size_t>(ex.target_id)).class_id);
  if (stage == Stage::kWarmup) {
    if (!ex.anchor_ids || ex.anchor_ids->size() != out.block_scores.size()) {
      throw ContractError("warm-up example needs one anchor/target id per block");
    }
    terms.ref = loss_ref(out.block_scores, *ex.anchor_ids, Stage::kWarmup);
    terms.crd = loss_crd(out.coord_pred, center_matrix(ex.scene), *ex.anchor_ids);
  } else {
    const int target[] = {ex.target_id};
    terms.ref = loss_ref(out.block_scores, target, Stage::kMain);
  }
  return terms;
}

inline ComposedLoss example_loss(Tape& tape, const GroundingModel& model, const GroundingExample& ex,
                                 std::span<const std::string> order, std::span<const int> labels,
                                 Stage stage, const LossWeights& weights) {
  return compose(stage, example_terms(tape, model, ex, order, labels, stage), weights);
}

// One optimizer step over a batch; returns the batch-mean breakdown.
inline LossBreakdown train_step(GroundingModel& model, TrainState& state, const TrainConfig& cfg,
                                Stage stage, std::span<const GroundingExample> batch,
                                std::span<const std::vector<std::string>> orders) {
  model.store().zero_grad();
  LossBreakdown sum;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tape tape;
    const auto labels = noisy_labels(batch[b].scene, cfg.label_noise, model.classes().size(), state.rng);
    ComposedLoss loss = example_loss(tape, model, batch[b], orders[b], labels, stage, cfg.weights);
    tape.backward(scale(loss.total, inv));
    sum += loss.breakdown;
  }
  const auto params = model.parameters();
  adam_step(params, state.adam, AdamConfig{cfg.learning_rate});
  return sum.scaled(inv);
}

// Warm-up on template samples synthesized on the fly from `gen`. The order
// length always equals the model's block count.
inline void warmup_stage(GroundingModel& model, TrainState& state, GenConfig gen,
                         const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  gen.style = SampleStyle::kWarmup;
  gen.order_len = static_cast<int>(model.config().blocks);
  gen.validate();
  auto vocab = std::make_shared<const ClassVocab>(model.classes());
  for (std::uint64_t s = 0; s < cfg.warmup_steps; ++s) {
    std::vector<GroundingExample> batch;
    std::vector<std::vector<std::string>> orders;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      WarmupSample sample = draw_sample(gen, vocab, state.rng, "warmup");
      orders.push_back(sample.order);
      batch.push_back(example_from_sample(sample));
    }
    const LossBreakdown lb = train_step(model, state, cfg, Stage::kWarmup, batch, orders);
    ++state.warmup_step;
    if (on_step) on_step(Stage::kWarmup, state.warmup_step, lb);
  }
}

// Parses every example once, then trains on uniformly drawn batches.
inline void main_stage(GroundingModel& model, TrainState& state,
                       const std::vector<GroundingExample>& dataset, const TrainConfig& cfg,
                       const OrderSource& source, const StepCallback& on_step = {}) {
  cfg.validate();
  if (dataset.empty()) throw ContractError("main_stage: empty dataset");
  if (cfg.main_steps == 0) return;
  const std::size_t blocks = model.config().blocks;
  std::vector<std::vector<std::string>> orders;
  orders.reserve(dataset.size());
  for (const auto& ex : dataset) orders.push_back(trim_pad(source(ex), blocks));
  for (std::uint64_t s = 0; s < cfg.main_steps; ++s) {
    std::vector<GroundingExample> batch;
    std::vector<std::vector<std::string>> batch_orders;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = state.rng.index(dataset.size());
      batch.push_back(dataset[i]);
      batch_orders.push_back(orders[i]);
    }
    const LossBreakdown lb = train_step(model, state, cfg, Stage::kMain, batch, batch_orders);
    ++state.main_step;
    if (on_step) on_step(Stage::kMain, state.main_step, lb);
  }
}

}  // namespace vigor
