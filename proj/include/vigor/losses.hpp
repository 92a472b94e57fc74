#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vigor/error.hpp"
#include "vigor/scene.hpp"
#include "vigor/tensor.hpp"

namespace vigor {

enum class Stage { kWarmup, kMain };

// Cross-entropy of a 1 x n logit row against class `target`.
inline Var cross_entropy(Var logits, std::size_t target) {
  if (logits.rows() != 1) {
    throw DimensionError("cross_entropy: expects a logit row, got " + logits.value().shape_string());
  }
  if (target >= logits.cols()) {
    throw ContractError("cross_entropy: target " + std::to_string(target) + " out of " +
                        std::to_string(logits.cols()) + " classes");
  }
  return scale(pick(log_softmax_rows(logits), 0, target), -1.0);
}

// Mean binary cross-entropy of logits against 0/1 targets of the same shape.
inline Var bce_with_logits(Var logits, const Matrix& targets) {
  if (!targets.same_shape(logits.value())) {
    throw DimensionError("bce_with_logits: targets " + targets.shape_string() + " vs logits " +
                         logits.value().shape_string());
  }
  Tape& t = logits.tape();
  return mean(sub(softplus(logits), hadamard(logits, t.constant(targets))));
}

inline Var mse(Var prediction, const Matrix& target) {
  if (!target.same_shape(prediction.value())) {
    throw DimensionError("mse: target " + target.shape_string() + " vs prediction " +
                         prediction.value().shape_string());
  }
  const Var diff = sub(prediction, prediction.tape().constant(target));
  return mean(hadamard(diff, diff));
}

// Warm-up: mean over blocks of CE(scores of F_{i+1}, ids[i]).
// Main: CE(scores of F_{B+1}, ids[0]) where ids holds only the target.
inline Var loss_ref(std::span<const Var> block_scores, std::span<const int> ids, Stage stage) {
  if (block_scores.empty()) throw ContractError("loss_ref: no block scores");
  auto ce = [](Var scores, int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= scores.rows()) {
      throw ContractError("loss_ref: proposal id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(scores.rows()) + ")");
    }
    return cross_entropy(transpose(scores), static_cast<std::size_t>(id));
  };
  if (stage == Stage::kMain) {
    if (ids.size() != 1) throw ContractError("loss_ref: main stage supervises the target only");
    return ce(block_scores.back(), ids[0]);
  }
  if (ids.size() != block_scores.size()) {
    throw ContractError("loss_ref: warm-up needs one id per block (" +
                        std::to_string(block_scores.size()) + "), got " + std::to_string(ids.size()));
  }
  Var total = ce(block_scores[0], ids[0]);
  for (std::size_t i = 1; i < ids.size(); ++i) total = add(total, ce(block_scores[i], ids[i]));
  return scale(total, 1.0 / static_cast<double>(ids.size()));
}

// Mean over blocks of BCE(mask logits of F_{i+1}, M_i).
inline Var loss_mask(std::span<const Var> mask_logits, std::span<const RelevanceMask> masks) {
  if (mask_logits.empty() || mask_logits.size() != masks.size()) {
    throw ContractError("loss_mask: need one mask per block");
  }
  Var total;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    Matrix target(masks[i].size(), 1);
    for (std::size_t k = 0; k < masks[i].size(); ++k) target[k] = masks[i].bits[k] ? 1.0 : 0.0;
    const Var term = bce_with_logits(mask_logits[i], target);
    total = i == 0 ? term : add(total, term);
  }
  return scale(total, 1.0 / static_cast<double>(masks.size()));
}

// Offsets of every center from the center of proposal `anchor`.
inline Matrix relative_centers(const Matrix& centers, int anchor) {
  if (anchor < 0 || static_cast<std::size_t>(anchor) >= centers.rows()) {
    throw ContractError("relative_centers: anchor " + std::to_string(anchor) + " out of range");
  }
  Matrix out = centers;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < 3; ++c) out(r, c) -= centers(static_cast<std::size_t>(anchor), c);
  return out;
}

inline Matrix center_matrix(const Scene& scene) {
  Matrix v(scene.size(), 3);
  for (std::size_t k = 0; k < scene.size(); ++k)
    for (std::size_t c = 0; c < 3; ++c) v(k, c) = scene.proposals[k].center[c];
  return v;
}

// (1/B) sum_i MSE(coord_pred_i, V - 1 v_i), v_i the center of ids[i].
inline Var loss_crd(std::span<const Var> coord_pred, const Matrix& centers, std::span<const int> ids) {
  if (coord_pred.empty() || coord_pred.size() != ids.size()) {
    throw ContractError("loss_crd: need one anchor id per block");
  }
  if (centers.cols() != 3) throw DimensionError("loss_crd: centers must be K x 3");
  Var total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Var term = mse(coord_pred[i], relative_centers(centers, ids[i]));
    total = i == 0 ? term : add(total, term);
  }
  return scale(total, 1.0 / static_cast<double>(ids.size()));
}

inline Var loss_text(Var text_logits, int target_class) {
  if (target_class < 0) throw ContractError("loss_text: negative class id");
  return cross_entropy(text_logits, static_cast<std::size_t>(target_class));
}

struct LossWeights {
  double ref = 1.0;
  double mask = 1.0;
  double text = 1.0;
  double crd = 1.0;

  bool operator==(const LossWeights&) const = default;
};

struct LossTerms {
  std::optional<Var> ref;
  std::optional<Var> mask;
  std::optional<Var> text;
  std::optional<Var> crd;
};

struct LossBreakdown {
  std::optional<double> ref;
  std::optional<double> mask;
  std::optional<double> text;
  std::optional<double> crd;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    auto acc = [](std::optional<double>& a, const std::optional<double>& b) {
      if (b) a = a.value_or(0.0) + *b;
    };
    acc(ref, o.ref);
    acc(mask, o.mask);
    acc(text, o.text);
    acc(crd, o.crd);
    total += o.total;
    return *this;
  }

  LossBreakdown scaled(double c) const {
    LossBreakdown out = *this;
    for (auto* v : {&out.ref, &out.mask, &out.text, &out.crd})
      if (*v) **v *= c;
    out.total *= c;
    return out;
  }
};

struct ComposedLoss {
  Var total;
  LossBreakdown breakdown;
};

// Weighted sum of the stage's objectives. Warm-up requires all four terms;
// the main stage requires ref, mask and text and rejects a coordinate term.
inline ComposedLoss compose(Stage stage, const LossTerms& terms, const LossWeights& weights = {}) {
  auto require = [](const std::optional<Var>& v, const char* name) {
    if (!v) throw ContractError(std::string("compose: missing required loss term ") + name);
  };
  require(terms.ref, "ref");
  require(terms.mask, "mask");
  require(terms.text, "text");
  if (stage == Stage::kWarmup) require(terms.crd, "crd");
  if (stage == Stage::kMain && terms.crd) {
    throw ContractError("compose: the main stage has no coordinate supervision");
  }
  ComposedLoss out;
  out.breakdown.ref = terms.ref->item();
  out.breakdown.mask = terms.mask->item();
  out.breakdown.text = terms.text->item();
  out.total = add(add(scale(*terms.ref, weights.ref), scale(*terms.mask, weights.mask)),
                  scale(*terms.text, weights.text));
  if (stage == Stage::kWarmup) {
    out.breakdown.crd = terms.crd->item();
    out.total = add(out.total, scale(*terms.crd, weights.crd));
  }
  out.breakdown.total = out.total.item();
  return out;
}

}  // namespace vigor
