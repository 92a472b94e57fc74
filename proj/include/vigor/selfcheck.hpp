#pragma once

// Gradient check of a whole model under the warm-up loss composition.

#include <cstdint>
#include <memory>
#include <vector>

#include "vigor/gradcheck.hpp"
#include "vigor/model.hpp"
#include "vigor/synthgen.hpp"
#include "vigor/trainer.hpp"

namespace vigor {

struct ModelGradCheckConfig {
  std::size_t d = 8;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  int proposals = 5;
  std::size_t samples = 1;
  int points_per_proposal = 6;
  std::size_t num_classes = 4;
  GradCheckOptions fd{1e-3, FiniteDifference::kLadder};
};

// Builds a small model and `samples` warm-up examples of exactly
// `proposals` proposals, then checks every parameter of the warm-up loss
// (unit weights, summed over samples). The four terms are returned as
// separate elements so finite differences are taken per term.
inline GradCheckReport model_grad_check(std::uint64_t seed, const ModelGradCheckConfig& c = {}) {
  auto vocab = std::make_shared<const ClassVocab>(ClassVocab::indoor(c.num_classes));
  GroundingModel model(ModelConfig{c.d, c.blocks, c.heads, seed}, *vocab);
  GenConfig gen;
  gen.min_proposals = gen.max_proposals = c.proposals;
  gen.points_per_proposal = c.points_per_proposal;
  gen.order_len = static_cast<int>(c.blocks);
  gen.num_classes = c.num_classes;
  Rng rng(mix_seed(seed ^ 0x9c4eULL));
  std::vector<GroundingExample> examples;
  for (std::size_t i = 0; i < c.samples; ++i) {
    examples.push_back(example_from_sample(draw_sample(gen, vocab, rng, "gradcheck")));
  }
  const auto params = model.parameters();
  return grad_check(
      params,
      [&](Tape& tape) {
        Var total;
        for (std::size_t i = 0; i < examples.size(); ++i) {
          const auto& ex = examples[i];
          const auto labels = ex.scene.labels();
          const LossTerms t = example_terms(tape, model, ex, ex.order, labels, Stage::kWarmup);
          compose(Stage::kWarmup, t);
          const Var row = concat_cols(concat_cols(*t.ref, *t.mask), concat_cols(*t.text, *t.crd));
          total = i == 0 ? row : concat_cols(total, row);
        }
        return total;
      },
      c.fd);
}

}  // namespace vigor
