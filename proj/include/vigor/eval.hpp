#pragma once

// Grounding accuracy, subset breakdowns and per-block response dumps.

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "vigor/dataset.hpp"
#include "vigor/error.hpp"
#include "vigor/model.hpp"
#include "vigor/orderparse.hpp"
#include "vigor/trainer.hpp"

namespace vigor {

enum class SubsetKey { kOrderLength, kDistractors };

inline std::string_view subset_key_name(SubsetKey k) {
  return k == SubsetKey::kOrderLength ? "order_length" : "distractors";
}

inline SubsetKey parse_subset_key(std::string_view s) {
  if (s == "order_length") return SubsetKey::kOrderLength;
  if (s == "distractors") return SubsetKey::kDistractors;
  throw ContractError("unknown breakdown key '" + std::string(s) + "'");
}

inline std::string order_length_bucket(std::size_t n) {
  if (n == 0) throw ContractError("order_length_bucket: empty order");
  if (n == 1) return "1";
  if (n <= 3) return "2&3";
  if (n <= 5) return "4&5";
  return "6+";
}

// Non-target proposals sharing the target's class.
inline std::size_t distractor_count(const Scene& scene, int target_id) {
  const auto& target = scene.proposals.at(static_cast<std::size_t>(target_id));
  std::size_t n = 0;
  for (const auto& p : scene.proposals)
    if (p.id != target.id && p.class_id == target.class_id) ++n;
  return n;
}

inline std::string distractor_bucket(const Scene& scene, int target_id) {
  return distractor_count(scene, target_id) > 2 ? "hard" : "easy";
}

// One label per example; labels of one key partition the dataset.
inline std::vector<std::string> subset_breakdown(std::span<const GroundingExample> dataset, SubsetKey key) {
  std::vector<std::string> labels;
  labels.reserve(dataset.size());
  for (const auto& ex : dataset) {
    labels.push_back(key == SubsetKey::kOrderLength ? order_length_bucket(ex.order.size())
                                                    : distractor_bucket(ex.scene, ex.target_id));
  }
  return labels;
}

struct SubsetStat {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
};

struct EvalReport {
  double accuracy = 0.0;
  std::size_t count = 0;
  std::size_t correct = 0;
  std::map<std::string, std::map<std::string, SubsetStat>> subsets;  // key -> bucket -> stat
  nlohmann::json config = nlohmann::json::object();
  std::vector<int> predictions;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"accuracy", r.accuracy}, {"count", r.count}, {"correct", r.correct}, {"config", r.config}};
  auto& subsets = j["subsets"] = nlohmann::json::object();
  for (const auto& [key, buckets] : r.subsets) {
    for (const auto& [bucket, stat] : buckets) {
      subsets[key][bucket] = {{"accuracy", stat.accuracy()}, {"count", stat.count}, {"correct", stat.correct}};
    }
  }
}

// Index of the largest score; ties go to the lowest id.
inline int argmax_score(const Matrix& scores) {
  if (scores.size() == 0) throw ContractError("argmax_score: no proposals");
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return static_cast<int>(best);
}

// Final-block scores (K x 1) for one example; `order` must hold B names.
inline Matrix predict_scores(const GroundingModel& model, const GroundingExample& ex,
                             std::span<const std::string> order) {
  Tape tape;
  tape.set_grad_enabled(false);
  const auto labels = ex.scene.labels();
  return forward(tape, model, ex.scene, labels, order, ex.description).scores().value();
}

// Scores a set of predictions against ground truth, with optional breakdowns.
inline EvalReport accuracy_from_predictions(std::span<const GroundingExample> dataset,
                                            std::span<const int> predictions,
                                            std::span<const SubsetKey> keys = {}) {
  if (dataset.empty()) throw ContractError("accuracy: empty dataset");
  if (predictions.size() != dataset.size()) {
    throw DimensionError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(dataset.size()) + " examples");
  }
  EvalReport report;
  report.count = dataset.size();
  report.predictions.assign(predictions.begin(), predictions.end());
  std::vector<bool> hit(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    hit[i] = predictions[i] == dataset[i].target_id;
    if (hit[i]) ++report.correct;
  }
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.count);
  for (SubsetKey key : keys) {
    auto& buckets = report.subsets[std::string(subset_key_name(key))];
    const auto labels = subset_breakdown(dataset, key);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& stat = buckets[labels[i]];
      ++stat.count;
      if (hit[i]) ++stat.correct;
    }
  }
  return report;
}

inline EvalReport accuracy_from_scores(std::span<const GroundingExample> dataset,
                                       std::span<const Matrix> scores, std::span<const SubsetKey> keys = {}) {
  std::vector<int> predictions;
  predictions.reserve(scores.size());
  for (const auto& s : scores) predictions.push_back(argmax_score(s));
  return accuracy_from_predictions(dataset, predictions, keys);
}

// Evaluates every example; orders come from `source` and are trimmed/padded
// to the model's block count. With threads > 1, examples are split into
// contiguous chunks that run on separate tapes; results are reduced by index.
inline EvalReport accuracy(const GroundingModel& model, std::span<const GroundingExample> dataset,
                           const OrderSource& source, std::span<const SubsetKey> keys = {},
                           std::size_t threads = 1) {
  if (dataset.empty()) throw ContractError("accuracy: empty dataset");
  const std::size_t blocks = model.config().blocks;
  std::vector<std::vector<std::string>> orders;
  orders.reserve(dataset.size());
  for (const auto& ex : dataset) orders.push_back(trim_pad(source(ex), blocks));

  std::vector<int> predictions(dataset.size());
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) predictions[i] = argmax_score(predict_scores(model, dataset[i], orders[i]));
  };
  threads = std::max<std::size_t>(1, std::min(threads, dataset.size()));
  if (threads == 1) {
    run(0, dataset.size());
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (dataset.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk;
      const std::size_t hi = std::min(dataset.size(), lo + chunk);
      pool.emplace_back([&, t, lo, hi] {
        try {
          run(lo, hi);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  EvalReport report = accuracy_from_predictions(dataset, predictions, keys);
  report.config["model"] = model.config();
  report.config["blocks"] = blocks;
  return report;
}

// Row norms of F_1 .. F_{B+1}: B+1 vectors of length K.
inline std::vector<std::vector<double>> dump_block_responses(const GroundingModel& model,
                                                             const GroundingExample& ex,
                                                             std::span<const std::string> order) {
  Tape tape;
  tape.set_grad_enabled(false);
  const auto labels = ex.scene.labels();
  const ForwardOutput out = forward(tape, model, ex.scene, labels, order, ex.description);
  std::vector<std::vector<double>> responses;
  for (const Var& f : out.features) {
    const Matrix& m = f.value();
    std::vector<double> norms(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0.0;
      for (double v : m.row(r)) s += v * v;
      norms[r] = std::sqrt(s);
    }
    responses.push_back(std::move(norms));
  }
  return responses;
}

}  // namespace vigor
