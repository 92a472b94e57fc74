#pragma once

// Synthetic scenes and order-aware grounding samples.
//
// Warm-up samples follow the fixed referral template: B distinct classes are
// arranged into an order, the first class is pruned down to a single
// proposal, and every later object is the farthest (or nearest) proposal of
// its class from the previous one. Natural-style samples reuse the same
// chain construction with reworded descriptions, variable order length and
// a mix of relations; they stand in for human-written data and are never
// used for warm-up.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vigor/error.hpp"
#include "vigor/rng.hpp"
#include "vigor/scene.hpp"

namespace vigor {

enum class SampleStyle { kWarmup, kNatural };

inline std::string_view style_name(SampleStyle s) {
  return s == SampleStyle::kWarmup ? "warmup" : "natural";
}

inline SampleStyle parse_style(std::string_view s) {
  if (s == "warmup") return SampleStyle::kWarmup;
  if (s == "natural") return SampleStyle::kNatural;
  throw ContractError("unknown sample style '" + std::string(s) + "' (expected warmup|natural)");
}

struct GenConfig {
  std::size_t num_scenes = 100;
  int min_proposals = 5;
  int max_proposals = 9;
  int points_per_proposal = 16;
  double room_extent = 6.0;
  std::size_t num_classes = 10;
  int order_len = 4;
  Relation relation = Relation::kFarthest;
  double min_separation = 0.02;
  std::uint64_t seed = 0;

  SampleStyle style = SampleStyle::kWarmup;
  // Natural style only: order length is drawn from [min_order_len, order_len].
  int min_order_len = 2;
  // Natural style only: probability of using the other relation.
  double relation_flip = 0.25;

  void validate() const {
    if (min_proposals < 1 || min_proposals > max_proposals) {
      throw ContractError("GenConfig: need 1 <= min_proposals <= max_proposals");
    }
    if (points_per_proposal < 1) throw ContractError("GenConfig: points_per_proposal must be >= 1");
    if (!(min_separation > 0.0)) throw ContractError("GenConfig: min_separation must be > 0");
    if (!(room_extent > 0.0)) throw ContractError("GenConfig: room_extent must be > 0");
    if (order_len < 2 && style == SampleStyle::kWarmup) {
      throw ContractError("GenConfig: order_len must be >= 2");
    }
    if (style == SampleStyle::kNatural && (min_order_len < 1 || min_order_len > order_len)) {
      throw ContractError("GenConfig: need 1 <= min_order_len <= order_len");
    }
  }
};

struct WarmupSample {
  Scene scene;
  std::string description;
  std::vector<std::string> order;
  std::vector<int> anchor_target_ids;
  Relation relation = Relation::kFarthest;
  SampleStyle style = SampleStyle::kWarmup;

  int target_id() const { return anchor_target_ids.back(); }
};

inline constexpr int kRejectionBudget = 1000;

namespace detail {

inline Vec3 class_color(int class_id) {
  const double phase = 2.399963 * class_id;  // golden angle
  return {0.5 + 0.45 * std::sin(phase), 0.5 + 0.45 * std::sin(phase + 2.094),
          0.5 + 0.45 * std::sin(phase + 4.189)};
}

inline Vec3 class_half_size(int class_id) {
  return {0.15 + 0.05 * (class_id % 5), 0.15 + 0.05 * ((class_id + 2) % 5),
          0.1 + 0.08 * ((class_id + 1) % 4)};
}

// Points around `nominal` whose bbox center is `nominal` up to rounding.
inline std::vector<ColoredPoint> sample_points(int class_id, const Vec3& nominal, int count,
                                               Rng& rng) {
  const Vec3 half = class_half_size(class_id);
  const Vec3 color = class_color(class_id);
  std::vector<ColoredPoint> pts(static_cast<std::size_t>(count));
  Vec3 lo{}, hi{};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      pts[i][k] = rng.uniform(-half[k], half[k]);
      lo[k] = i == 0 ? pts[i][k] : std::min(lo[k], pts[i][k]);
      hi[k] = i == 0 ? pts[i][k] : std::max(hi[k], pts[i][k]);
    }
    for (int k = 0; k < 3; ++k) {
      pts[i][3 + k] = std::clamp(color[k] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    }
  }
  for (auto& p : pts)
    for (int k = 0; k < 3; ++k) p[k] = nominal[k] + (p[k] - (lo[k] + hi[k]) / 2.0);
  return pts;
}

// True if every distance in `fresh` is at least `delta` away from every
// distance in `existing` and from every other fresh distance.
inline bool distances_separated(const std::vector<double>& existing,
                                const std::vector<double>& fresh, double delta) {
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    for (double e : existing)
      if (std::abs(fresh[i] - e) < delta) return false;
    for (std::size_t j = i + 1; j < fresh.size(); ++j)
      if (std::abs(fresh[i] - fresh[j]) < delta) return false;
  }
  return true;
}

inline std::string scene_name(std::uint64_t index) {
  std::ostringstream out;
  out << "scene_";
  out.width(6);
  out.fill('0');
  out << index;
  return out.str();
}

}  // namespace detail

// Random scene whose pairwise center distances are pairwise at least
// `min_separation` apart, so no relation query can tie.
inline Scene sample_scene(const GenConfig& cfg, std::shared_ptr<const ClassVocab> vocab, Rng& rng,
                          std::string scene_id = "scene") {
  cfg.validate();
  if (!vocab) throw ContractError("sample_scene: missing class vocabulary");
  const int k = rng.between(cfg.min_proposals, cfg.max_proposals);
  Scene scene{std::move(scene_id), {}, vocab};
  std::vector<double> distances;
  const double height = cfg.room_extent / 4.0;
  for (int id = 0; id < k; ++id) {
    const int class_id = static_cast<int>(rng.index(vocab->size()));
    bool placed = false;
    for (int attempt = 0; attempt < kRejectionBudget && !placed; ++attempt) {
      const Vec3 nominal{rng.uniform(0.0, cfg.room_extent), rng.uniform(0.0, cfg.room_extent),
                         rng.uniform(0.0, height)};
      Proposal p = make_proposal(id, class_id,
                                 detail::sample_points(class_id, nominal,
                                                       cfg.points_per_proposal, rng));
      std::vector<double> fresh;
      fresh.reserve(scene.proposals.size());
      for (const auto& q : scene.proposals) fresh.push_back(distance(p.center, q.center));
      if (!detail::distances_separated(distances, fresh, cfg.min_separation)) continue;
      distances.insert(distances.end(), fresh.begin(), fresh.end());
      scene.proposals.push_back(std::move(p));
      placed = true;
    }
    if (!placed) {
      throw GenerationError("sample_scene: could not separate " + std::to_string(k) +
                            " proposals within " + std::to_string(kRejectionBudget) +
                            " tries; use a larger room or smaller min separation");
    }
  }
  return scene;
}

// Smallest gap between any two pairwise center distances (infinity when the
// scene has fewer than two distances).
inline double min_distance_gap(const Scene& scene) {
  std::vector<double> d;
  for (std::size_t i = 0; i < scene.proposals.size(); ++i)
    for (std::size_t j = i + 1; j < scene.proposals.size(); ++j)
      d.push_back(distance(scene.proposals[i].center, scene.proposals[j].center));
  std::sort(d.begin(), d.end());
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < d.size(); ++i) gap = std::min(gap, d[i] - d[i - 1]);
  return gap;
}

// Warm-up description; the two-element form skips straight to the final clause.
inline std::string render_description(const std::vector<std::string>& order, Relation relation) {
  if (order.size() < 2) throw ContractError("render_description: order needs >= 2 names");
  const std::string rel(relation_word(relation));
  std::string out = "There is a " + order[0] + " in the room";
  for (std::size_t i = 1; i + 1 < order.size(); ++i) {
    if (i == 1) {
      out += ", find the " + order[i] + " " + rel + " to it";
    } else {
      out += ", and then find the " + order[i] + " " + rel + " to that " + order[i - 1];
    }
  }
  const std::size_t last = order.size() - 1;
  out += ", finally you can see the " + order[last] + " " + rel + " to that " + order[last - 1] + ".";
  return out;
}

inline constexpr int kNaturalVariants = 3;

// Reworded descriptions for natural-style data. Class names still appear in
// chain order, and the optional distractor note only repeats the target.
inline std::string render_natural_description(const std::vector<std::string>& order,
                                              Relation relation, int variant,
                                              bool distractor_note) {
  if (order.empty()) throw ContractError("render_natural_description: empty order");
  const std::string rel(relation_word(relation));
  const std::size_t n = order.size();
  std::string out;
  if (n == 1) {
    out = "Find the " + order[0] + " in the room.";
  } else {
    switch (variant) {
      case 0:
        out = "Start at the " + order[0] + ".";
        for (std::size_t i = 1; i + 1 < n; ++i) {
          out += i == 1 ? " Look for the " + order[i] + " that is " + rel + " from it,"
                        : " then the " + order[i] + " " + rel + " from that " + order[i - 1] + ",";
        }
        out += " The target is the " + order[n - 1] + " " + rel + " from that " + order[n - 2] + ".";
        break;
      case 1:
        out = "Begin with the " + order[0] + ".";
        for (std::size_t i = 1; i + 1 < n; ++i)
          out += " Go to the " + order[i] + " " + rel + " from the " + order[i - 1] + ".";
        out += " Pick the " + order[n - 1] + " that is " + rel + " from the " + order[n - 2] + ".";
        break;
      default:
        out = "Using the " + order[0] + " as a reference";
        for (std::size_t i = 1; i + 1 < n; ++i)
          out += ", locate the " + order[i] + " " + rel + " from the " + order[i - 1];
        out += ", the answer is the " + order[n - 1] + " " + rel + " from the " + order[n - 2] + ".";
        break;
    }
  }
  if (distractor_note) out += " It is not one of the other " + order[n - 1] + " objects.";
  return out;
}

// Copy of `scene` in which only one proposal of `class_id` survives, chosen
// uniformly at random. Ids are renumbered 0..K'-1 in original order.
inline Scene keep_single_of_class(const Scene& scene, int class_id, Rng& rng) {
  std::vector<int> members;
  for (const auto& p : scene.proposals)
    if (p.class_id == class_id) members.push_back(p.id);
  if (members.empty()) throw NotFoundError("keep_single_of_class: class absent from scene");
  const int keep = members[rng.index(members.size())];
  Scene out{scene.scene_id, {}, scene.vocab};
  for (const auto& p : scene.proposals) {
    if (p.class_id == class_id && p.id != keep) continue;
    Proposal q = p;
    q.id = static_cast<int>(out.proposals.size());
    out.proposals.push_back(std::move(q));
  }
  return out;
}

namespace detail {

inline std::vector<int> distinct_classes(const Scene& scene) {
  std::vector<int> classes = scene.labels();
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

// `count` distinct classes of the scene in random order.
inline std::vector<int> arrange_classes(const Scene& scene, std::size_t count, Rng& rng) {
  std::vector<int> classes = distinct_classes(scene);
  if (classes.size() < count) {
    throw SkipError("scene " + scene.scene_id + " has " + std::to_string(classes.size()) +
                    " distinct classes, need " + std::to_string(count));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.index(classes.size() - i);
    std::swap(classes[i], classes[j]);
  }
  classes.resize(count);
  return classes;
}

// Prunes the first class to one proposal and resolves the chain.
inline WarmupSample build_chain(const Scene& scene, const std::vector<int>& classes,
                                Relation relation, Rng& rng) {
  WarmupSample s;
  s.scene = keep_single_of_class(scene, classes.front(), rng);
  s.relation = relation;
  for (int c : classes) s.order.push_back(scene.vocab->name(c));
  for (const auto& p : s.scene.proposals) {
    if (p.class_id == classes.front()) s.anchor_target_ids.push_back(p.id);
  }
  for (std::size_t i = 1; i < classes.size(); ++i) {
    const Vec3& ref = s.scene.proposals[static_cast<std::size_t>(s.anchor_target_ids.back())].center;
    s.anchor_target_ids.push_back(relation_select(s.scene, classes[i], ref, relation));
  }
  return s;
}

}  // namespace detail

inline WarmupSample synth_warmup_sample(const Scene& scene, int order_len, Relation relation,
                                        Rng& rng) {
  if (order_len < 2) throw ContractError("synth_warmup_sample: order length must be >= 2");
  const auto classes = detail::arrange_classes(scene, static_cast<std::size_t>(order_len), rng);
  WarmupSample s = detail::build_chain(scene, classes, relation, rng);
  s.description = render_description(s.order, relation);
  s.style = SampleStyle::kWarmup;
  return s;
}

inline WarmupSample synth_natural_sample(const Scene& scene, const GenConfig& cfg, Rng& rng) {
  const int len = rng.between(cfg.min_order_len, cfg.order_len);
  Relation relation = cfg.relation;
  if (rng.bernoulli(cfg.relation_flip)) {
    relation = relation == Relation::kFarthest ? Relation::kNearest : Relation::kFarthest;
  }
  const int variant = static_cast<int>(rng.index(kNaturalVariants));
  const auto classes = detail::arrange_classes(scene, static_cast<std::size_t>(len), rng);
  WarmupSample s = detail::build_chain(scene, classes, relation, rng);
  const int target_class = classes.back();
  const auto same_class = std::count_if(s.scene.proposals.begin(), s.scene.proposals.end(),
                                        [&](const Proposal& p) { return p.class_id == target_class; });
  s.description = render_natural_description(s.order, relation, variant, same_class > 1);
  s.style = SampleStyle::kNatural;
  return s;
}

// Re-derives the anchor/target chain from (scene, order, relation) alone by
// exhaustive distance scans. Throws AmbiguityError when the first class is
// not unique or a hop has two candidates within 1e-9 of the optimum.
inline std::vector<int> oracle_resolve(const Scene& scene, const std::vector<std::string>& order,
                                       Relation relation) {
  if (order.empty()) throw ContractError("oracle_resolve: empty order");
  auto members = [&](const std::string& name) {
    std::vector<const Proposal*> out;
    const std::string wanted = normalize_name(name);
    for (const auto& p : scene.proposals)
      if (scene.class_name(p) == wanted) out.push_back(&p);
    return out;
  };
  const auto first = members(order.front());
  if (first.empty()) throw NotFoundError("oracle_resolve: no '" + order.front() + "' in scene");
  if (first.size() > 1) {
    throw AmbiguityError("oracle_resolve: " + std::to_string(first.size()) + " proposals of '" +
                         order.front() + "'");
  }
  std::vector<int> ids{first.front()->id};
  const Proposal* prev = first.front();
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto cands = members(order[i]);
    if (cands.empty()) throw NotFoundError("oracle_resolve: no '" + order[i] + "' in scene");
    std::vector<double> dist;
    for (const Proposal* c : cands) {
      const double dx = c->center[0] - prev->center[0];
      const double dy = c->center[1] - prev->center[1];
      const double dz = c->center[2] - prev->center[2];
      dist.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    const auto best_it = relation == Relation::kFarthest ? std::max_element(dist.begin(), dist.end())
                                                         : std::min_element(dist.begin(), dist.end());
    const double best = *best_it;
    const auto near_best = std::count_if(dist.begin(), dist.end(),
                                         [best](double d) { return std::abs(d - best) <= 1e-9; });
    if (near_best > 1) {
      throw AmbiguityError("oracle_resolve: tie for '" + order[i] + "' in " + scene.scene_id);
    }
    prev = cands[static_cast<std::size_t>(best_it - dist.begin())];
    ids.push_back(prev->id);
  }
  return ids;
}

inline std::vector<int> oracle_resolve(const WarmupSample& sample) {
  return oracle_resolve(sample.scene, sample.order, sample.relation);
}

inline constexpr int kSampleAttempts = 100;

// Draws one sample of the configured style, resampling scenes that cannot
// host it.
inline WarmupSample draw_sample(const GenConfig& cfg, std::shared_ptr<const ClassVocab> vocab,
                                Rng& rng, const std::string& scene_id) {
  for (int attempt = 0; attempt < kSampleAttempts; ++attempt) {
    Scene scene = sample_scene(cfg, vocab, rng, scene_id);
    try {
      return cfg.style == SampleStyle::kWarmup
                 ? synth_warmup_sample(scene, cfg.order_len, cfg.relation, rng)
                 : synth_natural_sample(scene, cfg, rng);
    } catch (const SkipError&) {
      continue;
    }
  }
  throw GenerationError("draw_sample: no usable scene after " + std::to_string(kSampleAttempts) +
                        " attempts; raise the proposal count or the class count");
}

inline Rng scene_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng(mix_seed(seed) ^ mix_seed(index + 1));
}

// Streams `cfg.num_scenes` samples to `sink`; sample i depends only on
// (seed, i).
inline void generate_dataset(const GenConfig& cfg, const std::function<void(WarmupSample&&)>& sink) {
  cfg.validate();
  auto vocab = std::make_shared<const ClassVocab>(ClassVocab::indoor(cfg.num_classes));
  for (std::size_t i = 0; i < cfg.num_scenes; ++i) {
    Rng rng = scene_rng(cfg.seed, i);
    sink(draw_sample(cfg, vocab, rng, detail::scene_name(i)));
  }
}

inline std::vector<WarmupSample> generate_dataset(const GenConfig& cfg) {
  std::vector<WarmupSample> out;
  out.reserve(cfg.num_scenes);
  generate_dataset(cfg, [&out](WarmupSample&& s) { out.push_back(std::move(s)); });
  return out;
}

}  // namespace vigor
