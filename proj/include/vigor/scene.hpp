#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vigor/error.hpp"

namespace vigor {

using Vec3 = std::array<double, 3>;

// x, y, z in meters followed by r, g, b in [0, 1].
using ColoredPoint = std::array<double, 6>;

struct Box {
  Vec3 min{};
  Vec3 max{};
  bool operator==(const Box&) const = default;
};

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Lowercase with surrounding whitespace removed and inner runs collapsed to
// one space.
inline std::string normalize_name(std::string_view name) {
  std::string out;
  bool pending_space = false;
  for (char ch : name) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

// Ordered, duplicate-free list of class names. Class ids are positions.
class ClassVocab {
 public:
  explicit ClassVocab(std::vector<std::string> names) {
    if (names.empty()) throw ContractError("ClassVocab: empty vocabulary");
    for (auto& raw : names) {
      std::string name = normalize_name(raw);
      if (name.empty()) throw ContractError("ClassVocab: blank class name");
      if (index_.contains(name)) throw ContractError("ClassVocab: duplicate class '" + name + "'");
      index_.emplace(name, static_cast<int>(names_.size()));
      names_.push_back(std::move(name));
    }
  }

  // Indoor classes used by the synthetic generator. None of them collide
  // with words of the description templates.
  static ClassVocab indoor(std::size_t count = 10) {
    static const std::vector<std::string> kNames = {
        "chair", "table",  "door",     "bed",     "sofa",     "cabinet",   "window", "lamp",
        "trash can", "bookshelf", "pillow", "desk", "monitor", "plant", "curtain", "towel"};
    if (count == 0 || count > kNames.size()) {
      throw ContractError("ClassVocab::indoor: count must be in [1, " +
                          std::to_string(kNames.size()) + "]");
    }
    return ClassVocab({kNames.begin(), kNames.begin() + static_cast<std::ptrdiff_t>(count)});
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::optional<int> find(std::string_view name) const {
    auto it = index_.find(normalize_name(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int require(std::string_view name) const {
    if (auto id = find(name)) return *id;
    throw NotFoundError("unknown class name '" + std::string(name) + "'");
  }

  bool operator==(const ClassVocab& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

struct Proposal {
  int id = 0;
  int class_id = 0;
  std::vector<ColoredPoint> points;
  Vec3 center{};
  Box bbox{};

  bool operator==(const Proposal&) const = default;
};

struct Scene {
  std::string scene_id;
  std::vector<Proposal> proposals;
  std::shared_ptr<const ClassVocab> vocab;

  std::size_t size() const noexcept { return proposals.size(); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(proposals.size());
    for (const auto& p : proposals) out.push_back(p.class_id);
    return out;
  }

  std::vector<Vec3> centers() const {
    std::vector<Vec3> out;
    out.reserve(proposals.size());
    for (const auto& p : proposals) out.push_back(p.center);
    return out;
  }

  const std::string& class_name(const Proposal& p) const { return vocab->name(p.class_id); }
};

// Binary K-vector marking proposals whose class occurs in an order suffix.
struct RelevanceMask {
  std::vector<std::uint8_t> bits;

  std::size_t size() const noexcept { return bits.size(); }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool operator==(const RelevanceMask&) const = default;

  // True when every set bit of this mask is also set in `other`.
  bool subset_of(const RelevanceMask& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i] && !other.bits[i]) return false;
    return true;
  }
};

struct CenterBox {
  Vec3 center{};
  Box bbox{};
};

inline CenterBox compute_center_bbox(std::span<const ColoredPoint> points) {
  if (points.empty()) throw ContractError("compute_center_bbox: empty point set");
  CenterBox out;
  for (int k = 0; k < 3; ++k) out.bbox.min[k] = out.bbox.max[k] = points.front()[k];
  for (const auto& p : points) {
    for (int k = 0; k < 3; ++k) {
      if (!std::isfinite(p[k])) throw ContractError("compute_center_bbox: non-finite coordinate");
      out.bbox.min[k] = std::min(out.bbox.min[k], p[k]);
      out.bbox.max[k] = std::max(out.bbox.max[k], p[k]);
    }
  }
  for (int k = 0; k < 3; ++k) out.center[k] = (out.bbox.min[k] + out.bbox.max[k]) / 2.0;
  return out;
}

inline Proposal make_proposal(int id, int class_id, std::vector<ColoredPoint> points) {
  const CenterBox cb = compute_center_bbox(points);
  return Proposal{id, class_id, std::move(points), cb.center, cb.bbox};
}

// Order names that have no entry in `vocab`; these never contribute to a mask.
inline std::vector<std::string> unknown_order_names(std::span<const std::string> names,
                                                    const ClassVocab& vocab) {
  std::vector<std::string> out;
  for (const auto& n : names)
    if (!vocab.find(n)) out.push_back(n);
  return out;
}

// Bit j is set iff the class of labels[j] is named in `order_suffix`.
inline RelevanceMask build_mask(std::span<const int> labels,
                                std::span<const std::string> order_suffix,
                                const ClassVocab& vocab) {
  std::vector<bool> wanted(vocab.size(), false);
  for (const auto& name : order_suffix)
    if (auto id = vocab.find(name)) wanted[static_cast<std::size_t>(*id)] = true;
  RelevanceMask mask;
  mask.bits.reserve(labels.size());
  for (int label : labels) {
    const bool on = label >= 0 && static_cast<std::size_t>(label) < wanted.size() &&
                    wanted[static_cast<std::size_t>(label)];
    mask.bits.push_back(on ? 1 : 0);
  }
  return mask;
}

enum class Relation { kFarthest, kNearest };

inline std::string_view relation_word(Relation r) {
  return r == Relation::kFarthest ? "farthest" : "nearest";
}

inline Relation parse_relation(std::string_view word) {
  const std::string w = normalize_name(word);
  if (w == "farthest") return Relation::kFarthest;
  if (w == "nearest") return Relation::kNearest;
  throw ContractError("unknown relation '" + std::string(word) + "' (expected farthest|nearest)");
}

// Proposal of `class_id` whose center is farthest from / nearest to
// `ref_center`. Ties go to the lowest id.
inline int relation_select(const Scene& scene, int class_id, const Vec3& ref_center,
                           Relation relation) {
  int best = -1;
  double best_dist = 0.0;
  for (const auto& p : scene.proposals) {
    if (p.class_id != class_id) continue;
    const double d = distance(p.center, ref_center);
    const bool better = relation == Relation::kFarthest ? d > best_dist : d < best_dist;
    if (best < 0 || better || (d == best_dist && p.id < best)) {
      best = p.id;
      best_dist = d;
    }
  }
  if (best < 0) {
    throw NotFoundError("relation_select: no proposal of class " + std::to_string(class_id) +
                        " in scene " + scene.scene_id);
  }
  return best;
}

}  // namespace vigor
