#pragma once

// Line-delimited JSON datasets and the in-memory grounding example.

#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vigor/error.hpp"
#include "vigor/scene.hpp"
#include "vigor/synthgen.hpp"

namespace vigor {

struct ProposalRecord {
  int id = 0;
  std::string class_name;
  Vec3 center{};
  std::vector<ColoredPoint> points;

  bool operator==(const ProposalRecord&) const = default;
};

struct DatasetRecord {
  std::string scene_id;
  std::vector<ProposalRecord> proposals;
  std::string description;
  std::vector<std::string> order;
  std::optional<std::vector<int>> anchor_ids;  // warm-up records only
  int target_id = 0;
  std::optional<std::string> relation;
  std::optional<std::string> style;

  bool operator==(const DatasetRecord&) const = default;

  void validate() const {
    if (order.empty()) throw IoError("record " + scene_id + ": empty order");
    bool found = false;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (proposals[i].id != static_cast<int>(i)) {
        throw IoError("record " + scene_id + ": proposal ids must be 0..K-1 in order");
      }
      if (proposals[i].points.empty()) {
        throw IoError("record " + scene_id + ": proposal " + std::to_string(i) + " has no points");
      }
      found = found || proposals[i].id == target_id;
    }
    if (!found) throw IoError("record " + scene_id + ": target_id not among proposals");
    if (anchor_ids && anchor_ids->size() != order.size()) {
      throw IoError("record " + scene_id + ": anchor_ids and order differ in length");
    }
  }
};

inline void to_json(nlohmann::json& j, const ProposalRecord& p) {
  j = {{"id", p.id}, {"class", p.class_name}, {"center", p.center}, {"points", p.points}};
}

inline void from_json(const nlohmann::json& j, ProposalRecord& p) {
  j.at("id").get_to(p.id);
  j.at("class").get_to(p.class_name);
  j.at("center").get_to(p.center);
  j.at("points").get_to(p.points);
}

inline void to_json(nlohmann::json& j, const DatasetRecord& r) {
  j = {{"scene_id", r.scene_id},
       {"proposals", r.proposals},
       {"description", r.description},
       {"order", r.order},
       {"target_id", r.target_id}};
  if (r.anchor_ids) j["anchor_ids"] = *r.anchor_ids;
  if (r.relation) j["relation"] = *r.relation;
  if (r.style) j["style"] = *r.style;
}

inline void from_json(const nlohmann::json& j, DatasetRecord& r) {
  j.at("scene_id").get_to(r.scene_id);
  j.at("proposals").get_to(r.proposals);
  j.at("description").get_to(r.description);
  j.at("order").get_to(r.order);
  j.at("target_id").get_to(r.target_id);
  r.anchor_ids.reset();
  r.relation.reset();
  r.style.reset();
  if (j.contains("anchor_ids")) r.anchor_ids = j.at("anchor_ids").get<std::vector<int>>();
  if (j.contains("relation")) r.relation = j.at("relation").get<std::string>();
  if (j.contains("style")) r.style = j.at("style").get<std::string>();
}

// Serializable form of a generated sample. Natural-style records do not
// carry anchor ids; only their target is supervised.
inline DatasetRecord record_from_sample(const WarmupSample& s) {
  DatasetRecord r;
  r.scene_id = s.scene.scene_id;
  for (const auto& p : s.scene.proposals) {
    r.proposals.push_back({p.id, s.scene.class_name(p), p.center, p.points});
  }
  r.description = s.description;
  r.order = s.order;
  if (s.style == SampleStyle::kWarmup) r.anchor_ids = s.anchor_target_ids;
  r.target_id = s.target_id();
  r.relation = std::string(relation_word(s.relation));
  r.style = std::string(style_name(s.style));
  return r;
}

// Rebuilds a scene, recomputing centers from points. Stored centers must
// agree with the recomputed ones.
inline Scene scene_from_record(const DatasetRecord& r, std::shared_ptr<const ClassVocab> vocab) {
  Scene scene{r.scene_id, {}, vocab};
  for (const auto& p : r.proposals) {
    const auto cls = vocab->find(p.class_name);
    if (!cls) throw IoError("record " + r.scene_id + ": unknown class '" + p.class_name + "'");
    Proposal q = make_proposal(p.id, *cls, p.points);
    for (int k = 0; k < 3; ++k) {
      if (std::abs(q.center[k] - p.center[k]) > 1e-9) {
        throw IoError("record " + r.scene_id + ": stored center of proposal " +
                      std::to_string(p.id) + " disagrees with its points");
      }
    }
    scene.proposals.push_back(std::move(q));
  }
  return scene;
}

inline void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(nlohmann::json::parse(line).get<DatasetRecord>());
      records.back().validate();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

// What the trainer and evaluator consume.
struct GroundingExample {
  Scene scene;
  std::string description;
  std::vector<std::string> order;  // as stored, before trim/pad
  std::optional<std::vector<int>> anchor_ids;
  int target_id = 0;
  std::optional<Relation> relation;
};

inline GroundingExample example_from_sample(const WarmupSample& s) {
  GroundingExample e{s.scene, s.description, s.order, std::nullopt, s.target_id(), s.relation};
  if (s.style == SampleStyle::kWarmup) e.anchor_ids = s.anchor_target_ids;
  return e;
}

inline GroundingExample example_from_record(const DatasetRecord& r,
                                            std::shared_ptr<const ClassVocab> vocab) {
  GroundingExample e{scene_from_record(r, std::move(vocab)), r.description, r.order, r.anchor_ids,
                     r.target_id, std::nullopt};
  if (r.relation) e.relation = parse_relation(*r.relation);
  return e;
}

}  // namespace vigor
