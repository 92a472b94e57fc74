#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   8 bytes   magic "VIGORCKP"
//   u32       format version
//   u64       header length N
//   N bytes   header: JSON with model config, class names, train config,
//             step counters, RNG state and parameter names/shapes
//   u64       array count
//   repeated: u64 element count, then that many IEEE-754 doubles
//
// Arrays are the parameters in registration order, followed by the Adam
// first and second moments when optimizer state is present.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vigor/adam.hpp"
#include "vigor/error.hpp"
#include "vigor/model.hpp"
#include "vigor/trainer.hpp"

namespace vigor {

inline constexpr std::array<char, 8> kCheckpointMagic = {'V', 'I', 'G', 'O', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  std::vector<std::string> classes;
  TrainConfig train;
  std::uint64_t warmup_step = 0;
  std::uint64_t main_step = 0;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<Matrix> params;
  AdamState adam;
};

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw IoError("checkpoint " + path + " is truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

inline void write_array(std::ostream& out, const Matrix& m) {
  write_le<std::uint64_t>(out, m.size());
  for (double v : m.values()) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline std::vector<double> read_array(std::istream& in, const std::string& path) {
  const auto n = read_le<std::uint64_t>(in, path);
  if (n > (1ULL << 32)) throw IoError("checkpoint " + path + " has an implausible array length");
  std::vector<double> values(static_cast<std::size_t>(n));
  for (double& v : values) v = std::bit_cast<double>(read_le<std::uint64_t>(in, path));
  return values;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const GroundingModel& model,
                            const TrainState& state, const TrainConfig& train) {
  nlohmann::json header;
  header["model"] = model.config();
  header["classes"] = model.classes().names();
  header["train"] = train;
  header["warmup_step"] = state.warmup_step;
  header["main_step"] = state.main_step;
  header["adam_step"] = state.adam.step;
  header["has_optimizer"] = !state.adam.first_moment.empty();
  header["rng"] = state.rng.state();
  auto& shapes = header["params"] = nlohmann::json::array();
  for (const Parameter* p : model.parameters()) {
    shapes.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  const bool with_opt = !state.adam.first_moment.empty();
  detail::write_le<std::uint64_t>(out, params.size() * (with_opt ? 3 : 1));
  for (const Parameter* p : params) detail::write_array(out, p->value);
  if (with_opt) {
    for (const auto& m : state.adam.first_moment) detail::write_array(out, m);
    for (const auto& v : state.adam.second_moment) detail::write_array(out, v);
  }
  if (!out) throw IoError("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw IoError(path + " is not a checkpoint");
  const auto version = detail::read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + path + " has format version " + std::to_string(version) +
                  ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = detail::read_le<std::uint64_t>(in, path);
  if (header_len > (1ULL << 28)) throw IoError("checkpoint " + path + " has an implausible header");
  std::string text(static_cast<std::size_t>(header_len), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw IoError("checkpoint " + path + " is truncated");

  Checkpoint ck;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  bool with_opt = false;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.model = header.at("model").get<ModelConfig>();
    ck.classes = header.at("classes").get<std::vector<std::string>>();
    ck.train = header.at("train").get<TrainConfig>();
    ck.warmup_step = header.at("warmup_step").get<std::uint64_t>();
    ck.main_step = header.at("main_step").get<std::uint64_t>();
    ck.adam.step = header.at("adam_step").get<std::uint64_t>();
    with_opt = header.at("has_optimizer").get<bool>();
    ck.rng_state = header.at("rng").get<std::string>();
    for (const auto& p : header.at("params")) {
      ck.names.push_back(p.at("name").get<std::string>());
      shapes.emplace_back(p.at("rows").get<std::size_t>(), p.at("cols").get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path + " has a malformed header: " + e.what());
  }

  const auto count = detail::read_le<std::uint64_t>(in, path);
  if (count != shapes.size() * (with_opt ? 3 : 1)) {
    throw IoError("checkpoint " + path + " array count does not match its header");
  }
  auto read_group = [&](std::vector<Matrix>& dst) {
    for (const auto& [rows, cols] : shapes) {
      auto values = detail::read_array(in, path);
      if (values.size() != rows * cols) throw IoError("checkpoint " + path + " has a mis-sized array");
      dst.emplace_back(rows, cols, std::move(values));
    }
  };
  read_group(ck.params);
  if (with_opt) {
    read_group(ck.adam.first_moment);
    read_group(ck.adam.second_moment);
  }
  return ck;
}

// Copies checkpoint weights into `model`; refuses on any config, class or
// parameter-layout mismatch.
inline void restore_model(GroundingModel& model, const Checkpoint& ck) {
  if (!(model.config() == ck.model)) {
    throw ContractError("checkpoint model config (d=" + std::to_string(ck.model.d) + ", blocks=" +
                        std::to_string(ck.model.blocks) + ", heads=" + std::to_string(ck.model.heads) +
                        ") does not match this model (d=" + std::to_string(model.config().d) +
                        ", blocks=" + std::to_string(model.config().blocks) + ", heads=" +
                        std::to_string(model.config().heads) + ")");
  }
  if (model.classes().names() != ck.classes) {
    throw ContractError("checkpoint class vocabulary differs from this model's");
  }
  const auto params = model.parameters();
  if (params.size() != ck.names.size()) throw ContractError("checkpoint parameter count differs");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != ck.names[i]) {
      throw ContractError("checkpoint parameter " + ck.names[i] + " where " + params[i]->name +
                          " was expected");
    }
  }
  model.load_snapshot(ck.params);
}

inline GroundingModel model_from_checkpoint(const Checkpoint& ck) {
  GroundingModel model(ck.model, ClassVocab(ck.classes));
  restore_model(model, ck);
  return model;
}

inline TrainState state_from_checkpoint(const Checkpoint& ck) {
  TrainState state;
  state.adam = ck.adam;
  state.warmup_step = ck.warmup_step;
  state.main_step = ck.main_step;
  state.rng.restore(ck.rng_state);
  return state;
}

}  // namespace vigor
