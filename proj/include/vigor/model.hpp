#pragma once

// Order-aware grounding network.
//
// Text and proposal encoders produce the sentence/word features T, the
// per-class order features T_O and the initial proposal features F_1.
// B referring blocks refine F_i -> F_{i+1}; block i only lets proposals whose
// class appears in the order suffix O_{i:B} through its masked branch.
// Shared heads read every F_{i+1}: referral scores, mask logits and
// anchor-relative coordinates, plus a class head on the sentence feature.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vigor/error.hpp"
#include "vigor/rng.hpp"
#include "vigor/scene.hpp"
#include "vigor/tensor.hpp"
#include "vigor/text.hpp"

namespace vigor {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t blocks = 4;
  std::size_t heads = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw ContractError("ModelConfig: d (" + std::to_string(d) + ") must be a positive multiple of heads (" +
                          std::to_string(heads) + ")");
    }
    if (blocks < 1) throw ContractError("ModelConfig: need at least one referring block");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Layers

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng) {
    Linear l;
    l.weight = &store.add_weight(name + ".w", in, out, rng);
    l.bias = &store.add_constant(name + ".b", 1, out, 0.0);
    return l;
  }

  Var operator()(Var x) const {
    Tape& t = x.tape();
    return add_row(matmul(x, t.param(*weight)), t.param(*bias));
  }
};

// Two linear layers with a ReLU between them, applied row-wise.
struct Mlp {
  Linear hidden;
  Linear out;

  static Mlp create(ParamStore& store, const std::string& name, std::size_t in, std::size_t mid,
                    std::size_t out, Rng& rng) {
    return {Linear::create(store, name + ".0", in, mid, rng),
            Linear::create(store, name + ".1", mid, out, rng)};
  }

  Var operator()(Var x) const { return out(relu(hidden(x))); }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t width) {
    return {&store.add_constant(name + ".g", 1, width, 1.0),
            &store.add_constant(name + ".b", 1, width, 0.0)};
  }

  Var operator()(Var x) const {
    Tape& t = x.tape();
    return layer_norm(x, t.param(*gain), t.param(*bias));
  }
};

// Multi-head scaled dot-product attention; rows of `query` attend over rows
// of `kv`. Output has one row per query row.
struct Attention {
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Parameter* wo = nullptr;
  Parameter* bo = nullptr;
  std::size_t heads = 1;

  static Attention create(ParamStore& store, const std::string& name, std::size_t d,
                          std::size_t heads, Rng& rng) {
    Attention a;
    a.wq = &store.add_weight(name + ".q", d, d, rng);
    a.wk = &store.add_weight(name + ".k", d, d, rng);
    a.wv = &store.add_weight(name + ".v", d, d, rng);
    a.wo = &store.add_weight(name + ".o", d, d, rng);
    a.bo = &store.add_constant(name + ".ob", 1, d, 0.0);
    a.heads = heads;
    return a;
  }

  Var operator()(Var query, Var kv) const {
    Tape& t = query.tape();
    const Var q = matmul(query, t.param(*wq));
    const Var k = matmul(kv, t.param(*wk));
    const Var v = matmul(kv, t.param(*wv));
    const std::size_t d = q.cols();
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Var merged;
    for (std::size_t h = 0; h < heads; ++h) {
      const Var qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
      const Var kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
      const Var vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
      const Var weights = row_softmax(scale(matmul_nt(qh, kh), inv_sqrt));
      const Var out = matmul(weights, vh);
      merged = h == 0 ? out : concat_cols(merged, out);
    }
    return add_row(matmul(merged, t.param(*wo)), t.param(*bo));
  }
};

// ---------------------------------------------------------------------------
// Encoders

inline Matrix sinusoidal_positions(std::size_t rows, std::size_t d) {
  Matrix pe(rows, d);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(pos, i) = i % 2 == 0 ? std::sin(static_cast<double>(pos) * freq)
                              : std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

struct TextFeatures {
  Var full;    // (|D|+1) x d; row 0 is the sentence feature
  Var orders;  // B x d, one row per order element

  Var sentence() const { return slice_rows(full, 0, 1); }
};

struct TextEncoder {
  static constexpr std::size_t kLayers = 2;

  Parameter* embedding = nullptr;
  std::vector<Attention> attention;
  std::vector<LayerNorm> norms;

  static TextEncoder create(ParamStore& store, std::size_t words, std::size_t d, std::size_t heads,
                            Rng& rng) {
    TextEncoder enc;
    Matrix emb(words, d);
    for (double& v : emb.values()) v = 0.5 * rng.normal();
    enc.embedding = &store.add("text.embedding", std::move(emb));
    for (std::size_t l = 0; l < kLayers; ++l) {
      const std::string name = "text.layer" + std::to_string(l);
      enc.attention.push_back(Attention::create(store, name + ".attn", d, heads, rng));
      enc.norms.push_back(LayerNorm::create(store, name + ".norm", d));
    }
    return enc;
  }

  // Word features of one token sequence.
  Var encode_sequence(Tape& tape, const std::vector<std::size_t>& ids) const {
    if (ids.empty()) throw ContractError("TextEncoder: empty token sequence");
    Var x = gather_rows(tape.param(*embedding), ids);
    x = add(x, tape.constant(sinusoidal_positions(ids.size(), x.cols())));
    for (std::size_t l = 0; l < kLayers; ++l) x = norms[l](add(x, attention[l](x, x)));
    return x;
  }
};

// Point features (x - center, rgb) through a shared two-layer MLP,
// max-pooled per proposal, joined with a linear code of the center and
// projected to width d. Each output row depends on its own proposal only.
struct ObjectEncoder {
  Linear point0;
  Linear point1;
  Linear center;
  Linear project;

  static ObjectEncoder create(ParamStore& store, std::size_t d, Rng& rng) {
    return {Linear::create(store, "object.point0", 6, d, rng),
            Linear::create(store, "object.point1", d, d, rng),
            Linear::create(store, "object.center", 3, d, rng),
            Linear::create(store, "object.project", 2 * d, d, rng)};
  }

  Var operator()(Tape& tape, const Scene& scene) const {
    if (scene.proposals.empty()) throw ContractError("encode_objects: scene has no proposals");
    std::size_t total = 0;
    for (const auto& p : scene.proposals) total += p.points.size();
    Matrix pts(total, 6);
    Matrix centers(scene.size(), 3);
    std::vector<std::size_t> offsets{0};
    std::size_t row = 0;
    for (std::size_t k = 0; k < scene.size(); ++k) {
      const Proposal& p = scene.proposals[k];
      if (p.points.empty()) throw ContractError("encode_objects: proposal without points");
      for (const auto& pt : p.points) {
        for (int c = 0; c < 3; ++c) pts(row, c) = pt[c] - p.center[c];
        for (int c = 3; c < 6; ++c) pts(row, c) = pt[c];
        ++row;
      }
      offsets.push_back(row);
      for (int c = 0; c < 3; ++c) centers(k, c) = p.center[c];
    }
    const Var h = relu(point1(relu(point0(tape.constant(std::move(pts))))));
    const Var pooled = segment_max_rows(h, std::move(offsets));
    const Var where = center(tape.constant(std::move(centers)));
    return project(concat_cols(pooled, where));
  }
};

// ---------------------------------------------------------------------------
// Referring block

struct FeBlock {
  Attention self_attention;
  LayerNorm self_norm;
  Attention lower;   // order suffix attends to masked proposals
  Attention upper;   // [order suffix; T] attends to self-attended proposals
  Attention fusion;  // proposals attend to both branch outputs
  LayerNorm out_norm;

  static FeBlock create(ParamStore& store, const std::string& name, std::size_t d,
                        std::size_t heads, Rng& rng) {
    return {Attention::create(store, name + ".self", d, heads, rng),
            LayerNorm::create(store, name + ".self_norm", d),
            Attention::create(store, name + ".lower", d, heads, rng),
            Attention::create(store, name + ".upper", d, heads, rng),
            Attention::create(store, name + ".fusion", d, heads, rng),
            LayerNorm::create(store, name + ".out_norm", d)};
  }
};

inline Matrix mask_column(const RelevanceMask& mask) {
  Matrix m(mask.size(), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask.bits[i] ? 1.0 : 0.0;
  return m;
}

// One feature-enhancement pass. `order_suffix` holds the text features of
// O_{i:B}; `text` is the full (|D|+1) x d description encoding.
inline Var fe_forward(Var features, const RelevanceMask& mask, Var order_suffix, Var text,
                      const FeBlock& block) {
  Tape& t = features.tape();
  if (mask.size() != features.rows()) {
    throw DimensionError("fe_forward: mask of length " + std::to_string(mask.size()) +
                         " for features " + features.value().shape_string());
  }
  const Var masked = scale_rows(features, t.constant(mask_column(mask)));
  const Var lower = block.lower(order_suffix, masked);
  const Var attended = block.self_norm(add(features, block.self_attention(features, features)));
  const Var upper = block.upper(concat_rows(order_suffix, text), attended);
  const Var fused = block.fusion(attended, concat_rows(lower, upper));
  return block.out_norm(add(attended, fused));
}

// ---------------------------------------------------------------------------
// Model

struct Heads {
  Mlp score;   // d -> 1 per proposal
  Mlp mask;    // d -> 1 per proposal
  Mlp coord;   // d -> 3 per proposal
  Mlp text;    // d -> |classes| on the sentence feature
};

class GroundingModel {
 public:
  GroundingModel(ModelConfig cfg, ClassVocab classes)
      : cfg_(cfg), classes_(std::move(classes)), words_(classes_) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed));
    const std::size_t d = cfg_.d;
    text_ = TextEncoder::create(store_, words_.size(), d, cfg_.heads, rng);
    objects_ = ObjectEncoder::create(store_, d, rng);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      blocks_.push_back(FeBlock::create(store_, "block" + std::to_string(b), d, cfg_.heads, rng));
    }
    heads_.score = Mlp::create(store_, "head.score", d, d, 1, rng);
    heads_.mask = Mlp::create(store_, "head.mask", d, d, 1, rng);
    heads_.coord = Mlp::create(store_, "head.coord", d, d, 3, rng);
    heads_.text = Mlp::create(store_, "head.text", d, d, classes_.size(), rng);
  }

  GroundingModel(const GroundingModel&) = delete;
  GroundingModel& operator=(const GroundingModel&) = delete;
  GroundingModel(GroundingModel&&) = default;
  GroundingModel& operator=(GroundingModel&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  const ClassVocab& classes() const noexcept { return classes_; }
  const WordVocab& words() const noexcept { return words_; }
  ParamStore& store() noexcept { return store_; }
  const ParamStore& store() const noexcept { return store_; }
  std::vector<Parameter*> parameters() const { return store_.all(); }

  const TextEncoder& text_encoder() const noexcept { return text_; }
  const ObjectEncoder& object_encoder() const noexcept { return objects_; }
  const FeBlock& block(std::size_t i) const { return blocks_.at(i); }
  const Heads& heads() const noexcept { return heads_; }

  // Parameter values in registration order.
  std::vector<Matrix> snapshot() const {
    std::vector<Matrix> out;
    for (const Parameter* p : store_.all()) out.push_back(p->value);
    return out;
  }

  void load_snapshot(const std::vector<Matrix>& values) {
    const auto params = store_.all();
    if (values.size() != params.size()) {
      throw DimensionError("load_snapshot: " + std::to_string(values.size()) + " arrays for " +
                           std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!values[i].same_shape(params[i]->value)) {
        throw DimensionError("load_snapshot: " + params[i]->name + " expects " +
                             params[i]->value.shape_string() + ", got " + values[i].shape_string());
      }
      params[i]->value = values[i];
    }
  }

 private:
  ModelConfig cfg_;
  ClassVocab classes_;
  WordVocab words_;
  ParamStore store_;
  TextEncoder text_;
  ObjectEncoder objects_;
  std::vector<FeBlock> blocks_;
  Heads heads_;
};

inline TextFeatures encode_text(Tape& tape, const GroundingModel& model, const std::string& description,
                                std::span<const std::string> order) {
  const auto ids = model.words().encode(description);
  if (ids.empty()) throw ContractError("encode_text: empty description");
  const TextEncoder& enc = model.text_encoder();
  const Var words = enc.encode_sequence(tape, ids);
  TextFeatures out;
  out.full = concat_rows(mean_rows(words), words);
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto name_ids = model.words().encode(order[i]);
    if (name_ids.empty()) name_ids.push_back(WordVocab::kUnknown);
    const Var feature = mean_rows(enc.encode_sequence(tape, name_ids));
    out.orders = i == 0 ? feature : concat_rows(out.orders, feature);
  }
  return out;
}

inline Var encode_objects(Tape& tape, const GroundingModel& model, const Scene& scene) {
  return model.object_encoder()(tape, scene);
}

struct ForwardOutput {
  std::vector<Var> features;      // F_1 .. F_{B+1}, each K x d
  std::vector<Var> block_scores;  // from F_2 .. F_{B+1}, each K x 1
  std::vector<Var> mask_logits;   // K x 1 per block
  std::vector<Var> coord_pred;    // K x 3 per block
  Var text_logits;                // 1 x |classes|
  std::vector<RelevanceMask> masks;  // M_1 .. M_B

  Var scores() const { return block_scores.back(); }
};

// Full pass for one scene. `labels` are the class ids used for masking and
// `order` must already hold exactly B names.
inline ForwardOutput forward(Tape& tape, const GroundingModel& model, const Scene& scene,
                             std::span<const int> labels, std::span<const std::string> order,
                             const std::string& description) {
  const std::size_t blocks = model.config().blocks;
  if (order.size() != blocks) {
    throw ContractError("forward: order has " + std::to_string(order.size()) +
                        " names, model expects " + std::to_string(blocks) + " (apply trim_pad)");
  }
  if (labels.size() != scene.size()) {
    throw DimensionError("forward: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(scene.size()) + " proposals");
  }
  ForwardOutput out;
  const TextFeatures text = encode_text(tape, model, description, order);
  out.features.push_back(encode_objects(tape, model, scene));
  for (std::size_t i = 0; i < blocks; ++i) {
    RelevanceMask mask = build_mask(labels, order.subspan(i), model.classes());
    if (i > 0 && !mask.subset_of(out.masks.back())) {
      throw ContractError("forward: relevance masks are not nested along the order");
    }
    const Var suffix = slice_rows(text.orders, i, blocks - i);
    out.features.push_back(fe_forward(out.features.back(), mask, suffix, text.full, model.block(i)));
    out.masks.push_back(std::move(mask));
    const Var f = out.features.back();
    out.block_scores.push_back(model.heads().score(f));
    out.mask_logits.push_back(model.heads().mask(f));
    out.coord_pred.push_back(model.heads().coord(f));
  }
  out.text_logits = model.heads().text(text.sentence());
  return out;
}

}  // namespace vigor
