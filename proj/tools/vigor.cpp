#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vigor/checkpoint.hpp"
#include "vigor/dataset.hpp"
#include "vigor/eval.hpp"
#include "vigor/llm_http.hpp"
#include "vigor/orderparse.hpp"
#include "vigor/selfcheck.hpp"
#include "vigor/synthgen.hpp"
#include "vigor/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct UsageError : vigor::Error {
  using vigor::Error::Error;
};

std::pair<int, int> parse_range(const std::string& s) {
  const auto colon = s.find(':');
  try {
    std::size_t used = 0;
    if (colon == std::string::npos) {
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return {v, v};
    }
    const int lo = std::stoi(s.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument(s);
    const std::string rest = s.substr(colon + 1);
    const int hi = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(s);
    return {lo, hi};
  } catch (const std::logic_error&) {
    throw UsageError("--proposals expects MIN:MAX, got '" + s + "'");
  }
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw vigor::IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw vigor::IoError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw vigor::IoError("cannot write " + path);
  out << text << '\n';
}

// Class list from a vocabulary file: a JSON array, or one name per line.
vigor::ClassVocab read_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw vigor::IoError("cannot open vocabulary " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::vector<std::string> names;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      names = nlohmann::json::parse(text).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw vigor::IoError(path + ": " + e.what());
    }
  } else {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      const auto e = line.find_last_not_of(" \t\r");
      names.push_back(line.substr(b, e - b + 1));
    }
  }
  return vigor::ClassVocab(std::move(names));
}

// Class names in order of first appearance across a dataset.
vigor::ClassVocab dataset_vocab(const std::vector<vigor::DatasetRecord>& records) {
  std::vector<std::string> names;
  std::set<std::string> seen;
  for (const auto& r : records)
    for (const auto& p : r.proposals)
      if (seen.insert(vigor::normalize_name(p.class_name)).second) names.push_back(vigor::normalize_name(p.class_name));
  return vigor::ClassVocab(std::move(names));
}

std::unique_ptr<vigor::ChatTransport> make_transport(const vigor::LlmEndpointConfig& cfg,
                                                     const std::string& transcript) {
  if (!transcript.empty()) {
    return std::make_unique<vigor::CannedTranscriptTransport>(
        vigor::CannedTranscriptTransport::from_file(transcript));
  }
  return std::make_unique<vigor::HttpChatTransport>(cfg);
}

std::shared_ptr<vigor::OrderParser> make_parser(const std::string& kind, const std::string& transcript) {
  if (kind == "rule") return std::make_shared<vigor::RuleOrderParser>();
  vigor::LlmEndpointConfig cfg;
  if (transcript.empty()) {
    cfg = vigor::LlmEndpointConfig::from_env();
  } else {
    cfg.base_url = "canned://transcript";
  }
  return std::make_shared<vigor::LlmOrderParser>(vigor::LlmOrderClient(cfg, make_transport(cfg, transcript)));
}

std::string join_arrow(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i > 0) out += "\xE2\x86\x92";
    out += names[i];
  }
  return out;
}

struct SynthArgs {
  std::size_t scenes = 100;
  std::string proposals = "5:9";
  int order_len = 4;
  std::string relation = "farthest";
  std::string style = "warmup";
  std::uint64_t seed = 0;
  int points = 16;
  std::size_t classes = 10;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  vigor::GenConfig cfg;
  cfg.num_scenes = a.scenes;
  std::tie(cfg.min_proposals, cfg.max_proposals) = parse_range(a.proposals);
  cfg.order_len = a.order_len;
  cfg.relation = vigor::parse_relation(a.relation);
  cfg.style = vigor::parse_style(a.style);
  cfg.seed = a.seed;
  cfg.points_per_proposal = a.points;
  cfg.num_classes = a.classes;
  cfg.validate();
  std::ofstream out(a.out, std::ios::binary);
  if (!out) throw vigor::IoError("cannot write " + a.out);
  std::size_t n = 0;
  vigor::generate_dataset(cfg, [&](vigor::WarmupSample&& s) {
    out << nlohmann::json(vigor::record_from_sample(s)).dump() << '\n';
    ++n;
  });
  if (!out) throw vigor::IoError("write failed for " + a.out);
  std::cerr << "wrote " << n << " records to " << a.out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::optional<std::uint64_t> warmup_steps;
  std::string main_data;
  std::optional<std::uint64_t> main_steps;
  std::string parser = "rule";
  std::string transcript;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> d;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::string resume;
  std::uint64_t log_every = 100;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  vigor::ModelConfig mc;
  vigor::TrainConfig tc;
  vigor::GenConfig gen;
  std::optional<vigor::ClassVocab> classes;
  if (!a.config.empty()) {
    const auto j = read_json_file(a.config);
    try {
      if (j.contains("model")) j.at("model").get_to(mc);
      if (j.contains("train")) j.at("train").get_to(tc);
      if (j.contains("classes")) classes.emplace(j.at("classes").get<std::vector<std::string>>());
      if (j.contains("num_classes")) gen.num_classes = j.at("num_classes").get<std::size_t>();
      if (j.contains("warmup")) {
        const auto& w = j.at("warmup");
        if (w.contains("proposals")) std::tie(gen.min_proposals, gen.max_proposals) = parse_range(w.at("proposals").get<std::string>());
        if (w.contains("points_per_proposal")) w.at("points_per_proposal").get_to(gen.points_per_proposal);
        if (w.contains("room_extent")) w.at("room_extent").get_to(gen.room_extent);
        if (w.contains("min_separation")) w.at("min_separation").get_to(gen.min_separation);
        if (w.contains("relation")) gen.relation = vigor::parse_relation(w.at("relation").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(a.config + ": " + e.what());
    }
  }
  if (a.warmup_steps) tc.warmup_steps = *a.warmup_steps;
  if (a.main_steps) tc.main_steps = *a.main_steps;
  if (a.seed) tc.seed = mc.seed = *a.seed;
  if (a.d) mc.d = *a.d;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.learning_rate = *a.lr;
  mc.validate();
  tc.validate();
  if (tc.main_steps > 0 && a.main_data.empty()) throw UsageError("--main-steps needs --main-data");

  std::vector<vigor::DatasetRecord> records;
  if (!a.main_data.empty()) records = vigor::read_dataset(a.main_data);
  if (!classes) classes.emplace(vigor::ClassVocab::indoor(gen.num_classes));

  std::optional<vigor::GroundingModel> model;
  vigor::TrainState state(tc.seed);
  if (!a.resume.empty()) {
    const auto ck = vigor::load_checkpoint(a.resume);
    model.emplace(vigor::model_from_checkpoint(ck));
    state = vigor::state_from_checkpoint(ck);
  } else {
    model.emplace(mc, *classes);
  }
  auto vocab = std::make_shared<const vigor::ClassVocab>(model->classes());

  const auto log_every = a.log_every;
  auto on_step = [log_every](vigor::Stage stage, std::uint64_t step, const vigor::LossBreakdown& lb) {
    if (log_every == 0 || step % log_every != 0) return;
    std::fprintf(stderr, "%s step %llu loss %.5f ref %.5f mask %.5f text %.5f", stage == vigor::Stage::kWarmup ? "warmup" : "main",
                 static_cast<unsigned long long>(step), lb.total, lb.ref.value_or(0.0), lb.mask.value_or(0.0),
                 lb.text.value_or(0.0));
    if (lb.crd) std::fprintf(stderr, " crd %.5f", *lb.crd);
    std::fprintf(stderr, "\n");
  };

  vigor::TrainConfig remaining = tc;
  remaining.warmup_steps = tc.warmup_steps > state.warmup_step ? tc.warmup_steps - state.warmup_step : 0;
  vigor::warmup_stage(*model, state, gen, remaining, on_step);
  if (tc.main_steps > 0) {
    std::vector<vigor::GroundingExample> examples;
    examples.reserve(records.size());
    for (const auto& r : records) examples.push_back(vigor::example_from_record(r, vocab));
    remaining.main_steps = tc.main_steps > state.main_step ? tc.main_steps - state.main_step : 0;
    if (remaining.main_steps > 0) {
      vigor::main_stage(*model, state, examples, remaining,
                        vigor::parser_order_source(make_parser(a.parser, a.transcript), vocab), on_step);
    }
  }
  vigor::save_checkpoint(a.out, *model, state, tc);
  std::cerr << "saved checkpoint to " << a.out << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string breakdown;
  std::string report;
  std::string parser = "rule";
  std::string transcript;
  std::string dump;
  std::size_t threads = 1;
};

int cmd_eval(const EvalArgs& a) {
  std::vector<vigor::SubsetKey> keys;
  if (!a.breakdown.empty()) {
    std::stringstream ss(a.breakdown);
    std::string item;
    try {
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) keys.push_back(vigor::parse_subset_key(item));
      }
    } catch (const vigor::ContractError& e) {
      throw UsageError(e.what());
    }
  }
  const auto ck = vigor::load_checkpoint(a.ckpt);
  const vigor::GroundingModel model = vigor::model_from_checkpoint(ck);
  auto vocab = std::make_shared<const vigor::ClassVocab>(model.classes());
  const auto records = vigor::read_dataset(a.data);
  std::vector<vigor::GroundingExample> examples;
  for (const auto& r : records) examples.push_back(vigor::example_from_record(r, vocab));
  if (examples.empty()) throw vigor::IoError(a.data + " holds no records");

  const vigor::OrderSource source = a.parser == "stored"
                                        ? vigor::stored_order_source()
                                        : vigor::parser_order_source(make_parser(a.parser, a.transcript), vocab);
  vigor::EvalReport report = vigor::accuracy(model, examples, source, keys, a.threads);
  report.config["checkpoint"] = a.ckpt;
  report.config["data"] = a.data;
  report.config["parser"] = a.parser;
  report.config["classes"] = model.classes().names();
  write_text(a.report, nlohmann::json(report).dump(2));

  if (!a.dump.empty()) {
    std::ofstream out(a.dump);
    if (!out) throw vigor::IoError("cannot write " + a.dump);
    for (const auto& ex : examples) {
      const auto order = vigor::trim_pad(source(ex), model.config().blocks);
      out << nlohmann::json{{"scene_id", ex.scene.scene_id},
                            {"order", order},
                            {"responses", vigor::dump_block_responses(model, ex, order)}}
                 .dump()
          << '\n';
    }
  }
  return kExitOk;
}

struct ParseArgs {
  std::string desc;
  std::string parser = "rule";
  std::string vocab;
  std::string transcript;
};

int cmd_parse(const ParseArgs& a) {
  const vigor::ClassVocab vocab = a.vocab.empty() ? vigor::ClassVocab::indoor(16) : read_vocab(a.vocab);
  const auto parsed = make_parser(a.parser, a.transcript)->parse(a.desc, vocab);
  std::cout << join_arrow(parsed.names) << '\n';
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto report = vigor::model_grad_check(seed);
  for (const auto& e : report.entries) {
    std::printf("%-28s max_rel_err %.3e\n", e.name.c_str(), e.max_rel_err);
  }
  if (report.non_finite) std::printf("non-finite gradient in %s\n", report.non_finite->c_str());
  std::printf("max_rel_err %.3e (%s)\n", report.max_rel_err, report.worst_param.c_str());
  return report.passed(1e-4) ? kExitOk : kExitValidation;
}

int cmd_verify(const std::string& data) {
  const auto records = vigor::read_dataset(data);
  if (records.empty()) {
    std::cout << "verified 0/0 records\n";
    return kExitOk;
  }
  auto vocab = std::make_shared<const vigor::ClassVocab>(dataset_vocab(records));
  std::size_t agree = 0;
  for (const auto& r : records) {
    std::string problem;
    try {
      if (!r.relation) throw vigor::ContractError("record carries no relation");
      const vigor::Scene scene = vigor::scene_from_record(r, vocab);
      const auto ids = vigor::oracle_resolve(scene, r.order, vigor::parse_relation(*r.relation));
      if (ids.back() != r.target_id) problem = "oracle target differs from target_id";
      if (r.anchor_ids && ids != *r.anchor_ids) problem = "oracle chain differs from anchor_ids";
      const auto parsed = vigor::parse_appearance_order(r.description, *vocab);
      if (parsed.names != r.order) problem = "rule parse gives " + join_arrow(parsed.names);
    } catch (const vigor::Error& e) {
      problem = e.what();
    }
    if (problem.empty()) {
      ++agree;
    } else {
      std::cout << r.scene_id << ": " << problem << '\n';
    }
  }
  std::cout << "verified " << agree << "/" << records.size() << " records\n";
  return agree == records.size() ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vigor: order-aware 3D visual grounding at desk scale"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset");
  s->add_option("--scenes", synth.scenes, "Number of samples");
  s->add_option("--proposals", synth.proposals, "Proposals per scene, MIN:MAX");
  s->add_option("--order-len", synth.order_len, "Referential order length");
  s->add_option("--relation", synth.relation, "farthest|nearest")->check(CLI::IsMember({"farthest", "nearest"}));
  s->add_option("--style", synth.style, "warmup|natural")->check(CLI::IsMember({"warmup", "natural"}));
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--points", synth.points, "Points per proposal");
  s->add_option("--classes", synth.classes, "Number of object classes")->check(CLI::Range(1, 16));
  s->add_option("--out", synth.out, "Output JSONL path")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Warm-up and fine-tune a model");
  t->add_option("--warmup-steps", train.warmup_steps, "Warm-up steps");
  t->add_option("--main-data", train.main_data, "Fine-tune dataset (JSONL)");
  t->add_option("--main-steps", train.main_steps, "Fine-tune steps");
  t->add_option("--parser", train.parser, "rule|llm")->check(CLI::IsMember({"rule", "llm"}));
  t->add_option("--transcript", train.transcript, "Canned LLM transcript instead of an endpoint");
  t->add_option("--config", train.config, "JSON config file; flags override it");
  t->add_option("--seed", train.seed, "Seed for model init and training");
  t->add_option("--d", train.d, "Feature width");
  t->add_option("--batch-size", train.batch_size, "Batch size");
  t->add_option("--lr", train.lr, "Learning rate");
  t->add_option("--resume", train.resume, "Continue from a checkpoint");
  t->add_option("--log-every", train.log_every, "Log every N steps (0 = quiet)");
  t->add_option("--out", train.out, "Checkpoint path")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Grounding accuracy of a checkpoint");
  e->add_option("--data", ev.data, "Dataset (JSONL)")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--breakdown", ev.breakdown, "Comma list of order_length,distractors");
  e->add_option("--report", ev.report, "Report path (default stdout)");
  e->add_option("--parser", ev.parser, "rule|llm|stored")->check(CLI::IsMember({"rule", "llm", "stored"}));
  e->add_option("--transcript", ev.transcript, "Canned LLM transcript instead of an endpoint");
  e->add_option("--dump-responses", ev.dump, "Write per-block response norms (JSONL)");
  e->add_option("--threads", ev.threads, "Evaluation threads")->check(CLI::PositiveNumber);

  ParseArgs parse;
  auto* p = app.add_subcommand("parse", "Extract the referential order of a description");
  p->add_option("--desc", parse.desc, "Description")->required();
  p->add_option("--parser", parse.parser, "rule|llm")->check(CLI::IsMember({"rule", "llm"}));
  p->add_option("--vocab", parse.vocab, "Class names: JSON array or one per line");
  p->add_option("--transcript", parse.transcript, "Canned LLM transcript instead of an endpoint");

  std::uint64_t gc_seed = 0;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of a small model");
  g->add_option("--seed", gc_seed, "Seed");

  std::string verify_data;
  auto* v = app.add_subcommand("verify", "Oracle and round-trip parse check of a dataset");
  v->add_option("--data", verify_data, "Dataset (JSONL)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_parse(parse);
    if (*g) return cmd_gradcheck(gc_seed);
    if (*v) return cmd_verify(verify_data);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const vigor::IoError& err) {
    std::cerr << "I/O error: " << err.what() << '\n';
    return kExitIo;
  } catch (const vigor::EndpointError& err) {
    std::cerr << "endpoint error: " << err.what() << '\n';
    return kExitIo;
  } catch (const vigor::ContractError& err) {
    std::cerr << "invalid arguments: " << err.what() << '\n';
    return kExitUsage;
  } catch (const vigor::Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}
