#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "vigor/llm_http.hpp"
#include "vigor/orderparse.hpp"
#include "vigor/rng.hpp"
#include "vigor/synthgen.hpp"

using namespace vigor;

namespace {

const ClassVocab& indoor() {
  static const ClassVocab v = ClassVocab::indoor(16);
  return v;
}

LlmOrderClient canned_client(int retries = 2) {
  LlmEndpointConfig cfg;
  cfg.base_url = "http://unused";
  cfg.max_retries = retries;
  return LlmOrderClient(cfg, std::make_unique<CannedTranscriptTransport>(
                                 CannedTranscriptTransport::from_file(VIGOR_TEST_DATA "/parse_examples.jsonl")));
}

class FlakyTransport : public ChatTransport {
 public:
  FlakyTransport(int failures, std::string reply) : failures_(failures), reply_(std::move(reply)) {}
  std::string post(const nlohmann::json&) override {
    ++calls;
    if (calls <= failures_) throw TransportError("connection reset");
    return nlohmann::json{{"choices", {{{"message", {{"content", reply_}}}}}}}.dump();
  }
  int calls = 0;

 private:
  int failures_;
  std::string reply_;
};

}  // namespace

TEST(RuleParser, TemplateSentence) {
  const auto p = parse_appearance_order(
      "There is a door in the room, find the table farthest to it, finally you can see the chair farthest to that table.",
      indoor());
  EXPECT_EQ(p.names, (std::vector<std::string>{"door", "table", "chair"}));
  EXPECT_EQ(p.source, OrderSourceKind::kRule);
}

TEST(RuleParser, RepeatsAndLongestMatch) {
  const ClassVocab v({"table", "coffee table", "lamp"});
  EXPECT_EQ(parse_appearance_order("The lamp on the coffee table, next to the other lamp.", v).names,
            (std::vector<std::string>{"lamp", "coffee table"}));
  EXPECT_EQ(parse_appearance_order("A Table. The TABLE again.", v).names, (std::vector<std::string>{"table"}));
}

TEST(RuleParser, NoClassNameThrows) {
  try {
    parse_appearance_order("the thing over there", indoor());
    FAIL();
  } catch (const EmptyOrderError& e) {
    EXPECT_EQ(e.raw(), "the thing over there");
  }
}

TEST(RuleParser, RoundTripsRenderedTemplates) {
  Rng rng(3);
  const auto& names = indoor().names();
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> order;
    const std::size_t len = 2 + rng.index(5);
    while (order.size() < len) {
      const auto& n = names[rng.index(names.size())];
      if (std::find(order.begin(), order.end(), n) == order.end()) order.push_back(n);
    }
    const Relation r = rng.index(2) == 0 ? Relation::kFarthest : Relation::kNearest;
    ASSERT_EQ(parse_appearance_order(render_description(order, r), indoor()).names, order);
  }
}

TEST(TrimPad, Examples) {
  using V = std::vector<std::string>;
  EXPECT_EQ(trim_pad(V{"a", "b", "c", "d", "e"}, 3), (V{"c", "d", "e"}));
  EXPECT_EQ(trim_pad(V{"a", "b"}, 4), (V{"a", "a", "a", "b"}));
  EXPECT_EQ(trim_pad(V{"x"}, 1), (V{"x"}));
  EXPECT_THROW(trim_pad(V{}, 3), ContractError);
  EXPECT_THROW(trim_pad(V{"a"}, 0), ContractError);
}

TEST(TrimPad, RandomProperties) {
  const ClassVocab v({"a", "b", "c", "d", "e", "f"});
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> order(1 + rng.index(8));
    for (auto& n : order) n = v.name(static_cast<int>(rng.index(v.size())));
    const auto out = trim_pad(order, 4);
    ASSERT_EQ(out.size(), 4u);
    ASSERT_EQ(out.back(), order.back());
    ASSERT_EQ(trim_pad(out, 4), out);
    std::vector<int> labels(6);
    for (int& l : labels) l = static_cast<int>(rng.index(v.size()));
    for (std::size_t i = 0; i < 4; ++i) {
      const std::span<const std::string> padded(out.data() + i, 4 - i);
      const std::size_t drop = order.size() > 4 ? order.size() - 4 : 0;
      const std::size_t start = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) -
                                                                static_cast<std::ptrdiff_t>(4 - std::min<std::size_t>(order.size(), 4))) + drop;
      const std::span<const std::string> original(order.data() + start, order.size() - start);
      ASSERT_EQ(build_mask(labels, padded, v), build_mask(labels, original, v));
    }
  }
}

TEST(LlmResponses, SummaryAndOrderFormats) {
  const auto s = parse_summary_response("Summarized description: The pillow near the bed.\nTarget object: Pillow");
  EXPECT_EQ(s.summary, "The pillow near the bed");
  EXPECT_EQ(s.target, "pillow");
  EXPECT_EQ(parse_order_response("referential order: bed\xE2\x86\x92pillow, anchor objects: bed"),
            (std::vector<std::string>{"bed", "pillow"}));
  EXPECT_EQ(parse_order_response("anchor objects: a\nreferential order: table -> window"),
            (std::vector<std::string>{"table", "window"}));
  EXPECT_THROW(parse_summary_response("I cannot help with that."), ParseError);
  EXPECT_THROW(parse_order_response("anchor objects: bed"), ParseError);
  EXPECT_THROW(parse_order_response("referential order: , anchor objects: bed"), ParseError);
  EXPECT_THROW(response_text("not json"), ParseError);
  EXPECT_THROW(response_text(R"({"choices": []})"), ParseError);
}

TEST(LlmClient, CannedTranscriptOrders) {
  auto client = canned_client();
  EXPECT_EQ(client.two_stage_order("The pillow closest to the foot of the bed.").names,
            (std::vector<std::string>{"bed", "pillow"}));
  EXPECT_EQ(client.two_stage_order("Facing the bed, it's the large white pillow on the right. The second one from the headboard.").names,
            (std::vector<std::string>{"bed", "headboard", "pillow"}));
  EXPECT_EQ(client.two_stage_order("The front pillow on the bed with the laptop.").names,
            (std::vector<std::string>{"laptop", "bed", "pillow"}));
  const auto w = client.two_stage_order("The window near the table, not the one near the shelves.");
  EXPECT_EQ(w.names, (std::vector<std::string>{"table", "window"}));
  EXPECT_EQ(w.source, OrderSourceKind::kLlm);
  ASSERT_TRUE(w.raw_response.has_value());
  EXPECT_NE(w.raw_response->find("referential order"), std::string::npos);
}

TEST(LlmClient, UnknownDescriptionExhaustsRetries) {
  auto client = canned_client(1);
  EXPECT_THROW(client.two_stage_order("A description nobody recorded."), EndpointError);
}

TEST(LlmClient, RetriesTransientFailures) {
  auto flaky = std::make_unique<FlakyTransport>(2, "summarized description: a lamp\ntarget object: lamp");
  FlakyTransport* raw = flaky.get();
  LlmEndpointConfig cfg;
  cfg.max_retries = 2;
  LlmOrderClient client(cfg, std::move(flaky));
  EXPECT_THROW(client.two_stage_order("a lamp"), ParseError);
  EXPECT_EQ(raw->calls, 4);
}

TEST(LlmClient, TargetMismatchIsRecorded) {
  CannedTranscriptTransport t({{"description a lamp", "summarized description: the lamp\ntarget object: lamp"},
                               {"description: the lamp", "referential order: lamp -> desk"}});
  LlmOrderClient client(LlmEndpointConfig{}, std::make_unique<CannedTranscriptTransport>(t));
  const auto p = client.two_stage_order("a lamp");
  EXPECT_EQ(p.names, (std::vector<std::string>{"lamp", "desk"}));
  EXPECT_NE(p.raw_response->find("target mismatch"), std::string::npos);
}

TEST(LlmConfig, FromEnvironment) {
  ::unsetenv("VIGOR_LLM_ENDPOINT");
  EXPECT_THROW(LlmEndpointConfig::from_env(), ContractError);
  ::setenv("VIGOR_LLM_ENDPOINT", "http://127.0.0.1:1/v1", 1);
  ::setenv("VIGOR_LLM_MODEL", "m", 1);
  const auto cfg = LlmEndpointConfig::from_env();
  EXPECT_EQ(cfg.base_url, "http://127.0.0.1:1/v1");
  EXPECT_EQ(cfg.model, "m");
  ::unsetenv("VIGOR_LLM_ENDPOINT");
  ::unsetenv("VIGOR_LLM_MODEL");
}

TEST(HttpTransport, UrlSplitting) {
  LlmEndpointConfig cfg;
  cfg.base_url = "http://localhost:8080/v1/";
  HttpChatTransport a(cfg);
  EXPECT_EQ(a.origin(), "http://localhost:8080");
  EXPECT_EQ(a.path(), "/v1/chat/completions");
  cfg.base_url = "http://h/chat/completions";
  EXPECT_EQ(HttpChatTransport(cfg).path(), "/chat/completions");
  cfg.base_url = "localhost";
  EXPECT_THROW(HttpChatTransport{cfg}, ContractError);
}

TEST(HttpTransport, LocalFakeServer) {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string seen_auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    seen_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    const std::string content = body["messages"][0]["content"];
    const std::string reply = content.find("referential order") != std::string::npos &&
                                      content.find("summarized description 1") == std::string::npos
                                  ? "referential order: desk→lamp, anchor objects: desk"
                                  : "summarized description: the lamp on the desk\ntarget object: lamp";
    res.set_content(nlohmann::json{{"choices", {{{"message", {{"content", reply}}}}}}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("VIGOR_TEST_LLM_KEY", "secret", 1);
  LlmEndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
  cfg.auth_env = "VIGOR_TEST_LLM_KEY";
  cfg.timeout_seconds = 5;
  LlmOrderClient client(cfg, std::make_unique<HttpChatTransport>(cfg));
  const auto p = client.two_stage_order("the lamp on the desk, near the window");
  server.stop();
  th.join();

  EXPECT_EQ(p.names, (std::vector<std::string>{"desk", "lamp"}));
  EXPECT_EQ(hits.load(), 2);
  EXPECT_EQ(seen_auth, "Bearer secret");
}

TEST(HttpTransport, UnreachableEndpointFails) {
  httplib::Server probe;
  const int port = probe.bind_to_any_port("127.0.0.1");
  probe.stop();
  LlmEndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.timeout_seconds = 1;
  cfg.max_retries = 1;
  LlmOrderClient client(cfg, std::make_unique<HttpChatTransport>(cfg));
  EXPECT_THROW(client.two_stage_order("a lamp"), EndpointError);
}
