#pragma once

// Referential-order extraction: a rule-based appearance-order parser, the
// two-stage language-model client, and trim/pad normalization to a fixed
// block count.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vigor/error.hpp"
#include "vigor/prompts.hpp"
#include "vigor/scene.hpp"
#include "vigor/text.hpp"

namespace vigor {

enum class OrderSourceKind { kRule, kLlm };

struct ParsedOrder {
  std::vector<std::string> names;  // target last
  OrderSourceKind source = OrderSourceKind::kRule;
  std::optional<std::string> raw_response;
};

// Class names in order of first appearance. At each token the longest
// matching class name wins; repeated names are ignored.
inline ParsedOrder parse_appearance_order(std::string_view description, const ClassVocab& vocab) {
  const auto tokens = tokenize(description);
  std::vector<std::vector<std::string>> class_tokens;
  class_tokens.reserve(vocab.size());
  for (const auto& name : vocab.names()) class_tokens.push_back(tokenize(name));

  ParsedOrder out;
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    std::size_t best_len = 0;
    int best_class = -1;
    for (std::size_t c = 0; c < class_tokens.size(); ++c) {
      const auto& ct = class_tokens[c];
      if (ct.empty() || ct.size() <= best_len || pos + ct.size() > tokens.size()) continue;
      if (std::equal(ct.begin(), ct.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos))) {
        best_len = ct.size();
        best_class = static_cast<int>(c);
      }
    }
    if (best_class < 0) {
      ++pos;
      continue;
    }
    const std::string& name = vocab.name(best_class);
    if (std::find(out.names.begin(), out.names.end(), name) == out.names.end()) {
      out.names.push_back(name);
    }
    pos += best_len;
  }
  if (out.names.empty()) {
    throw EmptyOrderError("parse_appearance_order: no class name found", std::string(description));
  }
  return out;
}

// Exactly `length` names: longer orders lose elements from the front,
// shorter ones are left-padded by repeating their first element.
inline std::vector<std::string> trim_pad(const std::vector<std::string>& order, std::size_t length) {
  if (order.empty()) throw ContractError("trim_pad: empty order");
  if (length == 0) throw ContractError("trim_pad: length must be >= 1");
  if (order.size() >= length) {
    return {order.end() - static_cast<std::ptrdiff_t>(length), order.end()};
  }
  std::vector<std::string> out(length - order.size(), order.front());
  out.insert(out.end(), order.begin(), order.end());
  return out;
}

// ---------------------------------------------------------------------------
// Language-model client

struct LlmEndpointConfig {
  std::string base_url;
  std::string model = "gpt-3.5-turbo";
  std::string auth_env = "VIGOR_LLM_KEY";
  double timeout_seconds = 30.0;
  int max_retries = 2;

  void validate() const {
    if (!(timeout_seconds > 0.0)) throw ContractError("LlmEndpointConfig: timeout must be > 0");
    if (max_retries < 0) throw ContractError("LlmEndpointConfig: max_retries must be >= 0");
  }

  std::string token() const {
    const char* v = std::getenv(auth_env.c_str());
    return v == nullptr ? std::string{} : std::string(v);
  }

  // Reads VIGOR_LLM_ENDPOINT (required) and VIGOR_LLM_MODEL (optional).
  static LlmEndpointConfig from_env() {
    LlmEndpointConfig cfg;
    const char* url = std::getenv("VIGOR_LLM_ENDPOINT");
    if (url == nullptr || *url == '\0') {
      throw ContractError("VIGOR_LLM_ENDPOINT is not set; the llm parser needs an endpoint");
    }
    cfg.base_url = url;
    if (const char* m = std::getenv("VIGOR_LLM_MODEL"); m != nullptr && *m != '\0') cfg.model = m;
    return cfg;
  }
};

// A failed exchange that may succeed when retried.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Sends one chat-completions request body and returns the raw response body.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string post(const nlohmann::json& request) = 0;
};

inline nlohmann::json make_chat_request(const std::string& model, const std::string& content) {
  return {{"model", model},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
}

// Text of the first choice of a chat-completions response.
inline std::string response_text(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("response is not JSON: ") + e.what(), body);
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
    throw ParseError("response has no choices", body);
  }
  const auto& choice = j["choices"][0];
  if (choice.contains("message") && choice["message"].contains("content") &&
      choice["message"]["content"].is_string()) {
    return choice["message"]["content"].get<std::string>();
  }
  if (choice.contains("text") && choice["text"].is_string()) return choice["text"].get<std::string>();
  throw ParseError("first choice carries no text content", body);
}

// Replays recorded responses. Each line of the transcript file is
// {"request_substring": ..., "response": ...}; a request is answered by the
// record with the longest substring found in its message content.
class CannedTranscriptTransport : public ChatTransport {
 public:
  struct Record {
    std::string request_substring;
    std::string response;
  };

  explicit CannedTranscriptTransport(std::vector<Record> records) : records_(std::move(records)) {}

  static CannedTranscriptTransport from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open transcript " + path);
    std::vector<Record> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        records.push_back({j.at("request_substring").get<std::string>(),
                           j.at("response").get<std::string>()});
      } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return CannedTranscriptTransport(std::move(records));
  }

  std::string post(const nlohmann::json& request) override {
    ++calls_;
    std::string content;
    for (const auto& m : request.at("messages")) content += m.at("content").get<std::string>();
    const Record* best = nullptr;
    for (const auto& r : records_) {
      if (content.find(r.request_substring) == std::string::npos) continue;
      if (best == nullptr || r.request_substring.size() > best->request_substring.size()) best = &r;
    }
    if (best == nullptr) throw TransportError("canned transcript has no matching record");
    const nlohmann::json body = {
        {"choices", nlohmann::json::array({{{"index", 0},
                                            {"message", {{"role", "assistant"},
                                                         {"content", best->response}}}}})}};
    return body.dump();
  }

  std::size_t calls() const noexcept { return calls_; }

 private:
  std::vector<Record> records_;
  std::size_t calls_ = 0;
};

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n\"'`*");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\"'`*.");
  if (e == std::string_view::npos || e < b) return {};
  return std::string(s.substr(b, e - b + 1));
}

// Rest of the line following `label` (case-insensitive), if present.
inline std::optional<std::string> labeled_value(const std::string& text, std::string_view label) {
  const std::string low = lower(text);
  const auto pos = low.find(lower(label));
  if (pos == std::string::npos) return std::nullopt;
  const auto start = pos + label.size();
  const auto end = text.find('\n', start);
  return trim(std::string_view(text).substr(start, end == std::string::npos ? std::string::npos
                                                                            : end - start));
}

inline std::vector<std::string> split_arrows(const std::string& chain) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < chain.size();) {
    if (chain.compare(i, 3, "\xE2\x86\x92") == 0) {  // U+2192
      out.push_back(cur);
      cur.clear();
      i += 3;
    } else if (chain.compare(i, 2, "->") == 0) {
      out.push_back(cur);
      cur.clear();
      i += 2;
    } else {
      cur.push_back(chain[i++]);
    }
  }
  out.push_back(cur);
  std::vector<std::string> names;
  for (const auto& part : out) {
    std::string n = normalize_name(trim(part));
    if (!n.empty()) names.push_back(std::move(n));
  }
  return names;
}

}  // namespace detail

struct SummaryResponse {
  std::string summary;
  std::string target;
};

inline SummaryResponse parse_summary_response(const std::string& text) {
  auto summary = detail::labeled_value(text, "summarized description:");
  auto target = detail::labeled_value(text, "target object:");
  if (!summary || summary->empty() || !target || target->empty()) {
    throw ParseError("stage-one response lacks 'summarized description:' or 'target object:'", text);
  }
  return {*summary, normalize_name(*target)};
}

inline std::vector<std::string> parse_order_response(const std::string& text) {
  auto value = detail::labeled_value(text, "referential order:");
  if (!value) throw ParseError("stage-two response lacks 'referential order:'", text);
  std::string chain = *value;
  const auto anchors = detail::lower(chain).find("anchor objects");
  if (anchors != std::string::npos) chain = detail::trim(chain.substr(0, anchors));
  while (!chain.empty() && (chain.back() == ',' || chain.back() == ';')) chain.pop_back();
  auto names = detail::split_arrows(chain);
  if (names.empty()) throw ParseError("stage-two response has an empty referential order", text);
  return names;
}

// Two-stage order extraction: summarize and find the target, then order the
// anchors of the summary.
class LlmOrderClient {
 public:
  LlmOrderClient(LlmEndpointConfig cfg, std::unique_ptr<ChatTransport> transport)
      : cfg_(std::move(cfg)), transport_(std::move(transport)) {
    cfg_.validate();
    if (!transport_) throw ContractError("LlmOrderClient: missing transport");
  }

  ParsedOrder two_stage_order(const std::string& description) {
    const std::string first = complete(prompts::fill(prompts::kSummarize, description));
    const SummaryResponse summary = parse_summary_response(first);
    const std::string second = complete(prompts::fill(prompts::kOrder, summary.summary));
    std::vector<std::string> names;
    try {
      names = parse_order_response(second);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), first + "\n---\n" + second);
    }
    ParsedOrder out{std::move(names), OrderSourceKind::kLlm, first + "\n---\n" + second};
    if (out.names.back() != summary.target) {
      *out.raw_response += "\n---\ntarget mismatch: stage one named '" + summary.target +
                           "', order ends with '" + out.names.back() + "'";
    }
    return out;
  }

  const LlmEndpointConfig& config() const noexcept { return cfg_; }

 private:
  std::string complete(const std::string& content) {
    const auto request = make_chat_request(cfg_.model, content);
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      try {
        return response_text(transport_->post(request));
      } catch (const TransportError& e) {
        last_error = e.what();
      }
    }
    throw EndpointError("language-model endpoint failed after " +
                        std::to_string(cfg_.max_retries + 1) + " attempts: " + last_error);
  }

  LlmEndpointConfig cfg_;
  std::unique_ptr<ChatTransport> transport_;
};

// Common face of the rule parser and the language-model client.
class OrderParser {
 public:
  virtual ~OrderParser() = default;
  virtual ParsedOrder parse(const std::string& description, const ClassVocab& vocab) = 0;
};

class RuleOrderParser : public OrderParser {
 public:
  ParsedOrder parse(const std::string& description, const ClassVocab& vocab) override {
    return parse_appearance_order(description, vocab);
  }
};

class LlmOrderParser : public OrderParser {
 public:
  explicit LlmOrderParser(LlmOrderClient client) : client_(std::move(client)) {}
  ParsedOrder parse(const std::string& description, const ClassVocab&) override {
    return client_.two_stage_order(description);
  }

 private:
  LlmOrderClient client_;
};

}  // namespace vigor
