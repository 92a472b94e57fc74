#pragma once

// HTTP transport for the two-stage order client. Kept out of
// orderparse.hpp so the core library does not depend on cpp-httplib.

#include <chrono>
#include <string>

#include "httplib.h"
#include "vigor/orderparse.hpp"

namespace vigor {

class HttpChatTransport : public ChatTransport {
 public:
  explicit HttpChatTransport(LlmEndpointConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    split_url(cfg_.base_url);
  }

  std::string post(const nlohmann::json& request) override {
    httplib::Client client(origin_);
    const auto timeout = std::chrono::duration<double>(cfg_.timeout_seconds);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    httplib::Headers headers;
    if (const std::string token = cfg_.token(); !token.empty()) {
      headers.emplace("Authorization", "Bearer " + token);
    }
    auto res = client.Post(path_, headers, request.dump(), "application/json");
    if (!res) throw TransportError("request to " + origin_ + path_ + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
    }
    return res->body;
  }

  const std::string& origin() const noexcept { return origin_; }
  const std::string& path() const noexcept { return path_; }

 private:
  // "scheme://host[:port][/prefix]" -> origin + ".../chat/completions".
  void split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ContractError("endpoint URL lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    constexpr std::string_view kSuffix = "/chat/completions";
    if (prefix.size() >= kSuffix.size() &&
        prefix.compare(prefix.size() - kSuffix.size(), kSuffix.size(), kSuffix) == 0) {
      path_ = prefix;
    } else {
      path_ = prefix + std::string(kSuffix);
    }
  }

  LlmEndpointConfig cfg_;
  std::string origin_;
  std::string path_;
};

}  // namespace vigor
