#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vigor/scene.hpp"

namespace vigor {

// Lowercase alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Word-level vocabulary of the text encoder: a fixed lexicon covering the
// description templates plus every token of every class name. Id 0 is the
// unknown-word token.
class WordVocab {
 public:
  static constexpr std::size_t kUnknown = 0;

  explicit WordVocab(const ClassVocab& classes) {
    static const std::vector<std::string> kLexicon = {
        "a",       "and",    "answer", "as",     "at",       "begin",    "can",      "farthest",
        "finally", "find",   "for",    "from",   "go",       "in",       "is",       "it",
        "locate",  "look",   "nearest", "not",   "objects",  "of",       "one",      "other",
        "pick",    "reference", "room", "see",   "start",    "target",   "that",     "the",
        "then",    "there",  "to",     "using",  "with",     "you"};
    words_.push_back("<unk>");
    std::vector<std::string> all = kLexicon;
    for (const auto& name : classes.names()) {
      for (auto& tok : tokenize(name)) all.push_back(std::move(tok));
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    for (auto& w : all) {
      index_.emplace(w, words_.size());
      words_.push_back(std::move(w));
    }
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnknown : it->second;
  }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> ids;
    for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
    return ids;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace vigor
