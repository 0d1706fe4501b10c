#include "mindprobe/tokenizer.hpp"

#include <cctype>

#include "mindprobe/errors.hpp"

namespace mindprobe {
namespace {

bool is_punct_token(char c) {
  switch (c) {
    case '.': case ',': case '?': case '!': case ':': case ';':
    case '(': case ')': case '\'': case '"':
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      flush();
      out.emplace_back(Vocabulary::kNewline);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (c == '<' && current.empty()) {
      const auto close = text.find('>', i);
      const auto space = text.find_first_of(" \t\r\n", i);
      if (close != std::string_view::npos && (space == std::string_view::npos || close < space)) {
        std::string w(text.substr(i, close - i + 1));
        for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        out.push_back(std::move(w));
        i = close;
      } else {
        current.push_back(c);
      }
    } else if (is_punct_token(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  auto push = [&](std::string_view w) {
    std::string key(w);
    if (index_.contains(key)) return;
    index_.emplace(key, static_cast<TokenId>(words_.size()));
    words_.push_back(std::move(key));
  };
  push(kUnknown);
  push(kBos);
  push(kNewline);
  for (const auto& w : words) push(w);
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnknownId : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

Vocabulary::Encoded Vocabulary::encode(std::string_view text) const {
  Encoded e;
  for (const auto& w : split_words(text)) {
    const TokenId t = id(w);
    if (t == kUnknownId && w != kUnknown) ++e.oov;
    e.ids.push_back(t);
  }
  return e;
}

Vocabulary::Encoded Vocabulary::encode_document(std::string_view text) const {
  Encoded e = encode(text);
  e.ids.insert(e.ids.begin(), kBosId);
  return e;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const { return words_; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  auto words = j.get<std::vector<std::string>>();
  if (words.size() < kNumSpecial || words[0] != kUnknown || words[1] != kBos || words[2] != kNewline) {
    throw FormatError("vocabulary does not start with the special tokens");
  }
  words.erase(words.begin(), words.begin() + kNumSpecial);
  return Vocabulary(words);
}

}  // namespace mindprobe
