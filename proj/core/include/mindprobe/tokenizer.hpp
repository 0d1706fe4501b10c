#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace mindprobe {

using TokenId = int;

/// Splits text into lowercase word tokens. Punctuation marks become their own
/// tokens, newlines become "<nl>" and "<...>" spans are kept whole.
std::vector<std::string> split_words(std::string_view text);

/// Word-level vocabulary with an out-of-vocabulary token.
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<unk>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kNewline = "<nl>";
  static constexpr TokenId kUnknownId = 0;
  static constexpr TokenId kBosId = 1;
  static constexpr TokenId kNewlineId = 2;
  static constexpr std::size_t kNumSpecial = 3;

  Vocabulary();
  /// Special tokens are prepended; duplicates in `words` are ignored.
  explicit Vocabulary(const std::vector<std::string>& words);

  struct Encoded {
    std::vector<TokenId> ids;
    std::size_t oov = 0;
  };

  Encoded encode(std::string_view text) const;
  /// `encode` with a leading <bos>.
  Encoded encode_document(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace mindprobe
