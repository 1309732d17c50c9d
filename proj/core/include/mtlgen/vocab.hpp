#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtlgen {

/// Lowercases, splits on whitespace and strips leading/trailing punctuation.
/// A token made only of punctuation (e.g. a sentence-ending ".") is kept as is.
std::vector<std::string> tokenize(std::string_view text);

inline constexpr std::size_t kMaxPromptTokens = 64;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocab();

  /// Frequency-ordered (ties lexicographic) vocabulary over tokenize(corpus).
  static Vocab build(std::span<const std::string> corpus, std::size_t min_count = 1);
  /// One token per line; line n holds id n + kReserved.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  /// `max_len` of zero disables truncation; the limit counts BOS/EOS.
  std::vector<int> encode(std::string_view text, bool add_bos_eos, std::size_t max_len = 0) const;
  /// Space-joined tokens without PAD/BOS/EOS; UNK renders as "<unk>".
  std::string decode(std::span<const int> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }
  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace mtlgen
