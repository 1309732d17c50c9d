#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtlgen {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::string_view kUnknownLabel = "Unknown";

struct AttributeCategory {
  std::string name;
  std::vector<std::string> classes;

  std::size_t size() const { return classes.size(); }
  std::optional<std::size_t> find(std::string_view label) const;
  std::size_t unknown_index() const;
};

/// Class index per category, in schema order.
using AttributeLabels = std::vector<std::size_t>;

class AttributeSchema {
 public:
  AttributeSchema() = default;
  /// Validates uniqueness and the presence of 'Unknown' in every vocabulary.
  explicit AttributeSchema(std::vector<AttributeCategory> categories);

  std::size_t size() const { return categories_.size(); }
  const AttributeCategory& operator[](std::size_t i) const { return categories_.at(i); }
  const std::vector<AttributeCategory>& categories() const { return categories_; }
  std::optional<std::size_t> find(std::string_view category) const;
  /// Index of `category`, throwing ConfigError when absent.
  std::size_t index_of(std::string_view category) const;
  std::size_t class_index(std::size_t category, std::string_view label) const;

  /// Sum of vocabulary sizes: the number of distinct labels an item can take.
  std::size_t total_labels() const;
  /// Stable 64-bit fingerprint of names and vocabularies, as 16 hex digits.
  std::string hash() const;

  bool is_unknown(std::size_t category, std::size_t cls) const {
    return categories_.at(category).unknown_index() == cls;
  }
  AttributeLabels all_unknown() const;

  bool operator==(const AttributeSchema& other) const;

 private:
  std::vector<AttributeCategory> categories_;
};

/// The six-category garment schema used by the synthetic catalog.
AttributeSchema default_schema();

namespace attr {
// Category indices in default_schema().
inline constexpr std::size_t kColour = 0;
inline constexpr std::size_t kPattern = 1;
inline constexpr std::size_t kSleeve = 2;
inline constexpr std::size_t kHemline = 3;
inline constexpr std::size_t kNeck = 4;
inline constexpr std::size_t kOccasion = 5;
}  // namespace attr

std::string to_lower(std::string_view s);

}  // namespace mtlgen
