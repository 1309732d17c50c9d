#include "mtlgen/schema.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>

namespace mtlgen {

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::optional<std::size_t> AttributeCategory::find(std::string_view label) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == label) return i;
  return std::nullopt;
}

std::size_t AttributeCategory::unknown_index() const {
  auto idx = find(kUnknownLabel);
  if (!idx) throw ConfigError("category '" + name + "' has no Unknown class");
  return *idx;
}

AttributeSchema::AttributeSchema(std::vector<AttributeCategory> categories)
    : categories_(std::move(categories)) {
  if (categories_.empty()) throw ConfigError("schema: no categories");
  std::set<std::string> names;
  for (const auto& c : categories_) {
    if (!names.insert(c.name).second) throw ConfigError("schema: duplicate category '" + c.name + "'");
    std::set<std::string> labels(c.classes.begin(), c.classes.end());
    if (labels.size() != c.classes.size())
      throw ConfigError("schema: duplicate class in category '" + c.name + "'");
    if (!labels.contains(std::string(kUnknownLabel)))
      throw ConfigError("schema: category '" + c.name + "' lacks 'Unknown'");
  }
}

std::optional<std::size_t> AttributeSchema::find(std::string_view category) const {
  for (std::size_t i = 0; i < categories_.size(); ++i)
    if (categories_[i].name == category) return i;
  return std::nullopt;
}

std::size_t AttributeSchema::index_of(std::string_view category) const {
  auto idx = find(category);
  if (!idx) throw ConfigError("schema: unknown category '" + std::string(category) + "'");
  return *idx;
}

std::size_t AttributeSchema::class_index(std::size_t category, std::string_view label) const {
  const auto& cat = categories_.at(category);
  auto idx = cat.find(label);
  if (!idx) throw ConfigError("schema: label '" + std::string(label) + "' not in category '" + cat.name + "'");
  return *idx;
}

std::size_t AttributeSchema::total_labels() const {
  std::size_t n = 0;
  for (const auto& c : categories_) n += c.size();
  return n;
}

std::string AttributeSchema::hash() const {
  // FNV-1a over a canonical rendering.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::string_view s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  for (const auto& c : categories_) {
    feed(c.name);
    for (const auto& cls : c.classes) feed(cls);
    feed("|");
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

AttributeLabels AttributeSchema::all_unknown() const {
  AttributeLabels labels;
  for (const auto& c : categories_) labels.push_back(c.unknown_index());
  return labels;
}

bool AttributeSchema::operator==(const AttributeSchema& other) const {
  if (categories_.size() != other.categories_.size()) return false;
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (categories_[i].name != other.categories_[i].name) return false;
    if (categories_[i].classes != other.categories_[i].classes) return false;
  }
  return true;
}

AttributeSchema default_schema() {
  return AttributeSchema({
      {"Colour", {"Black", "White", "Red", "Blue", "Green", "Pink", "Unknown"}},
      {"Pattern", {"Plain", "Printed", "Striped", "Geometric", "Unknown"}},
      {"Sleeve Length", {"Sleeveless", "Short", "Long", "Unknown"}},
      {"Hemline", {"Straight", "Flared", "Asymmetric", "Unknown"}},
      {"Neck", {"Round", "V-Neck", "One Shoulder", "Sweetheart", "Unknown"}},
      {"Occasion", {"Daily", "Evening", "Formal", "Unknown"}},
  });
}

}  // namespace mtlgen
