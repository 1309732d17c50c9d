#include "mtlgen/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mtlgen/catalog.hpp"

namespace mtlgen {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string raw; in >> raw;) {
    std::size_t b = 0, e = raw.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(raw[e - 1]))) --e;
    std::string word = b < e ? raw.substr(b, e - b) : raw;
    for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(std::move(word));
  }
  return out;
}

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

void Vocab::add(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::string> corpus, std::size_t min_count) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& w : tokenize(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (auto& [w, n] : ordered)
    if (n >= min_count && !v.contains(w)) v.add(w);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocab '" + path.string() + "'");
  Vocab v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || v.contains(line))
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": empty or duplicate token");
    v.add(line);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::string body;
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) body += tokens_[i] + "\n";
  write_file_atomic(path, body);
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::vector<int> Vocab::encode(std::string_view text, bool add_bos_eos, std::size_t max_len) const {
  std::vector<int> ids;
  if (add_bos_eos) ids.push_back(kBos);
  for (const auto& w : tokenize(text)) ids.push_back(id(w));
  if (add_bos_eos) ids.push_back(kEos);
  if (max_len > 0 && ids.size() > max_len) {
    ids.resize(max_len);
    if (add_bos_eos) ids.back() = kEos;
  }
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) {
      token(i);  // range check
      continue;
    }
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

}  // namespace mtlgen
