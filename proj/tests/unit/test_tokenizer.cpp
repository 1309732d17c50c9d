#include <doctest.h>

#include <string>
#include <vector>

#include "mtlgen/vocab.hpp"
#include "tmpdir.hpp"

using namespace mtlgen;

TEST_CASE("tokenize lowercases and strips edge punctuation") {
  CHECK(tokenize("Black, V-Neck dress.") == std::vector<std::string>{"black", "v-neck", "dress"});
  CHECK(tokenize("  a\tb\n") == std::vector<std::string>{"a", "b"});
  CHECK(tokenize("name . desc") == std::vector<std::string>{"name", ".", "desc"});
  CHECK(tokenize("").empty());
}

TEST_CASE("vocabulary is frequency ordered") {
  const std::vector<std::string> corpus{"a b", "b"};
  const Vocab v = Vocab::build(corpus);
  REQUIRE(v.size() == Vocab::kReserved + 2);
  CHECK(v.token(4) == "b");
  CHECK(v.token(5) == "a");
  const Vocab v2 = Vocab::build(corpus, 2);
  CHECK(v2.size() == Vocab::kReserved + 1);
  CHECK(v2.token(4) == "b");
  CHECK(Vocab::build(corpus) == v);
}

TEST_CASE("ties break lexicographically") {
  const std::vector<std::string> corpus{"zeta alpha mid"};
  const Vocab v = Vocab::build(corpus);
  CHECK(v.token(4) == "alpha");
  CHECK(v.token(5) == "mid");
  CHECK(v.token(6) == "zeta");
}

TEST_CASE("encode, decode and unknown words") {
  const std::vector<std::string> corpus{"black dress with long sleeves"};
  const Vocab v = Vocab::build(corpus);
  const auto ids = v.encode("black dress", true);
  REQUIRE(ids.size() == 4);
  CHECK(ids.front() == Vocab::kBos);
  CHECK(ids.back() == Vocab::kEos);
  CHECK(v.decode(ids) == "black dress");
  CHECK(v.encode("purple dress", false).front() == Vocab::kUnk);
  CHECK(v.decode(std::vector<int>{Vocab::kUnk, v.id("dress")}) == "<unk> dress");
  CHECK(v.decode(std::vector<int>{0, 0, 0}).empty());

  const auto plain = v.encode("long sleeves with black dress", false);
  CHECK(v.encode(v.decode(plain), false) == plain);
}

TEST_CASE("prompts truncate to the token budget") {
  std::string words;
  for (int i = 0; i < 70; ++i) words += "w" + std::to_string(i) + " ";
  const std::vector<std::string> corpus{words};
  const Vocab v = Vocab::build(corpus);
  CHECK(v.encode(words, false, kMaxPromptTokens).size() == 64);
  const auto framed = v.encode(words, true, kMaxPromptTokens);
  CHECK(framed.size() == 64);
  CHECK(framed.front() == Vocab::kBos);
  CHECK(framed.back() == Vocab::kEos);
  CHECK(v.encode(words, false).size() == 70);
}

TEST_CASE("vocabulary file round trip") {
  const std::vector<std::string> corpus{"one two two three three three"};
  const Vocab v = Vocab::build(corpus);
  tmpdir::Dir d("vocab");
  v.save(d.path / "vocab.txt");
  CHECK(Vocab::load(d.path / "vocab.txt") == v);
}
