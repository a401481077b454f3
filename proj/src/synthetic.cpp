// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/synthetic.hpp"

#include <algorithm>
#include <random>
#include <sstream>
#include <string>

#include "cllmfs/error.hpp"

namespace cllmfs {

namespace {

struct Lexicon {
  const char* type;
  const char* description;
  std::vector<std::vector<std::string>> entities;
};

std::vector<std::vector<std::string>> phrases(std::initializer_list<const char*> items) {
  std::vector<std::vector<std::string>> out;
  for (const char* item : items) {
    std::istringstream is(item);
    std::vector<std::string> words;
    for (std::string w; is >> w;) words.push_back(w);
    out.push_back(std::move(words));
  }
  return out;
}

const std::vector<Lexicon>& lexicons() {
  static const std::vector<Lexicon> kLexicons = {
      {"Person", "the entity that represents the identity or role of a specific person",
       phrases({"Andrew Little", "Maria", "Tomas Berg", "Alice", "Ravi Menon", "Keiko", "Jon Hale", "Sofia"})},
      {"Location", "the entity that represents a specific place such as a city or region",
       phrases({"Oslo", "Lima", "New Harbor", "Kyoto", "Red Valley", "Tunis", "Port Elm", "Quito"})},
      {"Organization", "the entity that represents a specific company, agency or institution",
       phrases({"Acme Corp", "Norbank", "Vela Labs", "Unicorp", "Delta Union", "Orbis", "Kestrel Group", "Finmark"})},
      {"Product", "the entity that represents a specific manufactured product or device",
       phrases({"Zephyr X2", "Lumo", "Nova Phone", "Quill", "Atlas Drive", "Pixelon", "Strata 9", "Bolt"})},
      {"Event", "the entity that represents a specific named event such as a festival or summit",
       phrases({"Spring Fair", "Expo", "Harvest Gala", "Summit", "Winter Cup", "Regatta", "Jazz Week", "Derby"})},
  };
  return kLexicons;
}

const std::vector<std::string>& fillers() {
  static const std::vector<std::string> kFillers = {
      "the",   "a",     "said",   "that",  "would", "be",    "cheaper", "pointed", "out",   "to",
      "in",    "on",    "with",   "after", "was",   "new",   "report",  "visited", "about", "from",
      "they",  "today", "early",  "plans", "met",   "near",  "and",     "for",     "it",    "soon",
      "later", "week",  "people", "again", "often", "seen",  "during",  "while",   "by",    "then"};
  return kFillers;
}

}  // namespace

std::vector<EntityTypeDef> synthetic_types() {
  std::vector<EntityTypeDef> out;
  for (const auto& lex : lexicons()) out.push_back({lex.type, lex.description});
  return out;
}

std::vector<NerExample> synthetic_corpus(std::size_t sentences, std::uint64_t seed, const SyntheticOptions& options) {
  if (options.min_filler > options.max_filler || options.max_entities == 0) {
    throw Error(ErrorKind::config, "synthetic corpus needs min_filler <= max_filler and max_entities >= 1");
  }
  std::mt19937_64 rng(seed);
  const auto& lex = lexicons();
  const auto& fill = fillers();
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::bernoulli_distribution single(options.single_type_rate);

  std::vector<NerExample> corpus;
  corpus.reserve(sentences);
  for (std::size_t s = 0; s < sentences; ++s) {
    const std::size_t n_entities = 1 + pick(options.max_entities);
    const std::size_t n_filler = options.min_filler + pick(options.max_filler - options.min_filler + 1);
    const bool one_type = single(rng);
    const std::size_t first_type = pick(lex.size());

    // Slots: entity i goes before filler word at position slot[i].
    std::vector<std::size_t> slots(n_entities);
    for (auto& slot : slots) slot = pick(n_filler + 1);
    std::sort(slots.begin(), slots.end());

    NerExample ex;
    ex.source_id = "syn-" + std::to_string(s);
    std::size_t next = 0;
    auto emit_entity = [&] {
      const auto& l = lex[one_type ? first_type : (next == 0 ? first_type : pick(lex.size()))];
      const auto& words = l.entities[pick(l.entities.size())];
      for (std::size_t w = 0; w < words.size(); ++w) {
        ex.tokens.push_back(words[w]);
        ex.tags.push_back((w == 0 ? "B-" : "I-") + std::string(l.type));
      }
      ++next;
    };
    for (std::size_t f = 0; f <= n_filler; ++f) {
      while (next < n_entities && slots[next] == f) {
        emit_entity();
        // Adjacent entities get a separator so spans stay distinct.
        if (next < n_entities && slots[next] == f) {
          ex.tokens.push_back("and");
          ex.tags.push_back("O");
        }
      }
      if (f < n_filler) {
        ex.tokens.push_back(fill[pick(fill.size())]);
        ex.tags.push_back("O");
      }
    }
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace cllmfs
