// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/sft.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <set>

#include "cllmfs/error.hpp"

namespace cllmfs {

namespace {

bool is_inside(const std::string& tag) { return tag.size() > 2 && tag.compare(0, 2, "I-") == 0; }
bool is_begin(const std::string& tag) { return tag.size() > 2 && tag.compare(0, 2, "B-") == 0; }
std::string tag_type(const std::string& tag) { return tag.size() > 2 ? tag.substr(2) : std::string(); }

std::string join(const std::vector<std::string>& words, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out += ' ';
    out += words[i];
  }
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

// Longest first so <im_start> wins over shorter overlaps.
constexpr std::array<std::string_view, 6> kSpecialSpellings = {kImStart, kImEnd, kUnk, kPad, kOpen, kClose};

}  // namespace

std::vector<TypedSpan> NerExample::entities() const {
  std::vector<TypedSpan> out;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto& tag = tags[i];
    const bool continues = is_inside(tag) && !out.empty() && out.back().span.end == i && out.back().type == tag_type(tag);
    if (continues) {
      out.back().span.end = i + 1;
    } else if (is_begin(tag) || is_inside(tag)) {
      out.push_back({tag_type(tag), {i, i + 1}});
    }
  }
  return out;
}

std::vector<std::string> NerExample::entity_types() const {
  std::set<std::string> types;
  for (const auto& e : entities()) types.insert(e.type);
  return {types.begin(), types.end()};
}

std::size_t repair_bio(std::vector<std::string>& tags) {
  std::size_t repairs = 0;
  std::string prev = "O";
  for (auto& tag : tags) {
    if (is_inside(tag)) {
      const bool ok = (is_begin(prev) || is_inside(prev)) && tag_type(prev) == tag_type(tag);
      if (!ok) {
        tag = "B-" + tag_type(tag);
        ++repairs;
      }
    }
    prev = tag;
  }
  return repairs;
}

std::vector<NerExample> split_example(const NerExample& example, std::size_t max_tokens) {
  const std::size_t n = example.tokens.size();
  if (max_tokens == 0 || n <= max_tokens) return {example};
  std::vector<NerExample> pieces;
  std::size_t start = 0;
  while (start < n) {
    std::size_t end = std::min(start + max_tokens, n);
    if (end < n && is_inside(example.tags[end])) {
      std::size_t entity_start = end;
      while (entity_start > start && is_inside(example.tags[entity_start])) --entity_start;
      if (entity_start > start) {
        end = entity_start;
      } else {
        while (end < n && is_inside(example.tags[end])) ++end;
      }
    }
    NerExample piece;
    piece.tokens.assign(example.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                        example.tokens.begin() + static_cast<std::ptrdiff_t>(end));
    piece.tags.assign(example.tags.begin() + static_cast<std::ptrdiff_t>(start),
                      example.tags.begin() + static_cast<std::ptrdiff_t>(end));
    piece.source_id = example.source_id + "#" + std::to_string(pieces.size());
    pieces.push_back(std::move(piece));
    start = end;
  }
  return pieces;
}

EntityTypeDef default_type_def(const std::string& name) {
  return {name, "the entity that represents a specific " + lower(name)};
}

std::vector<std::string> SftRecord::gold_entities() const {
  const auto words = split_words(input, false);
  std::vector<std::string> out;
  for (const auto& s : gold_spans) {
    if (s.end > words.size() || s.start >= s.end) {
      throw Error(ErrorKind::data, "record " + id + ": gold span outside input");
    }
    out.push_back(join(words, s.start, s.end));
  }
  return out;
}

nlohmann::json to_json(const SftRecord& record) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : record.gold_spans) spans.push_back({s.start, s.end});
  return {{"id", record.id},
          {"instruction", record.instruction},
          {"input", record.input},
          {"output", record.output},
          {"entity_type", {{"name", record.entity_type.name}, {"description", record.entity_type.description}}},
          {"gold_spans", spans}};
}

SftRecord record_from_json(const nlohmann::json& j) {
  try {
    SftRecord r;
    r.id = j.value("id", std::string());
    r.instruction = j.at("instruction").get<std::string>();
    r.input = j.at("input").get<std::string>();
    r.output = j.at("output").get<std::string>();
    const auto& type = j.at("entity_type");
    if (type.is_string()) {
      r.entity_type = default_type_def(type.get<std::string>());
    } else {
      r.entity_type = {type.at("name").get<std::string>(), type.value("description", std::string())};
    }
    for (const auto& s : j.at("gold_spans")) r.gold_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed SFT record: ") + e.what());
  }
}

std::string render_instruction(std::string_view tmpl, const EntityTypeDef& type) {
  std::string s(tmpl);
  s = replace_all(std::move(s), "{type_lower}", lower(type.name));
  s = replace_all(std::move(s), "{type}", type.name);
  s = replace_all(std::move(s), "{description}", type.description);
  return s;
}

std::string render_output(const std::vector<std::string>& entities) {
  std::string out(kImStart);
  out += ' ';
  out += kOutputPrefix;
  for (const auto& e : entities) {
    out += ' ';
    out += kOpen;
    out += ' ';
    out += e;
    out += ' ';
    out += kClose;
  }
  out += ' ';
  out += kImEnd;
  return out;
}

std::vector<SftRecord> build_records(const NerExample& example, const std::vector<EntityTypeDef>& types,
                                     std::string_view tmpl, bool include_empty, BuildStats* stats) {
  if (tmpl.find("{type}") == std::string_view::npos) {
    throw Error(ErrorKind::config, "instruction template has no {type} placeholder");
  }
  if (example.tokens.empty()) {
    if (stats) ++stats->skipped_empty;
    return {};
  }
  const auto entities = example.entities();
  const std::string input = join(example.tokens, 0, example.tokens.size());
  std::vector<SftRecord> out;
  for (const auto& type : types) {
    SftRecord r;
    std::vector<std::string> surface;
    for (const auto& e : entities) {
      if (e.type != type.name) continue;
      r.gold_spans.push_back(e.span);
      surface.push_back(join(example.tokens, e.span.start, e.span.end));
    }
    if (surface.empty() && !include_empty) continue;
    r.id = example.source_id + "/" + type.name;
    r.instruction = render_instruction(tmpl, type);
    r.input = input;
    r.output = render_output(surface);
    r.entity_type = type;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> parse_output(std::string_view text, bool strict) {
  if (strict && text.find(kImEnd) == std::string_view::npos) {
    throw Error(ErrorKind::parse, "output has no " + std::string(kImEnd));
  }
  std::vector<std::string> out;
  std::size_t pos = 0;
  std::optional<std::size_t> open_at;
  while (pos < text.size()) {
    const auto o = text.find(kOpen, pos);
    const auto c = text.find(kClose, pos);
    if (o == std::string_view::npos && c == std::string_view::npos) break;
    if (o < c) {
      if (open_at) throw Error(ErrorKind::parse, "nested <<< at offset " + std::to_string(o));
      open_at = o;
      pos = o + kOpen.size();
    } else {
      if (!open_at) throw Error(ErrorKind::parse, "unmatched >>> at offset " + std::to_string(c));
      const std::size_t begin = *open_at + kOpen.size();
      out.push_back(normalize_whitespace(text.substr(begin, c - begin)));
      open_at.reset();
      pos = c + kClose.size();
    }
  }
  if (open_at) throw Error(ErrorKind::parse, "unclosed <<< at offset " + std::to_string(*open_at));
  return out;
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out += ' ';
      pending_space = false;
      out += ch;
    }
  }
  return out;
}

Vocab::Vocab() {
  for (auto s : {kPad, kUnk, kImStart, kImEnd, kOpen, kClose}) {
    index_.emplace(std::string(s), tokens_.size());
    tokens_.emplace_back(s);
  }
}

Vocab Vocab::from_counts(const std::unordered_map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> items;
  for (const auto& [w, c] : counts) {
    if (!is_special(w) && !w.empty()) items.emplace_back(w, c);
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (auto& [w, c] : items) {
    v.index_.emplace(w, v.tokens_.size());
    v.tokens_.push_back(w);
  }
  return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  if (tokens.size() < kNumSpecials || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
    throw Error(ErrorKind::data, "vocabulary does not start with the special tokens");
  }
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], i).second) {
      throw Error(ErrorKind::data, "duplicate vocabulary entry '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

std::size_t Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

bool Vocab::is_special(std::string_view word) {
  return std::find(kSpecialSpellings.begin(), kSpecialSpellings.end(), word) != kSpecialSpellings.end();
}

std::vector<std::string> split_words(std::string_view text, bool allow_specials) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view chunk = text.substr(i, j - i);
    if (!allow_specials) {
      out.emplace_back(chunk);
    } else {
      std::string pending;
      std::size_t p = 0;
      while (p < chunk.size()) {
        auto hit = std::find_if(kSpecialSpellings.begin(), kSpecialSpellings.end(),
                                [&](std::string_view s) { return chunk.substr(p, s.size()) == s; });
        if (hit != kSpecialSpellings.end()) {
          if (!pending.empty()) out.push_back(std::move(pending));
          pending.clear();
          out.emplace_back(*hit);
          p += hit->size();
        } else {
          pending += chunk[p++];
        }
      }
      if (!pending.empty()) out.push_back(std::move(pending));
    }
    i = j;
  }
  return out;
}

std::vector<std::size_t> tokenize(std::string_view text, const Vocab& vocab, bool allow_specials) {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(text, allow_specials)) {
    ids.push_back(!allow_specials && Vocab::is_special(w) ? Vocab::kUnkId : vocab.id(w));
  }
  return ids;
}

std::string detokenize(std::span<const std::size_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

Vocab build_vocab(const std::vector<NerExample>& corpus, const std::vector<EntityTypeDef>& types,
                  std::string_view tmpl) {
  if (corpus.empty()) throw Error(ErrorKind::data, "cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& ex : corpus)
    for (const auto& tok : ex.tokens)
      for (const auto& w : split_words(tok, false)) ++counts[w];
  for (const auto& type : types) {
    for (const auto& w : split_words(render_instruction(tmpl, type), false)) ++counts[w];
  }
  for (const auto& w : split_words(render_output({}), true)) ++counts[w];
  return Vocab::from_counts(counts);
}

RecordLayout layout_record(const SftRecord& record, const Vocab& vocab) {
  RecordLayout layout;
  auto append = [&](std::string_view text, bool specials) {
    const std::size_t begin = layout.tokens.size();
    auto ids = tokenize(text, vocab, specials);
    layout.tokens.insert(layout.tokens.end(), ids.begin(), ids.end());
    return Span{begin, layout.tokens.size()};
  };
  layout.instruction = append(record.instruction, false);
  layout.input = append(record.input, false);
  layout.output = append(record.output, true);
  for (const auto& s : record.gold_spans) {
    if (s.start >= s.end || s.end > layout.input.size()) {
      throw Error(ErrorKind::data, "record " + record.id + ": gold span [" + std::to_string(s.start) + ", " +
                                       std::to_string(s.end) + ") outside input of " +
                                       std::to_string(layout.input.size()) + " tokens");
    }
  }
  return layout;
}

}  // namespace cllmfs
