// SPDX-License-Identifier: Apache-2.0
//
// Instruction / input / output records for supervised fine-tuning, the
// word-level vocabulary they are tokenized with, and the marker convention
// for entities in model output:
//
//   <im_start> I can extract entities for you, the extracted entities are <<< Andrew Little >>> <im_end>

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cllmfs {

inline constexpr std::string_view kImStart = "<im_start>";
inline constexpr std::string_view kImEnd = "<im_end>";
inline constexpr std::string_view kOpen = "<<<";
inline constexpr std::string_view kClose = ">>>";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kPad = "<pad>";

inline constexpr std::string_view kDefaultInstructionTemplate =
    "Please extract the {type} in the sentence given below, the entity of {type_lower} refers to {description} in "
    "the input sentence.";
inline constexpr std::string_view kOutputPrefix = "I can extract entities for you, the extracted entities are";

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - start; }
  bool operator==(const Span&) const = default;
  auto operator<=>(const Span&) const = default;
};

struct TypedSpan {
  std::string type;
  Span span;
};

struct NerExample {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;  // BIO
  std::string source_id;

  std::vector<TypedSpan> entities() const;
  std::vector<std::string> entity_types() const;  // distinct, sorted
};

// Rewrites ill-formed I-X tags (after O, after another type, or at the start)
// as B-X. Returns the number of repairs.
std::size_t repair_bio(std::vector<std::string>& tags);

// Splits a sentence into pieces of at most max_tokens without cutting an
// entity; an entity longer than max_tokens is kept whole.
std::vector<NerExample> split_example(const NerExample& example, std::size_t max_tokens);

struct EntityTypeDef {
  std::string name;
  std::string description;
};

EntityTypeDef default_type_def(const std::string& name);

struct SftRecord {
  std::string id;
  std::string instruction;
  std::string input;
  std::string output;
  EntityTypeDef entity_type;
  std::vector<Span> gold_spans;  // token offsets into input

  std::vector<std::string> gold_entities() const;  // surface strings, in order
};

nlohmann::json to_json(const SftRecord& record);
SftRecord record_from_json(const nlohmann::json& j);

std::string render_instruction(std::string_view tmpl, const EntityTypeDef& type);
std::string render_output(const std::vector<std::string>& entities);

struct BuildStats {
  std::size_t skipped_empty = 0;
};

// One record per type in `types`, in the given order. Sentences with no
// entity of a type still get a record (zero marker pairs) unless
// include_empty is false.
std::vector<SftRecord> build_records(const NerExample& example, const std::vector<EntityTypeDef>& types,
                                     std::string_view tmpl, bool include_empty = true, BuildStats* stats = nullptr);

// Substrings between balanced <<< / >>> pairs, trimmed, in order. Throws
// ErrorKind::parse on unbalanced markers (message carries the offset), and in
// strict mode when <im_end> is missing.
std::vector<std::string> parse_output(std::string_view text, bool strict = false);

std::string normalize_whitespace(std::string_view text);

class Vocab {
 public:
  static constexpr std::size_t kPadId = 0;
  static constexpr std::size_t kUnkId = 1;
  static constexpr std::size_t kImStartId = 2;
  static constexpr std::size_t kImEndId = 3;
  static constexpr std::size_t kOpenId = 4;
  static constexpr std::size_t kCloseId = 5;
  static constexpr std::size_t kNumSpecials = 6;

  Vocab();
  // Specials first, then words by descending count and ascending spelling.
  static Vocab from_counts(const std::unordered_map<std::string, std::size_t>& counts);
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(std::string_view word) const;  // kUnkId when absent
  bool contains(std::string_view word) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  static bool is_special(std::string_view word);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Whitespace split; with allow_specials, special markers are peeled off
// greedily even when glued to text. Without it a word spelled like a special
// maps to <unk>.
std::vector<std::string> split_words(std::string_view text, bool allow_specials);
std::vector<std::size_t> tokenize(std::string_view text, const Vocab& vocab, bool allow_specials = true);
std::string detokenize(std::span<const std::size_t> ids, const Vocab& vocab);

// Corpus words plus every word the templates can produce for `types`.
Vocab build_vocab(const std::vector<NerExample>& corpus, const std::vector<EntityTypeDef>& types,
                  std::string_view tmpl = kDefaultInstructionTemplate);

// Token layout of instruction ‖ input ‖ output.
struct RecordLayout {
  std::vector<std::size_t> tokens;
  Span instruction;
  Span input;
  Span output;

  std::span<const std::size_t> prompt() const { return std::span(tokens).first(output.start); }
  std::span<const std::size_t> input_tokens() const { return std::span(tokens).subspan(input.start, input.size()); }
};

RecordLayout layout_record(const SftRecord& record, const Vocab& vocab);

}  // namespace cllmfs
