// SPDX-License-Identifier: Apache-2.0
//
// CoNLL ingestion, N-way K-shot episode sampling, micro-F1 scoring of
// extracted entity strings, and the INTRA / INTER evaluation protocols.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cllmfs/decoder.hpp"
#include "cllmfs/sft.hpp"
#include "cllmfs/trainer.hpp"

namespace cllmfs {

struct IngestStats {
  std::size_t sentences = 0;
  std::size_t malformed_lines = 0;
  std::size_t repaired_tags = 0;
  std::size_t split_sentences = 0;
};

struct Corpus {
  std::vector<NerExample> examples;
  std::vector<std::string> tagset;  // sorted type names
  IngestStats stats;
};

// `token<TAB or space>tag` per line, blank line between sentences. Lines
// starting with -DOCSTART- are ignored. max_tokens > 0 splits long sentences.
Corpus parse_conll(std::istream& in, const std::string& source, std::size_t max_tokens = 0);
Corpus ingest_conll(const std::filesystem::path& path, std::size_t max_tokens = 0);
void write_conll(std::ostream& out, const std::vector<NerExample>& examples);
Corpus make_corpus(std::vector<NerExample> examples);

struct Episode {
  std::vector<EntityTypeDef> tagset;
  std::vector<NerExample> support;
  std::vector<NerExample> query;
  std::uint64_t seed = 0;
};

// Entity instances per type over `examples`.
std::map<std::string, std::size_t> type_counts(const std::vector<NerExample>& examples);

// Uniformly picks N types, then greedily adds sentences (containing only
// tagset types) until each type has K instances, then drops sentences that
// are no longer needed. Remaining eligible sentences form the query pool,
// capped at max_query when nonzero.
Episode sample_episode(const std::vector<NerExample>& corpus, std::size_t n_way, std::size_t k_shot,
                       std::uint64_t seed, std::size_t max_query = 0,
                       const std::vector<std::string>& type_pool = {});

struct TypeCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::map<std::string, TypeCounts> per_type;
  std::size_t n_queries = 0;

  nlohmann::json to_json() const;
};

// Entities extracted for one (sentence, type) cell.
struct Extraction {
  std::string sentence_id;
  std::string type;
  std::vector<std::string> entities;
};

// Multiset matching of whitespace-normalized strings per (sentence, type).
// Throws ErrorKind::contract when the sentence ids of the two sides differ.
EvalReport micro_f1(const std::vector<Extraction>& predictions, const std::vector<Extraction>& gold);

std::vector<Extraction> gold_extractions(const std::vector<NerExample>& sentences,
                                         const std::vector<EntityTypeDef>& types);

struct GenerationRecord {
  std::string record_id;
  std::string sentence_id;
  std::string type;
  std::string generated_text;
  std::vector<std::string> entities;
  std::size_t steps = 0;
  std::size_t forced_closures = 0;

  nlohmann::json to_json() const;
};

// Decodes every record with `jobs` worker threads; record i uses seed
// cfg.seed + i so results do not depend on scheduling.
std::vector<GenerationRecord> generate_records(const AdaptedModel& model, const Vocab& vocab,
                                               const std::vector<SftRecord>& records, const DecodeConfig& cfg,
                                               std::size_t jobs = 1);

std::vector<Extraction> to_extractions(const std::vector<GenerationRecord>& generations);

// Generate, parse, score on `sentences` for `types`.
EvalReport evaluate(const AdaptedModel& model, const Vocab& vocab, const std::vector<NerExample>& sentences,
                    const std::vector<EntityTypeDef>& types, const DecodeConfig& cfg, std::size_t jobs = 1,
                    std::string_view tmpl = kDefaultInstructionTemplate);

enum class ProtocolMode { intra, inter };
const char* to_string(ProtocolMode mode);
ProtocolMode parse_protocol_mode(std::string_view text);

struct ProtocolSpec {
  ProtocolMode mode = ProtocolMode::intra;
  std::vector<NerExample> source;
  std::vector<NerExample> target;  // INTER only
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t max_query = 50;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

struct RunSettings {
  ModelConfig model;  // vocab_size is filled in from the corpus
  LoraSpec lora;
  TrainConfig train;
  DecodeConfig decode;
  std::size_t jobs = 1;
  std::map<std::string, std::string> descriptions;  // type name -> description override
  std::string instruction{kDefaultInstructionTemplate};
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::vector<std::string> tagset;
  std::size_t support_sentences = 0;
  std::size_t train_records = 0;
  double final_loss = 0.0;
  EvalReport report;
};

struct ProtocolResult {
  std::vector<SeedReport> runs;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;

  nlohmann::json to_json() const;
  std::string summary_table() const;
  std::string csv() const;
};

// INTER checks the two tagsets are disjoint before anything else runs.
void check_disjoint_tagsets(const std::vector<NerExample>& source, const std::vector<NerExample>& target);

ProtocolResult run_protocol(const ProtocolSpec& spec, const RunSettings& settings);

}  // namespace cllmfs
