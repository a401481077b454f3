// SPDX-License-Identifier: Apache-2.0
//
// File formats shared by the command-line tools: experiment configs, protocol
// descriptions and JSON-lines SFT record files.
//
// An experiment config is one JSON object. Optional "model", "lora" and
// "decode" sections hold the fields of the matching structs, "instruction"
// replaces the instruction template and "descriptions" maps type names to
// descriptions. Every other top-level key is a TrainConfig field (a nested
// "train" object works too).

#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include <json.hpp>

#include "cllmfs/episodes.hpp"

namespace cllmfs {

nlohmann::json to_json(const DecodeConfig& cfg);
DecodeConfig decode_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunSettings& settings);
RunSettings run_settings_from_json(const nlohmann::json& j);
RunSettings load_run_settings(const std::filesystem::path& path);

// {"mode", "source", "target", "n_way", "k_shot", "max_query", "seeds",
//  "max_tokens"}. A corpus is a CoNLL path (relative to the protocol file) or
// {"synthetic": {"sentences", "seed", "max_entities", "single_type_rate"}}.
ProtocolSpec protocol_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ProtocolSpec load_protocol(const std::filesystem::path& path);

std::vector<NerExample> load_corpus_json(const nlohmann::json& source, const std::filesystem::path& base_dir,
                                         std::size_t max_tokens = 0);

nlohmann::json read_json_file(const std::filesystem::path& path);

void write_records_jsonl(std::ostream& out, const std::vector<SftRecord>& records);
std::vector<SftRecord> read_records_jsonl(std::istream& in, const std::string& source);
std::vector<SftRecord> read_records_jsonl(const std::filesystem::path& path);

// Words of every record field, specials first; deterministic in record order.
Vocab vocab_from_records(const std::vector<SftRecord>& records);

}  // namespace cllmfs
