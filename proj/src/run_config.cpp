// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/run_config.hpp"

#include <fstream>
#include <set>
#include <unordered_map>

#include "cllmfs/checkpoint.hpp"
#include "cllmfs/error.hpp"
#include "cllmfs/synthetic.hpp"

namespace cllmfs {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::config, where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw Error(ErrorKind::config, "unknown key '" + key + "' in " + where);
  }
}

template <class F>
auto config_guard(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, where + ": " + e.what());
  }
}

}  // namespace

json to_json(const DecodeConfig& c) {
  return {{"temperature", c.temperature}, {"top_k", c.top_k},         {"top_p", c.top_p},
          {"max_new_tokens", c.max_new_tokens}, {"constrained", c.constrained}, {"seed", c.seed}};
}

DecodeConfig decode_config_from_json(const json& j) {
  reject_unknown(j, {"temperature", "top_k", "top_p", "max_new_tokens", "constrained", "seed"}, "decode config");
  return config_guard("decode config", [&] {
    DecodeConfig c;
    c.temperature = j.value("temperature", c.temperature);
    c.top_k = j.value("top_k", c.top_k);
    c.top_p = j.value("top_p", c.top_p);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.constrained = j.value("constrained", c.constrained);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  });
}

json to_json(const RunSettings& s) {
  json model = to_json(s.model);
  model.erase("vocab_size");
  json j = {{"model", model}, {"lora", to_json(s.lora)}, {"train", to_json(s.train)}, {"decode", to_json(s.decode)}};
  if (!s.descriptions.empty()) j["descriptions"] = s.descriptions;
  if (s.instruction != kDefaultInstructionTemplate) j["instruction"] = s.instruction;
  return j;
}

RunSettings run_settings_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::config, "config must be a JSON object");
  RunSettings s;
  json train = json::object();
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      reject_unknown(value, {"n_layers", "d_model", "n_heads", "n_kv_groups", "d_ff", "max_seq", "rope_base",
                             "norm_eps", "init_std", "seed"},
                     "model config");
      s.model = model_config_from_json(value);
    } else if (key == "lora") {
      reject_unknown(value, {"rank", "scale", "init_std", "targets"}, "lora config");
      s.lora = lora_spec_from_json(value);
    } else if (key == "decode") {
      s.decode = decode_config_from_json(value);
    } else if (key == "descriptions") {
      s.descriptions = config_guard("descriptions", [&] { return value.get<std::map<std::string, std::string>>(); });
    } else if (key == "instruction") {
      s.instruction = config_guard("instruction", [&] { return value.get<std::string>(); });
      if (s.instruction.find("{type}") == std::string::npos) {
        throw Error(ErrorKind::config, "instruction template must mention {type}");
      }
    } else if (key == "train") {
      if (!value.is_object()) throw Error(ErrorKind::config, "train config must be a JSON object");
      for (const auto& [k, v] : value.items()) train[k] = v;
    } else {
      train[key] = value;
    }
  }
  s.train = train_config_from_json(train);
  return s;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

RunSettings load_run_settings(const std::filesystem::path& path) { return run_settings_from_json(read_json_file(path)); }

std::vector<NerExample> load_corpus_json(const json& source, const std::filesystem::path& base_dir,
                                         std::size_t max_tokens) {
  if (source.is_string()) {
    std::filesystem::path p = source.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return ingest_conll(p, max_tokens).examples;
  }
  if (source.is_object() && source.contains("synthetic")) {
    const json& syn = source.at("synthetic");
    reject_unknown(syn, {"sentences", "seed", "min_filler", "max_filler", "max_entities", "single_type_rate"},
                   "synthetic corpus");
    return config_guard("synthetic corpus", [&] {
      SyntheticOptions o;
      o.min_filler = syn.value("min_filler", o.min_filler);
      o.max_filler = syn.value("max_filler", o.max_filler);
      o.max_entities = syn.value("max_entities", o.max_entities);
      o.single_type_rate = syn.value("single_type_rate", o.single_type_rate);
      return synthetic_corpus(syn.value("sentences", std::size_t{200}), syn.value("seed", std::uint64_t{0}), o);
    });
  }
  throw Error(ErrorKind::config, "corpus must be a CoNLL path or {\"synthetic\": {...}}");
}

ProtocolSpec protocol_from_json(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"mode", "source", "target", "n_way", "k_shot", "max_query", "seeds", "max_tokens"},
                 "protocol");
  ProtocolSpec p;
  const std::size_t max_tokens = config_guard("protocol", [&] { return j.value("max_tokens", std::size_t{0}); });
  if (j.contains("mode")) {
    p.mode = parse_protocol_mode(config_guard("protocol", [&] { return j.at("mode").get<std::string>(); }));
  }
  if (!j.contains("source")) throw Error(ErrorKind::config, "protocol needs a source corpus");
  p.source = load_corpus_json(j.at("source"), base_dir, max_tokens);
  if (j.contains("target")) p.target = load_corpus_json(j.at("target"), base_dir, max_tokens);
  config_guard("protocol", [&] {
    p.n_way = j.value("n_way", p.n_way);
    p.k_shot = j.value("k_shot", p.k_shot);
    p.max_query = j.value("max_query", p.max_query);
    if (j.contains("seeds")) {
      const auto& seeds = j.at("seeds");
      if (seeds.is_number_integer()) {
        if (seeds.get<std::int64_t>() < 0) throw Error(ErrorKind::config, "protocol seeds must be non-negative");
        p.seeds.clear();
        for (std::uint64_t s = 0; s < seeds.get<std::uint64_t>(); ++s) p.seeds.push_back(s);
      } else {
        p.seeds = seeds.get<std::vector<std::uint64_t>>();
      }
    }
    return 0;
  });
  return p;
}

ProtocolSpec load_protocol(const std::filesystem::path& path) {
  return protocol_from_json(read_json_file(path), path.parent_path());
}

void write_records_jsonl(std::ostream& out, const std::vector<SftRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<SftRecord> read_records_jsonl(std::istream& in, const std::string& source) {
  std::vector<SftRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, source + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      out.push_back(record_from_json(j));
    } catch (const Error& e) {
      throw Error(e.kind(), source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw Error(ErrorKind::data, source + ": no records");
  return out;
}

std::vector<SftRecord> read_records_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  return read_records_jsonl(in, path.string());
}

Vocab vocab_from_records(const std::vector<SftRecord>& records) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& r : records)
    for (const auto* field : {&r.instruction, &r.input, &r.output})
      for (auto& w : split_words(*field, true)) ++counts[w];
  return Vocab::from_counts(counts);
}

}  // namespace cllmfs
