// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <mutex>
#include <thread>

#include "cllmfs/error.hpp"

namespace cllmfs {

using nlohmann::json;

namespace {

bool valid_tag(const std::string& tag) {
  return tag == "O" || ((tag.starts_with("B-") || tag.starts_with("I-")) && tag.size() > 2);
}

}  // namespace

Corpus make_corpus(std::vector<NerExample> examples) {
  Corpus c;
  std::set<std::string> types;
  for (const auto& ex : examples)
    for (const auto& t : ex.entity_types()) types.insert(t);
  c.tagset.assign(types.begin(), types.end());
  c.stats.sentences = examples.size();
  c.examples = std::move(examples);
  return c;
}

Corpus parse_conll(std::istream& in, const std::string& source, std::size_t max_tokens) {
  std::vector<NerExample> raw;
  IngestStats stats;
  NerExample cur;
  auto flush = [&] {
    if (!cur.tokens.empty()) {
      cur.source_id = source + ":" + std::to_string(raw.size());
      raw.push_back(std::move(cur));
    }
    cur = NerExample{};
  };
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (line.starts_with("-DOCSTART-")) continue;
    const auto sep = line.find_first_of("\t ");
    if (sep == std::string::npos || sep == 0) {
      ++stats.malformed_lines;
      continue;
    }
    std::string token = line.substr(0, sep);
    std::string tag = line.substr(line.find_last_of("\t ") + 1);
    if (line.find_first_not_of("\t ", sep) != line.find_last_of("\t ") + 1 || !valid_tag(tag)) {
      ++stats.malformed_lines;
      continue;
    }
    cur.tokens.push_back(std::move(token));
    cur.tags.push_back(std::move(tag));
  }
  flush();
  if (raw.empty()) throw Error(ErrorKind::data, source + ": no sentences");

  std::vector<NerExample> examples;
  for (auto& ex : raw) {
    stats.repaired_tags += repair_bio(ex.tags);
    auto pieces = split_example(ex, max_tokens);
    if (pieces.size() > 1) stats.split_sentences += 1;
    for (auto& p : pieces) examples.push_back(std::move(p));
  }
  Corpus c = make_corpus(std::move(examples));
  stats.sentences = c.examples.size();
  c.stats = stats;
  return c;
}

Corpus ingest_conll(const std::filesystem::path& path, std::size_t max_tokens) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  return parse_conll(in, path.filename().string(), max_tokens);
}

void write_conll(std::ostream& out, const std::vector<NerExample>& examples) {
  for (const auto& ex : examples) {
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << ex.tokens[i] << '\t' << ex.tags[i] << '\n';
    out << '\n';
  }
}

std::map<std::string, std::size_t> type_counts(const std::vector<NerExample>& examples) {
  std::map<std::string, std::size_t> counts;
  for (const auto& ex : examples)
    for (const auto& e : ex.entities()) ++counts[e.type];
  return counts;
}

Episode sample_episode(const std::vector<NerExample>& corpus, std::size_t n_way, std::size_t k_shot,
                       std::uint64_t seed, std::size_t max_query, const std::vector<std::string>& type_pool) {
  if (n_way == 0 || k_shot == 0) throw Error(ErrorKind::config, "N and K must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<std::string> types = type_pool;
  if (types.empty()) {
    for (const auto& [t, _] : type_counts(corpus)) types.push_back(t);
  }
  if (types.size() < n_way) {
    throw Error(ErrorKind::sampling, "corpus has " + std::to_string(types.size()) + " entity types, need " +
                                         std::to_string(n_way));
  }
  std::shuffle(types.begin(), types.end(), rng);
  types.resize(n_way);
  std::sort(types.begin(), types.end());
  const std::set<std::string> tagset(types.begin(), types.end());

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto present = corpus[i].entity_types();
    if (present.empty()) continue;
    if (std::all_of(present.begin(), present.end(), [&](const auto& t) { return tagset.count(t) > 0; })) {
      eligible.push_back(i);
    }
  }
  std::map<std::string, std::size_t> available;
  for (std::size_t i : eligible)
    for (const auto& e : corpus[i].entities()) ++available[e.type];
  for (const auto& t : types) {
    if (available[t] < k_shot) {
      throw Error(ErrorKind::sampling, "type '" + t + "' has " + std::to_string(available[t]) +
                                           " usable instances, need " + std::to_string(k_shot));
    }
  }

  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::map<std::string, std::size_t> have;
  std::vector<std::size_t> chosen;
  auto done = [&] {
    return std::all_of(types.begin(), types.end(), [&](const auto& t) { return have[t] >= k_shot; });
  };
  for (std::size_t i : eligible) {
    if (done()) break;
    const auto ents = corpus[i].entities();
    const bool helps = std::any_of(ents.begin(), ents.end(), [&](const auto& e) { return have[e.type] < k_shot; });
    if (!helps) continue;
    chosen.push_back(i);
    for (const auto& e : ents) ++have[e.type];
  }
  // Drop sentences whose removal keeps every type at K.
  for (std::size_t j = 0; j < chosen.size();) {
    auto ents = corpus[chosen[j]].entities();
    bool removable = true;
    std::map<std::string, std::size_t> sub;
    for (const auto& e : ents) ++sub[e.type];
    for (const auto& [t, c] : sub) removable = removable && have[t] - c >= k_shot;
    if (removable) {
      for (const auto& [t, c] : sub) have[t] -= c;
      chosen.erase(chosen.begin() + static_cast<std::ptrdiff_t>(j));
    } else {
      ++j;
    }
  }

  Episode ep;
  ep.seed = seed;
  for (const auto& t : types) ep.tagset.push_back(default_type_def(t));
  const std::set<std::size_t> in_support(chosen.begin(), chosen.end());
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) ep.support.push_back(corpus[i]);
  for (std::size_t i : eligible) {
    if (in_support.count(i)) continue;
    if (max_query && ep.query.size() >= max_query) break;
    ep.query.push_back(corpus[i]);
  }
  return ep;
}

json EvalReport::to_json() const {
  json types = json::object();
  for (const auto& [t, c] : per_type) types[t] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
  return {{"micro_precision", precision},
          {"micro_recall", recall},
          {"micro_f1", f1},
          {"per_type", types},
          {"n_queries", n_queries}};
}

EvalReport micro_f1(const std::vector<Extraction>& predictions, const std::vector<Extraction>& gold) {
  using Key = std::pair<std::string, std::string>;
  std::map<Key, std::vector<std::string>> pred_cells, gold_cells;
  std::set<std::string> pred_ids, gold_ids;
  for (const auto& p : predictions) {
    auto& cell = pred_cells[{p.sentence_id, p.type}];
    for (const auto& e : p.entities) cell.push_back(normalize_whitespace(e));
    pred_ids.insert(p.sentence_id);
  }
  for (const auto& g : gold) {
    auto& cell = gold_cells[{g.sentence_id, g.type}];
    for (const auto& e : g.entities) cell.push_back(normalize_whitespace(e));
    gold_ids.insert(g.sentence_id);
  }
  if (pred_ids != gold_ids) throw Error(ErrorKind::contract, "prediction and gold sentence ids differ");

  EvalReport r;
  r.n_queries = gold_ids.size();
  std::set<Key> keys;
  for (const auto& [k, _] : pred_cells) keys.insert(k);
  for (const auto& [k, _] : gold_cells) keys.insert(k);
  for (const auto& key : keys) {
    auto& counts = r.per_type[key.second];
    std::multiset<std::string> remaining;
    if (auto it = gold_cells.find(key); it != gold_cells.end()) remaining.insert(it->second.begin(), it->second.end());
    if (auto it = pred_cells.find(key); it != pred_cells.end()) {
      for (const auto& p : it->second) {
        auto hit = remaining.find(p);
        if (hit != remaining.end()) {
          ++counts.tp;
          remaining.erase(hit);
        } else {
          ++counts.fp;
        }
      }
    }
    counts.fn += remaining.size();
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [_, c] : r.per_type) {
    tp += c.tp;
    fp += c.fp;
    fn += c.fn;
  }
  r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

std::vector<Extraction> gold_extractions(const std::vector<NerExample>& sentences,
                                         const std::vector<EntityTypeDef>& types) {
  std::vector<Extraction> out;
  for (const auto& ex : sentences) {
    const auto ents = ex.entities();
    for (const auto& t : types) {
      Extraction x{ex.source_id, t.name, {}};
      for (const auto& e : ents) {
        if (e.type != t.name) continue;
        std::string s;
        for (std::size_t i = e.span.start; i < e.span.end; ++i) s += (i > e.span.start ? " " : "") + ex.tokens[i];
        x.entities.push_back(std::move(s));
      }
      out.push_back(std::move(x));
    }
  }
  return out;
}

json GenerationRecord::to_json() const {
  return {{"record_id", record_id},
          {"sentence_id", sentence_id},
          {"type", type},
          {"generated_text", generated_text},
          {"entities", entities},
          {"steps", steps},
          {"forced_closures", forced_closures}};
}

std::vector<GenerationRecord> generate_records(const AdaptedModel& model, const Vocab& vocab,
                                               const std::vector<SftRecord>& records, const DecodeConfig& cfg,
                                               std::size_t jobs) {
  cfg.validate();
  std::vector<GenerationRecord> out(records.size());
  auto work = [&](std::size_t i) {
    const auto& r = records[i];
    const auto layout = layout_record(r, vocab);
    DecodeConfig c = cfg;
    c.seed = cfg.seed + i;
    const auto g = generate(model, layout.prompt(), layout.input_tokens(), c);
    GenerationRecord& gr = out[i];
    gr.record_id = r.id;
    const auto slash = r.id.rfind('/');
    gr.sentence_id = slash == std::string::npos ? r.id : r.id.substr(0, slash);
    gr.type = r.entity_type.name;
    std::vector<std::size_t> shown = g.tokens;
    if (g.stopped) shown.push_back(cfg.stop_token);
    gr.generated_text = detokenize(shown, vocab);
    try {
      gr.entities = parse_output(gr.generated_text);
    } catch (const Error&) {
      gr.entities.clear();
    }
    gr.steps = g.steps;
    gr.forced_closures = g.forced_closures;
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, records.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) work(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < records.size(); i += jobs) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<Extraction> to_extractions(const std::vector<GenerationRecord>& generations) {
  std::vector<Extraction> out;
  for (const auto& g : generations) out.push_back({g.sentence_id, g.type, g.entities});
  return out;
}

EvalReport evaluate(const AdaptedModel& model, const Vocab& vocab, const std::vector<NerExample>& sentences,
                    const std::vector<EntityTypeDef>& types, const DecodeConfig& cfg, std::size_t jobs,
                    std::string_view tmpl) {
  std::vector<SftRecord> records;
  for (const auto& ex : sentences) {
    auto rs = build_records(ex, types, tmpl);
    records.insert(records.end(), rs.begin(), rs.end());
  }
  const auto gens = generate_records(model, vocab, records, cfg, jobs);
  return micro_f1(to_extractions(gens), gold_extractions(sentences, types));
}

const char* to_string(ProtocolMode mode) { return mode == ProtocolMode::intra ? "INTRA" : "INTER"; }

ProtocolMode parse_protocol_mode(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "INTRA") return ProtocolMode::intra;
  if (s == "INTER") return ProtocolMode::inter;
  throw Error(ErrorKind::config, "unknown protocol '" + std::string(text) + "'");
}

void check_disjoint_tagsets(const std::vector<NerExample>& source, const std::vector<NerExample>& target) {
  const auto a = type_counts(source);
  const auto b = type_counts(target);
  std::vector<std::string> shared;
  for (const auto& [t, _] : a)
    if (b.count(t)) shared.push_back(t);
  if (!shared.empty()) {
    std::string list;
    for (const auto& t : shared) list += (list.empty() ? "" : ", ") + t;
    throw Error(ErrorKind::config, "INTER protocol needs disjoint tagsets; shared types: " + list);
  }
}

json ProtocolResult::to_json() const {
  json runs_json = json::array();
  for (const auto& r : runs) {
    runs_json.push_back({{"seed", r.seed},
                         {"tagset", r.tagset},
                         {"support_sentences", r.support_sentences},
                         {"train_records", r.train_records},
                         {"final_loss", r.final_loss},
                         {"report", r.report.to_json()}});
  }
  return {{"runs", runs_json}, {"summary", {{"mean_f1", mean_f1}, {"std_f1", std_f1}, {"n", runs.size()}}}};
}

std::string ProtocolResult::summary_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(8) << "seed" << std::setw(10) << "f1" << std::setw(12) << "precision"
     << std::setw(10) << "recall" << "queries\n";
  for (const auto& r : runs) {
    os << std::setw(8) << r.seed << std::setw(10) << r.report.f1 << std::setw(12) << r.report.precision
       << std::setw(10) << r.report.recall << r.report.n_queries << '\n';
  }
  os << "mean F1 " << mean_f1 << " ± " << std_f1 << " over " << runs.size() << " runs\n";
  return os.str();
}

std::string ProtocolResult::csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "seed,f1,precision,recall\n";
  for (const auto& r : runs) os << r.seed << ',' << r.report.f1 << ',' << r.report.precision << ',' << r.report.recall << '\n';
  return os.str();
}

namespace {

EntityTypeDef describe(const std::string& name, const RunSettings& settings) {
  auto it = settings.descriptions.find(name);
  return it == settings.descriptions.end() ? default_type_def(name) : EntityTypeDef{name, it->second};
}

std::vector<SftRecord> records_for(const Episode& ep, const std::vector<EntityTypeDef>& types,
                                   std::string_view tmpl) {
  std::vector<SftRecord> out;
  for (const auto& ex : ep.support) {
    auto rs = build_records(ex, types, tmpl);
    out.insert(out.end(), rs.begin(), rs.end());
  }
  return out;
}

}  // namespace

ProtocolResult run_protocol(const ProtocolSpec& spec, const RunSettings& settings) {
  if (spec.mode == ProtocolMode::inter) {
    if (spec.target.empty()) throw Error(ErrorKind::config, "INTER protocol needs a target corpus");
    check_disjoint_tagsets(spec.source, spec.target);
  }
  if (spec.seeds.empty()) throw Error(ErrorKind::config, "protocol needs at least one seed");

  std::vector<NerExample> all = spec.source;
  all.insert(all.end(), spec.target.begin(), spec.target.end());
  std::vector<EntityTypeDef> all_types;
  for (const auto& [t, _] : type_counts(all)) all_types.push_back(describe(t, settings));
  const Vocab vocab = build_vocab(all, all_types, settings.instruction);

  ModelConfig mc = settings.model;
  mc.vocab_size = vocab.size();
  const ModelParams base = init_params(mc);

  ProtocolResult result;
  for (std::uint64_t seed : spec.seeds) {
    SeedReport sr;
    sr.seed = seed;
    std::vector<SftRecord> train_records;
    Episode eval_ep;
    try {
      if (spec.mode == ProtocolMode::intra) {
        eval_ep = sample_episode(spec.source, spec.n_way, spec.k_shot, seed, spec.max_query);
      } else {
        Episode src = sample_episode(spec.source, spec.n_way, spec.k_shot, seed, 0);
        std::vector<EntityTypeDef> src_types;
        for (const auto& t : src.tagset) src_types.push_back(describe(t.name, settings));
        train_records = records_for(src, src_types, settings.instruction);
        sr.support_sentences += src.support.size();
        eval_ep = sample_episode(spec.target, spec.n_way, spec.k_shot, seed, spec.max_query);
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "seed " + std::to_string(seed) + ": " + e.what());
    }
    std::vector<EntityTypeDef> types;
    for (const auto& t : eval_ep.tagset) {
      types.push_back(describe(t.name, settings));
      sr.tagset.push_back(t.name);
    }
    auto target_records = records_for(eval_ep, types, settings.instruction);
    train_records.insert(train_records.end(), target_records.begin(), target_records.end());
    sr.support_sentences += eval_ep.support.size();
    sr.train_records = train_records.size();

    TrainConfig tc = settings.train;
    tc.seed = settings.train.seed ^ seed;
    tc.noise.seed = settings.train.noise.seed ^ seed;
    Trainer trainer(attach(base.clone(), settings.lora, seed), vocab, std::move(train_records), tc);
    trainer.run([&](const StepMetrics& m) { sr.final_loss = m.loss; });

    DecodeConfig dc = settings.decode;
    dc.seed = settings.decode.seed ^ seed;
    sr.report = evaluate(trainer.model(), vocab, eval_ep.query, types, dc, settings.jobs, settings.instruction);
    result.runs.push_back(std::move(sr));
  }
  double sum = 0.0;
  for (const auto& r : result.runs) sum += r.report.f1;
  result.mean_f1 = sum / static_cast<double>(result.runs.size());
  double sq = 0.0;
  for (const auto& r : result.runs) sq += (r.report.f1 - result.mean_f1) * (r.report.f1 - result.mean_f1);
  result.std_f1 = result.runs.size() > 1 ? std::sqrt(sq / static_cast<double>(result.runs.size() - 1)) : 0.0;
  return result;
}

}  // namespace cllmfs
