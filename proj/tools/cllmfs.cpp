// SPDX-License-Identifier: Apache-2.0
//
// cllmfs: build SFT data, train adapters, decode, evaluate few-shot protocols,
// run ablations and gradient checks.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "cllmfs/ablation.hpp"
#include "cllmfs/checkpoint.hpp"
#include "cllmfs/error.hpp"
#include "cllmfs/gradcheck.hpp"
#include "cllmfs/run_config.hpp"
#include "cllmfs/synthetic.hpp"

using namespace cllmfs;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

// --- build-sft ---------------------------------------------------------------

struct BuildSftArgs {
  std::string corpus;
  std::size_t synthetic = 0;
  SyntheticOptions synthetic_options;
  std::string templates;
  std::string out;
  bool include_empty = true;
  std::size_t max_tokens = 0;
};

int cmd_build_sft(const BuildSftArgs& a, const Globals& g) {
  std::vector<NerExample> corpus;
  std::vector<EntityTypeDef> types;
  std::map<std::string, std::string> descriptions;
  std::string tmpl(kDefaultInstructionTemplate);
  if (!a.templates.empty()) {
    const json t = read_json_file(a.templates);
    try {
      tmpl = t.value("instruction", tmpl);
      if (t.contains("descriptions")) descriptions = t.at("descriptions").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, a.templates + ": " + e.what());
    }
  }
  if (a.synthetic > 0) {
    corpus = synthetic_corpus(a.synthetic, g.seed.value_or(0), a.synthetic_options);
    for (const auto& t : synthetic_types()) descriptions.emplace(t.name, t.description);
  } else {
    corpus = ingest_conll(a.corpus, a.max_tokens).examples;
  }
  for (const auto& name : make_corpus(corpus).tagset) {
    auto it = descriptions.find(name);
    types.push_back(it == descriptions.end() ? default_type_def(name) : EntityTypeDef{name, it->second});
  }

  std::vector<SftRecord> records;
  BuildStats stats;
  for (const auto& ex : corpus) {
    auto rs = build_records(ex, types, tmpl, a.include_empty, &stats);
    records.insert(records.end(), rs.begin(), rs.end());
  }
  // Every output must parse back to its gold entities.
  for (const auto& r : records) {
    if (parse_output(r.output, true) != r.gold_entities()) {
      throw Error(ErrorKind::data, "record " + r.id + " does not round-trip through the output parser");
    }
  }
  std::ostringstream os;
  write_records_jsonl(os, records);
  write_file(a.out, os.str());

  std::map<std::string, std::pair<std::size_t, std::size_t>> per_type;
  for (const auto& r : records) {
    auto& [recs, ents] = per_type[r.entity_type.name];
    ++recs;
    ents += r.gold_spans.size();
  }
  std::cout << std::left << std::setw(20) << "type" << std::setw(10) << "records" << "entities\n";
  for (const auto& [t, c] : per_type) std::cout << std::setw(20) << t << std::setw(10) << c.first << c.second << '\n';
  std::cout << records.size() << " records from " << corpus.size() << " sentences";
  if (stats.skipped_empty) std::cout << " (" << stats.skipped_empty << " empty sentences skipped)";
  std::cout << " -> " << a.out << '\n';
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out_dir;
  std::optional<double> lambda;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> warmup_steps;
  std::optional<std::string> lr_decay;
  bool noise = false;
  bool resume = false;
};

std::string trainer_parameter_line(const Trainer& t) {
  const auto r = trainable_parameter_report(t.model());
  std::ostringstream os;
  os << "trainable " << r.trainable << " / frozen " << r.frozen << " parameters in " << r.pairs << " adapter pairs";
  return os.str();
}

int cmd_train(const TrainArgs& a, const Globals& g) {
  RunSettings s = a.config.empty() ? RunSettings{} : load_run_settings(a.config);
  if (a.lambda) s.train.lambda = *a.lambda;
  if (a.steps) s.train.steps = *a.steps;
  if (a.lr) s.train.lr = *a.lr;
  if (a.batch_size) s.train.batch_size = *a.batch_size;
  if (a.warmup_steps) s.train.warmup_steps = *a.warmup_steps;
  if (a.lr_decay) s.train.lr_decay = parse_lr_decay(*a.lr_decay);
  if (a.noise) s.train.noise.enabled = true;
  if (g.seed) s.train.seed = *g.seed;
  s.train.validate();

  auto records = read_records_jsonl(fs::path(a.data));
  const fs::path out(a.out_dir);
  const fs::path ckpt = out / "checkpoint";
  fs::create_directories(out);

  std::optional<Trainer> trainer;
  if (a.resume && fs::exists(ckpt / "manifest.json")) {
    trainer.emplace(Trainer::load(ckpt, std::move(records)));
    trainer->config().steps = s.train.steps;
    std::cerr << "resuming at step " << trainer->steps_done() << '\n';
  } else {
    const Vocab vocab = vocab_from_records(records);
    ModelConfig mc = s.model;
    mc.vocab_size = vocab.size();
    trainer.emplace(attach(init_params(mc), s.lora, s.train.seed), vocab, std::move(records), s.train);
  }
  write_file(out / "config.json", to_json(s).dump(2) + "\n");

  std::ofstream log(out / "metrics.jsonl", a.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw Error(ErrorKind::io, "cannot write " + (out / "metrics.jsonl").string());
  const auto report = trainer_parameter_line(*trainer);
  std::cerr << report << '\n';
  std::optional<StepMetrics> first, last;
  const std::size_t every = std::max<std::size_t>(1, s.train.steps / 20);
  const auto t0 = std::chrono::steady_clock::now();
  trainer->run(
      [&](const StepMetrics& m) {
        log << m.to_json().dump() << '\n';
        if (!first) first = m;
        last = m;
        if (m.step % every == 0 || m.step == s.train.steps) {
          std::cerr << "step " << m.step << "  loss " << m.loss << "  ce " << m.ce << "  cl " << m.cl << '\n';
        }
      },
      ckpt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!last) {
    std::cout << "nothing to do: checkpoint already at step " << trainer->steps_done() << '\n';
    return 0;
  }
  std::cout << "trained " << last->step << " steps in " << std::fixed << std::setprecision(1) << secs
            << " s; ce " << std::setprecision(4) << first->ce << " -> " << last->ce << "; checkpoint " << ckpt.string()
            << '\n';
  return std::isfinite(last->loss) ? 0 : 1;
}

// --- generate ----------------------------------------------------------------

struct DecodeFlags {
  std::optional<std::size_t> max_new_tokens;
  std::optional<double> temperature;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  bool free = false;

  void apply(DecodeConfig& c) const {
    if (max_new_tokens) c.max_new_tokens = *max_new_tokens;
    if (temperature) c.temperature = *temperature;
    if (top_k) c.top_k = *top_k;
    if (top_p) c.top_p = *top_p;
    if (free) c.constrained = false;
  }
};

void add_decode_flags(CLI::App* app, DecodeFlags& f) {
  app->add_option("--max-new-tokens", f.max_new_tokens, "Decoding budget");
  app->add_option("--temperature", f.temperature, "Sampling temperature");
  app->add_option("--top-k", f.top_k, "Top-k cutoff");
  app->add_option("--top-p", f.top_p, "Nucleus cutoff");
  app->add_flag("--free", f.free, "Disable input-span constraints");
}

struct GenerateArgs {
  std::string checkpoint;
  std::string data;
  std::string text;
  std::string type;
  std::string description;
  std::string instruction{kDefaultInstructionTemplate};
  std::string out;
  DecodeFlags decode;
};

int cmd_generate(const GenerateArgs& a, const Globals& g) {
  auto [model, vocab] = load_model(a.checkpoint);
  std::vector<SftRecord> records;
  if (!a.data.empty()) {
    records = read_records_jsonl(fs::path(a.data));
  } else {
    if (a.text.empty() || a.type.empty()) {
      throw Error(ErrorKind::config, "generate needs --data, or --text together with --type");
    }
    NerExample ex;
    ex.source_id = "cli";
    std::istringstream is(a.text);
    for (std::string w; is >> w;) {
      ex.tokens.push_back(w);
      ex.tags.push_back("O");
    }
    const EntityTypeDef type = a.description.empty() ? default_type_def(a.type) : EntityTypeDef{a.type, a.description};
    records = build_records(ex, {type}, a.instruction);
  }
  DecodeConfig dc;
  a.decode.apply(dc);
  if (g.seed) dc.seed = *g.seed;
  const auto gens = generate_records(model, vocab, records, dc, g.jobs);
  std::ostringstream os;
  for (const auto& gr : gens) os << gr.to_json().dump() << '\n';
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    write_file(a.out, os.str());
    std::cout << gens.size() << " generations -> " << a.out << '\n';
  }
  return 0;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string protocol;
  std::string checkpoint;
  std::string train_config;
  std::string report;
  std::string csv;
  std::string instruction{kDefaultInstructionTemplate};
  DecodeFlags decode;
};

// Scores a trained checkpoint on the query sets of the protocol's episodes.
ProtocolResult eval_checkpoint(const ProtocolSpec& spec, const fs::path& ckpt, const DecodeConfig& base,
                               std::size_t jobs, const std::string& instruction) {
  auto [model, vocab] = load_model(ckpt);
  const auto& corpus = spec.mode == ProtocolMode::inter ? spec.target : spec.source;
  if (spec.mode == ProtocolMode::inter) check_disjoint_tagsets(spec.source, spec.target);
  ProtocolResult result;
  for (std::uint64_t seed : spec.seeds) {
    const Episode ep = sample_episode(corpus, spec.n_way, spec.k_shot, seed, spec.max_query);
    SeedReport sr;
    sr.seed = seed;
    for (const auto& t : ep.tagset) sr.tagset.push_back(t.name);
    sr.support_sentences = ep.support.size();
    DecodeConfig dc = base;
    dc.seed = base.seed ^ seed;
    sr.report = evaluate(model, vocab, ep.query, ep.tagset, dc, jobs, instruction);
    result.runs.push_back(std::move(sr));
  }
  double sum = 0.0, sq = 0.0;
  for (const auto& r : result.runs) sum += r.report.f1;
  result.mean_f1 = sum / static_cast<double>(result.runs.size());
  for (const auto& r : result.runs) sq += (r.report.f1 - result.mean_f1) * (r.report.f1 - result.mean_f1);
  result.std_f1 = result.runs.size() > 1 ? std::sqrt(sq / static_cast<double>(result.runs.size() - 1)) : 0.0;
  return result;
}

int cmd_eval(const EvalArgs& a, const Globals& g) {
  const ProtocolSpec spec = load_protocol(a.protocol);
  ProtocolResult result;
  json report;
  if (!a.checkpoint.empty()) {
    DecodeConfig dc;
    a.decode.apply(dc);
    if (g.seed) dc.seed = *g.seed;
    result = eval_checkpoint(spec, a.checkpoint, dc, g.jobs, a.instruction);
    report = result.to_json();
    report["decode"] = to_json(dc);
  } else {
    RunSettings s = load_run_settings(a.train_config);
    a.decode.apply(s.decode);
    if (g.seed) {
      s.train.seed = *g.seed;
      s.decode.seed = *g.seed;
    }
    s.jobs = g.jobs;
    result = run_protocol(spec, s);
    report = result.to_json();
    report["settings"] = to_json(s);
  }
  report["protocol"] = {{"mode", to_string(spec.mode)},
                        {"n_way", spec.n_way},
                        {"k_shot", spec.k_shot},
                        {"max_query", spec.max_query},
                        {"seeds", spec.seeds}};
  if (!a.report.empty()) write_file(a.report, report.dump(2) + "\n");
  if (!a.csv.empty()) write_file(a.csv, result.csv());
  std::cout << result.summary_table();
  if (a.report.empty()) std::cout << report.dump(2) << '\n';
  return 0;
}

// --- ablate ------------------------------------------------------------------

struct AblateArgs {
  std::string axis;
  std::string config;
  std::string protocol;
  std::optional<std::size_t> seeds;
  std::string report;
};

int cmd_ablate(const AblateArgs& a, const Globals& g) {
  const AblationAxis axis = parse_ablation_axis(a.axis);
  json cfg = a.config.empty() ? json::object() : read_json_file(a.config);
  json protocol_json = {{"source", {{"synthetic", {{"sentences", 200}, {"seed", 0}}}}}};
  fs::path base_dir = a.config.empty() ? fs::path() : fs::path(a.config).parent_path();
  if (cfg.is_object() && cfg.contains("protocol")) {
    protocol_json = cfg.at("protocol");
    cfg.erase("protocol");
  }
  if (!a.protocol.empty()) {
    protocol_json = read_json_file(a.protocol);
    base_dir = fs::path(a.protocol).parent_path();
  }
  ProtocolSpec spec = protocol_from_json(protocol_json, base_dir);
  if (a.seeds) {
    spec.seeds.clear();
    for (std::uint64_t s = 0; s < *a.seeds; ++s) spec.seeds.push_back(s);
  }
  RunSettings s = run_settings_from_json(cfg);
  if (g.seed) {
    s.train.seed = *g.seed;
    s.decode.seed = *g.seed;
  }
  s.jobs = g.jobs;
  const auto rows = run_ablation(axis, spec, s, [](const AblationRow& r) {
    std::cerr << std::fixed << std::setprecision(3) << r.label << ": mean F1 " << r.result.mean_f1 << '\n';
  });
  std::cout << ablation_table(rows);
  if (!a.report.empty()) write_file(a.report, ablation_json(axis, rows).dump(2) + "\n");
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
  std::string ops = "all";
  std::size_t seeds = 100;
  std::string inject_fault;
};

std::optional<ad::OpKind> parse_op_kind(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(ad::OpKind::logsumexp); ++k) {
    const auto kind = static_cast<ad::OpKind>(k);
    if (name == ad::to_string(kind)) return kind;
  }
  return std::nullopt;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> ops;
  if (a.ops == "all") {
    ops = ad::gradcheck_ops();
  } else {
    std::istringstream is(a.ops);
    for (std::string op; std::getline(is, op, ',');) ops.push_back(op);
  }
  if (!a.inject_fault.empty()) {
    const auto kind = parse_op_kind(a.inject_fault);
    if (!kind) throw Error(ErrorKind::config, "unknown op kind '" + a.inject_fault + "' for --inject-fault");
    ad::set_gradient_fault(*kind);
  }
  constexpr double kTolerance = 1e-4;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t failures = 0;
  std::cout << std::left << std::setw(24) << "op" << std::setw(8) << "seeds" << std::setw(13) << "coordinates"
            << std::setw(14) << "max rel err" << "status\n";
  for (const auto& op : ops) {
    const auto r = ad::gradcheck_op(op, a.seeds);
    const bool ok = r.max_rel_error < kTolerance;
    failures += !ok;
    std::cout << std::setw(24) << r.op << std::setw(8) << r.seeds << std::setw(13) << r.coordinates << std::scientific
              << std::setprecision(2) << std::setw(14) << r.max_rel_error << std::defaultfloat
              << (ok ? "ok" : "FAIL (seed " + std::to_string(r.worst_seed) + ")") << '\n';
  }
  ad::set_gradient_fault(std::nullopt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << ops.size() - failures << "/" << ops.size() << " ops within " << kTolerance << " in " << std::fixed
            << std::setprecision(2) << secs << " s\n";
  return failures ? 1 : 0;
}

std::string version_text() {
  std::ostringstream os;
  os << "cllmfs " << kVersion << "\n\n"
     << std::left << std::setw(16) << "format" << std::setw(10) << "writes" << "reads\n"
     << std::setw(16) << "checkpoint" << std::setw(10) << "1" << "1\n"
     << std::setw(16) << "sft-records" << std::setw(10) << "1" << "1\n"
     << std::setw(16) << "metrics-log" << std::setw(10) << "1" << "1\n"
     << std::setw(16) << "eval-report" << std::setw(10) << "1" << "1\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot NER with LoRA-adapted decoder models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_text());
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_option("--jobs", g.jobs, "Worker threads for generation")->check(CLI::PositiveNumber);

  BuildSftArgs bs;
  auto* build = app.add_subcommand("build-sft", "Turn a CoNLL corpus into JSON-lines SFT records");
  auto* corpus_opt = build->add_option("--corpus", bs.corpus, "CoNLL file")->check(CLI::ExistingFile);
  auto* syn_opt = build->add_option("--synthetic", bs.synthetic, "Use N generated sentences instead of --corpus");
  corpus_opt->excludes(syn_opt);
  auto& so = bs.synthetic_options;
  build->add_option("--max-entities", so.max_entities, "Synthetic: entities per sentence, at most")->needs(syn_opt);
  build->add_option("--min-filler", so.min_filler, "Synthetic: filler words, at least")->needs(syn_opt);
  build->add_option("--max-filler", so.max_filler, "Synthetic: filler words, at most")->needs(syn_opt);
  build->add_option("--single-type-rate", so.single_type_rate, "Synthetic: share of one-type sentences")
      ->needs(syn_opt)
      ->check(CLI::Range(0.0, 1.0));
  build->add_option("--templates", bs.templates, "JSON with \"instruction\" and \"descriptions\"");
  build->add_option("--out", bs.out, "Output .jsonl")->required();
  build->add_flag("--include-empty,!--skip-empty", bs.include_empty,
                 "Keep records with no entity of their type (default) or drop them");
  build->add_option("--max-tokens", bs.max_tokens, "Split longer sentences");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Fine-tune LoRA adapters on SFT records");
  train->add_option("--config", tr.config, "Experiment config (JSON)");
  train->add_option("--data", tr.data, "SFT records (.jsonl)")->required();
  train->add_option("--out-dir", tr.out_dir, "Checkpoint and metrics directory")->required();
  train->add_option("--lambda", tr.lambda, "Contrastive weight");
  train->add_option("--steps", tr.steps, "Optimizer steps");
  train->add_option("--lr", tr.lr, "Learning rate");
  train->add_option("--batch-size", tr.batch_size, "Records per step");
  train->add_option("--warmup-steps", tr.warmup_steps, "Linear warmup length");
  train->add_option("--lr-decay", tr.lr_decay, "constant, linear or cosine");
  train->add_flag("--noise", tr.noise, "Enable embedding noise");
  train->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out-dir");

  GenerateArgs ge;
  auto* gen = app.add_subcommand("generate", "Decode entity lists with a trained checkpoint");
  gen->add_option("--checkpoint", ge.checkpoint, "Checkpoint directory")->required();
  gen->add_option("--data", ge.data, "SFT records (.jsonl)");
  gen->add_option("--text", ge.text, "A single whitespace-tokenized sentence");
  gen->add_option("--type", ge.type, "Entity type for --text");
  gen->add_option("--description", ge.description, "Type description for --text");
  gen->add_option("--instruction", ge.instruction, "Instruction template used for --text");
  gen->add_option("--out", ge.out, "Output .jsonl (stdout if omitted)");
  add_decode_flags(gen, ge.decode);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Run an N-way K-shot protocol and report micro-F1");
  eval->add_option("--protocol", ev.protocol, "Protocol description (JSON)")->required();
  auto* ck = eval->add_option("--checkpoint", ev.checkpoint, "Score a trained checkpoint");
  auto* tc = eval->add_option("--train-config", ev.train_config, "Train a fresh adapter per episode");
  ck->excludes(tc);
  eval->add_option("--report", ev.report, "Write the report JSON here");
  eval->add_option("--csv", ev.csv, "Write seed,f1,precision,recall rows here");
  eval->add_option("--instruction", ev.instruction, "Instruction template the checkpoint was trained with");
  add_decode_flags(eval, ev.decode);

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Sweep training modules or LoRA targets");
  ablate->add_option("--axis", ab.axis, "modules | lora-targets")->required();
  ablate->add_option("--config", ab.config, "Experiment config (JSON), may hold a \"protocol\" section");
  ablate->add_option("--protocol", ab.protocol, "Protocol description (JSON)");
  ablate->add_option("--seeds", ab.seeds, "Seeds 0..N-1 per row");
  ablate->add_option("--report", ab.report, "Write the ablation JSON here");

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare autodiff gradients with central differences");
  grad->add_option("--ops", gc.ops, "all, or a comma-separated list of op names");
  grad->add_option("--seeds", gc.seeds, "Random cases per op");
  grad->add_option("--inject-fault", gc.inject_fault, "Negate the gradient of this op kind");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 4;
  }

  try {
    if (*build) {
      if (bs.corpus.empty() && bs.synthetic == 0) throw Error(ErrorKind::config, "build-sft needs --corpus or --synthetic");
      return cmd_build_sft(bs, g);
    }
    if (*train) return cmd_train(tr, g);
    if (*gen) return cmd_generate(ge, g);
    if (*eval) {
      if (ev.checkpoint.empty() && ev.train_config.empty()) {
        throw Error(ErrorKind::config, "eval needs --checkpoint or --train-config");
      }
      return cmd_eval(ev, g);
    }
    if (*ablate) return cmd_ablate(ab, g);
    if (*grad) return cmd_gradcheck(gc);
  } catch (const Error& e) {
    std::cerr << "cllmfs: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "cllmfs: internal error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
