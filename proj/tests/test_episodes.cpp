// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>
#include <set>
#include <sstream>

#include "cllmfs/episodes.hpp"
#include "cllmfs/error.hpp"
#include "cllmfs/synthetic.hpp"

using namespace cllmfs;

namespace {

NerExample sentence(std::vector<std::string> tokens, std::vector<std::string> tags, std::string id) {
  return {std::move(tokens), std::move(tags), std::move(id)};
}

// Random corpus over `types` where each sentence carries 0 to 3 entities.
std::vector<NerExample> random_corpus(std::mt19937_64& rng, const std::vector<std::string>& types, std::size_t n) {
  std::vector<NerExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    NerExample ex;
    ex.source_id = "r" + std::to_string(i);
    const std::size_t len = 3 + rng() % 8;
    for (std::size_t j = 0; j < len; ++j) {
      ex.tokens.push_back("w" + std::to_string(rng() % 30));
      ex.tags.push_back("O");
    }
    const std::size_t ents = rng() % 4;
    for (std::size_t e = 0; e < ents; ++e) {
      const std::size_t pos = rng() % len;
      if (pos > 0 && ex.tags[pos - 1] != "O") continue;
      ex.tags[pos] = "B-" + types[rng() % types.size()];
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

TEST_CASE("CoNLL ingestion repairs, skips and splits") {
  std::istringstream in(
      "-DOCSTART- -X- O\n"
      "\n"
      "Andrew\tB-PER\n"
      "Little\tI-PER\n"
      "lives\tO\n"
      "in\tO\n"
      "Paris\tI-LOC\n"
      "\n"
      "broken-line-without-tag\n"
      "ok\tO\n"
      "bad\tX-TAG\n"
      "\n\n");
  const auto c = parse_conll(in, "t.conll");
  REQUIRE(c.examples.size() == 2);
  CHECK(c.examples[0].tags == std::vector<std::string>{"B-PER", "I-PER", "O", "O", "B-LOC"});
  CHECK(c.examples[0].source_id == "t.conll:0");
  CHECK(c.examples[1].tokens == std::vector<std::string>{"ok"});
  CHECK(c.stats.repaired_tags == 1);
  CHECK(c.stats.malformed_lines == 2);
  CHECK(c.tagset == std::vector<std::string>{"LOC", "PER"});

  std::istringstream long_in("a B-X\nb I-X\nc O\nd O\ne B-Y\nf O\n");
  const auto s = parse_conll(long_in, "l", 3);
  CHECK(s.stats.split_sentences == 1);
  CHECK(s.examples.size() == 2);

  std::istringstream empty("\n\n");
  CHECK_THROWS_AS(parse_conll(empty, "e"), Error);
  CHECK_THROWS_AS(ingest_conll("/nonexistent/file.conll"), Error);
}

TEST_CASE("write then parse reproduces a corpus") {
  const auto corpus = synthetic_corpus(40, 3);
  std::ostringstream out;
  write_conll(out, corpus);
  std::istringstream in(out.str());
  const auto back = parse_conll(in, "syn");
  REQUIRE(back.examples.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(back.examples[i].tokens == corpus[i].tokens);
    CHECK(back.examples[i].tags == corpus[i].tags);
  }
  CHECK(back.stats.repaired_tags == 0);
}

TEST_CASE("sampled episodes satisfy the N-way K-shot invariants") {
  std::mt19937_64 rng(42);
  const std::vector<std::string> types = {"A", "B", "C", "D", "E", "F", "G", "H"};
  const auto corpus = random_corpus(rng, types, 600);
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const std::size_t n = 1 + seed % 5, k = 1 + (seed / 5) % 3;
    const auto ep = sample_episode(corpus, n, k, seed, 0);
    std::set<std::string> tagset;
    for (const auto& t : ep.tagset) tagset.insert(t.name);
    REQUIRE(tagset.size() == n);

    const auto counts = type_counts(ep.support);
    for (const auto& t : tagset) REQUIRE(counts.count(t));
    for (const auto& t : tagset) REQUIRE(counts.at(t) >= k);
    for (const auto& [t, _] : counts) REQUIRE(tagset.count(t));

    std::set<std::string> support_ids;
    for (const auto& ex : ep.support) support_ids.insert(ex.source_id);
    REQUIRE(support_ids.size() == ep.support.size());
    for (const auto& ex : ep.query) {
      REQUIRE_FALSE(support_ids.count(ex.source_id));
      for (const auto& t : ex.entity_types()) REQUIRE(tagset.count(t));
    }

    // No support sentence can be dropped without some type falling below K.
    for (std::size_t drop = 0; drop < ep.support.size(); ++drop) {
      auto rest = ep.support;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(drop));
      const auto c = type_counts(rest);
      bool still_ok = true;
      for (const auto& t : tagset) still_ok = still_ok && c.count(t) && c.at(t) >= k;
      REQUIRE_FALSE(still_ok);
    }
    ++checked;
  }
  CHECK(checked == 1000);
}

TEST_CASE("episode sampling is deterministic per seed and caps the query pool") {
  const auto corpus = synthetic_corpus(200, 9);
  const auto a = sample_episode(corpus, 3, 2, 17, 10);
  const auto b = sample_episode(corpus, 3, 2, 17, 10);
  CHECK(a.query.size() <= 10);
  REQUIRE(a.support.size() == b.support.size());
  for (std::size_t i = 0; i < a.support.size(); ++i) CHECK(a.support[i].source_id == b.support[i].source_id);
}

TEST_CASE("sampler names the deficient type") {
  std::vector<NerExample> corpus = {
      sentence({"x", "y"}, {"B-A", "O"}, "0"),
      sentence({"x", "y"}, {"B-A", "B-B"}, "1"),
      sentence({"z"}, {"B-B"}, "2"),
  };
  try {
    sample_episode(corpus, 2, 3, 0);
    FAIL("expected sampling error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::sampling);
    CHECK(std::string(e.what()).find("type '") != std::string::npos);
  }
  CHECK_THROWS_AS(sample_episode(corpus, 3, 1, 0), Error);
  CHECK_THROWS_AS(sample_episode(corpus, 0, 1, 0), Error);
}

TEST_CASE("INTER rejects overlapping tagsets every time") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> pool = {"A", "B", "C", "D", "E", "F"};
  std::size_t rejected = 0, overlapping = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> src_types, tgt_types;
    for (const auto& t : pool) {
      if (rng() % 2) src_types.push_back(t);
      if (rng() % 2) tgt_types.push_back(t);
    }
    if (src_types.empty() || tgt_types.empty()) continue;
    const auto src = random_corpus(rng, src_types, 30);
    const auto tgt = random_corpus(rng, tgt_types, 30);
    const auto a = type_counts(src), b = type_counts(tgt);
    bool overlap = false;
    for (const auto& [t, _] : a) overlap = overlap || b.count(t);
    if (!overlap) {
      CHECK_NOTHROW(check_disjoint_tagsets(src, tgt));
      continue;
    }
    ++overlapping;
    ProtocolSpec spec;
    spec.mode = ProtocolMode::inter;
    spec.source = src;
    spec.target = tgt;
    try {
      run_protocol(spec, RunSettings{});
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::config) ++rejected;
    }
  }
  CHECK(overlapping > 50);
  CHECK(rejected == overlapping);
}

TEST_CASE("micro F1 hand values") {
  const std::vector<Extraction> gold = {{"s1", "PER", {"Andrew Little", "Bob"}}, {"s2", "LOC", {"Paris"}}};
  const std::vector<Extraction> pred = {{"s1", "PER", {"Andrew  Little", "Carol"}}, {"s2", "LOC", {"Paris"}}};
  const auto r = micro_f1(pred, gold);
  CHECK(r.per_type.at("PER").tp == 1);
  CHECK(r.per_type.at("PER").fp == 1);
  CHECK(r.per_type.at("PER").fn == 1);
  // tp=2, fp=1, fn=1
  CHECK(std::abs(r.f1 - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(r.precision - 2.0 / 3.0) < 1e-12);
  CHECK(r.n_queries == 2);

  const auto perfect = micro_f1(gold, gold);
  CHECK(perfect.f1 == 1.0);

  const std::vector<Extraction> none = {{"s1", "PER", {}}, {"s2", "LOC", {}}};
  CHECK(micro_f1(none, gold).f1 == 0.0);
  CHECK(micro_f1(none, none).f1 == 0.0);

  const std::vector<Extraction> other = {{"s3", "PER", {}}};
  try {
    micro_f1(other, gold);
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contract);
  }
}

TEST_CASE("micro F1 counts duplicates and ignores order") {
  const std::vector<Extraction> gold = {{"s", "T", {"x", "x", "y"}}};
  CHECK(micro_f1({{"s", "T", {"x"}}}, gold).per_type.at("T").fn == 2);
  const auto twice = micro_f1({{"s", "T", {"x", "x", "x"}}}, gold);
  CHECK(twice.per_type.at("T").tp == 2);
  CHECK(twice.per_type.at("T").fp == 1);

  std::mt19937_64 rng(3);
  std::vector<std::string> pool = {"a", "b", "c", "a", "d"};
  const double base = micro_f1({{"s", "T", pool}}, gold).f1;
  for (int i = 0; i < 20; ++i) {
    std::shuffle(pool.begin(), pool.end(), rng);
    CHECK(micro_f1({{"s", "T", pool}}, gold).f1 == base);
  }
  // Same string under another type does not match.
  CHECK(micro_f1({{"s", "U", {"x"}}, {"s", "T", {}}}, gold).f1 == 0.0);
}

TEST_CASE("gold extractions keep every type cell") {
  const auto ex = sentence({"Andrew", "Little", "met", "Bob"}, {"B-PER", "I-PER", "O", "B-PER"}, "s");
  const auto g = gold_extractions({ex}, {default_type_def("PER"), default_type_def("LOC")});
  REQUIRE(g.size() == 2);
  CHECK(g[0].entities == std::vector<std::string>{"Andrew Little", "Bob"});
  CHECK(g[1].entities.empty());
}

TEST_CASE("protocol mode names and result formatting") {
  CHECK(parse_protocol_mode("intra") == ProtocolMode::intra);
  CHECK(parse_protocol_mode("INTER") == ProtocolMode::inter);
  CHECK_THROWS_AS(parse_protocol_mode("cross"), Error);

  ProtocolResult r;
  r.runs.resize(2);
  r.runs[0].seed = 0;
  r.runs[0].report.f1 = 0.5;
  r.runs[1].seed = 1;
  r.runs[1].report.f1 = 0.25;
  r.mean_f1 = 0.375;
  const auto j = r.to_json();
  CHECK(j["summary"]["n"] == 2);
  CHECK(r.summary_table().find("0.3750") != std::string::npos);
  CHECK(r.csv().starts_with("seed,f1,precision,recall\n0,0.5,"));
}

TEST_CASE("a tiny INTRA protocol runs end to end and is repeatable") {
  ProtocolSpec spec;
  spec.source = synthetic_corpus(60, 4);
  spec.n_way = 2;
  spec.k_shot = 1;
  spec.max_query = 3;
  spec.seeds = {0, 1};
  RunSettings settings;
  settings.model.n_layers = 1;
  settings.model.d_model = 16;
  settings.model.n_heads = 2;
  settings.model.n_kv_groups = 1;
  settings.model.max_seq = 128;
  settings.lora.rank = 2;
  settings.train.steps = 2;
  settings.decode.max_new_tokens = 8;
  const auto a = run_protocol(spec, settings);
  const auto b = run_protocol(spec, settings);
  REQUIRE(a.runs.size() == 2);
  CHECK(a.to_json().dump() == b.to_json().dump());
  for (const auto& run : a.runs) {
    CHECK(run.tagset.size() == 2);
    CHECK(run.report.n_queries <= 3);
    CHECK(run.train_records == 2 * run.support_sentences);
  }
}
