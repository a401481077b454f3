// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cllmfs/checkpoint.hpp"
#include "cllmfs/error.hpp"
#include "cllmfs/synthetic.hpp"
#include "cllmfs/trainer.hpp"

using namespace cllmfs;
namespace fs = std::filesystem;

namespace {

struct Setup {
  Vocab vocab;
  std::vector<SftRecord> records;
  ModelConfig model;
};

Setup tiny_setup(std::size_t sentences = 6) {
  Setup s;
  const auto corpus = synthetic_corpus(sentences, 11);
  const auto types = synthetic_types();
  s.vocab = build_vocab(corpus, types);
  for (const auto& ex : corpus)
    for (auto& r : build_records(ex, types, kDefaultInstructionTemplate)) s.records.push_back(std::move(r));
  s.model.n_layers = 2;
  s.model.d_model = 16;
  s.model.n_heads = 2;
  s.model.n_kv_groups = 1;
  s.model.vocab_size = s.vocab.size();
  s.model.max_seq = 96;
  s.model.init_std = 0.3;
  s.model.seed = 5;
  return s;
}

AdaptedModel tiny_model(const Setup& s, std::uint64_t seed = 1) {
  LoraSpec spec;
  spec.rank = 4;
  return attach(init_params(s.model), spec, seed);
}

std::vector<std::vector<double>> snapshot(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::vector<std::vector<double>> out;
  for (const auto& [_, t] : tensors) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cllmfs_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("token loss covers only the output segment") {
  RecordLayout layout;
  layout.tokens = {2, 7, 8, 9, 10, 11, 3};
  layout.instruction = {0, 2};
  layout.input = {2, 4};
  layout.output = {4, 7};
  const std::size_t v = 12;
  Tensor logits = Tensor::zeros({7, v}, true);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (auto& x : logits.data()) x = nd(rng);
  Tape tape;
  const auto loss = sft_token_loss(tape, logits, layout);
  tape.backward(loss);
  for (std::size_t row = 0; row < 7; ++row) {
    double mag = 0.0;
    for (std::size_t j = 0; j < v; ++j) mag += std::abs(logits.grad()[row * v + j]);
    CAPTURE(row);
    // Rows 3..5 predict tokens 4..6.
    CHECK((mag > 0.0) == (row >= 3 && row <= 5));
  }

  Tape t2;
  const auto uniform = sft_token_loss(t2, Tensor::zeros({7, v}), layout);
  CHECK(uniform.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
}

TEST_CASE("train config round-trips through json and rejects unknown keys") {
  TrainConfig c;
  c.lr = 3e-4;
  c.steps = 17;
  c.lambda = 0.5;
  c.noise.enabled = true;
  c.noise.kind = NoiseKind::uniform;
  c.contrastive.tap_layer = 2;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  auto j = to_json(c);
  j["learning_rate"] = 1.0;
  try {
    train_config_from_json(j);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("learning-rate schedule: warmup ramp, then flat or decaying") {
  TrainConfig c;
  c.lr = 0.01;
  c.steps = 110;
  c.warmup_steps = 10;
  CHECK(learning_rate(c, 1) == doctest::Approx(0.001));
  CHECK(learning_rate(c, 10) == doctest::Approx(0.01));
  CHECK(learning_rate(c, 60) == doctest::Approx(0.01));

  c.lr_decay = LrDecay::linear;
  CHECK(learning_rate(c, 11) == doctest::Approx(0.01));
  CHECK(learning_rate(c, 61) == doctest::Approx(0.005));
  CHECK(learning_rate(c, 110) == doctest::Approx(0.0001));

  c.lr_decay = LrDecay::cosine;
  CHECK(learning_rate(c, 11) == doctest::Approx(0.01));
  CHECK(learning_rate(c, 61) == doctest::Approx(0.005));
  CHECK(learning_rate(c, 36) == doctest::Approx(0.005 * (1.0 + std::cos(M_PI / 4.0))));
  double prev = 1.0;
  for (std::size_t s = 11; s <= c.steps; ++s) {
    CHECK(learning_rate(c, s) <= prev);
    prev = learning_rate(c, s);
  }
  CHECK(learning_rate(c, 500) == 0.0);

  CHECK(train_config_from_json(to_json(c)).lr_decay == LrDecay::cosine);
  CHECK(train_config_from_json(to_json(c)).warmup_steps == 10);
  CHECK_THROWS_AS(parse_lr_decay("step"), Error);
}

TEST_CASE("zero lambda trains on cross-entropy alone") {
  const auto s = tiny_setup();
  TrainConfig a;
  a.lambda = 0.0;
  a.steps = 3;
  TrainConfig b = a;
  b.contrastive.tau = 0.5;
  b.noise.enabled = true;
  Trainer ta(tiny_model(s), s.vocab, s.records, a);
  Trainer tb(tiny_model(s), s.vocab, s.records, b);
  for (int i = 0; i < 3; ++i) {
    const auto ma = ta.step();
    const auto mb = tb.step();
    CHECK(ma.loss == ma.ce);
    CHECK(ma.loss == mb.loss);
  }
  CHECK(snapshot(ta.model().lora.named_tensors()) == snapshot(tb.model().lora.named_tensors()));
}

TEST_CASE("loss decreases and the base stays frozen") {
  const auto s = tiny_setup(2);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.steps = 40;
  cfg.batch_size = 2;
  Trainer t(tiny_model(s), s.vocab, s.records, cfg);
  const auto base_before = snapshot(t.model().base.named_tensors());
  const auto lora_before = snapshot(t.model().lora.named_tensors());
  std::vector<double> losses;
  t.run([&](const StepMetrics& m) { losses.push_back(m.ce); });
  REQUIRE(losses.size() == 40);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += losses[i];
    tail += losses[35 + i];
  }
  CHECK(tail < 0.7 * head);
  CHECK(snapshot(t.model().base.named_tensors()) == base_before);
  CHECK(snapshot(t.model().lora.named_tensors()) != lora_before);
}

TEST_CASE("one small step lowers the loss of its record") {
  auto s = tiny_setup(3);
  s.model.init_std = 0.02;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.seed = seed;
    const std::size_t idx = seed % s.records.size();
    Trainer t(tiny_model(s, seed), s.vocab, s.records, cfg);
    const auto prepared = prepare_record(s.records[idx], s.vocab, cfg.contrastive, s.model.max_seq);
    Tape before_tape(false);
    const double before = sft_token_loss(before_tape, t.model(), prepared).item();
    const std::vector<std::size_t> batch = {idx};
    t.train_step(batch);
    Tape after_tape(false);
    const double after = sft_token_loss(after_tape, t.model(), prepared).item();
    CAPTURE(seed);
    CHECK(after < before);
  }
}

TEST_CASE("batches cover every record once per epoch") {
  const auto s = tiny_setup();
  TrainConfig cfg;
  cfg.batch_size = 5;
  Trainer t(tiny_model(s), s.vocab, s.records, cfg);
  const std::size_t n = s.records.size();
  std::vector<std::size_t> seen;
  for (std::size_t step = 0; seen.size() < 2 * n; ++step)
    for (auto i : t.batch_indices(step)) seen.push_back(i);
  std::vector<std::size_t> first(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::size_t> second(seen.begin() + static_cast<std::ptrdiff_t>(n),
                                  seen.begin() + static_cast<std::ptrdiff_t>(2 * n));
  CHECK(first != second);
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(first[i] == i);
    CHECK(second[i] == i);
  }
  CHECK(t.batch_indices(3) == Trainer(tiny_model(s), s.vocab, s.records, cfg).batch_indices(3));
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  const auto s = tiny_setup();
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.lambda = 0.1;
  cfg.noise.enabled = true;
  cfg.noise.sigma = 0.05;
  Trainer straight(tiny_model(s), s.vocab, s.records, cfg);
  std::vector<double> straight_losses;
  straight.run([&](const StepMetrics& m) { straight_losses.push_back(m.loss); });

  const auto dir = scratch("resume");
  Trainer first(tiny_model(s), s.vocab, s.records, cfg);
  std::vector<double> resumed_losses;
  for (int i = 0; i < 3; ++i) resumed_losses.push_back(first.step().loss);
  first.save(dir);
  Trainer second = Trainer::load(dir, s.records);
  CHECK(second.steps_done() == 3);
  second.run([&](const StepMetrics& m) { resumed_losses.push_back(m.loss); });
  CHECK(resumed_losses == straight_losses);
  CHECK(snapshot(second.model().lora.named_tensors()) == snapshot(straight.model().lora.named_tensors()));

  auto [model, vocab] = load_model(dir);
  CHECK(vocab == s.vocab);
  CHECK(snapshot(model.base.named_tensors()) == snapshot(first.model().base.named_tensors()));
  fs::remove_all(dir);
}

TEST_CASE("unknown checkpoint versions are rejected") {
  const auto s = tiny_setup(1);
  TrainConfig cfg;
  Trainer t(tiny_model(s), s.vocab, s.records, cfg);
  const auto dir = scratch("version");
  t.save(dir);
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    in >> manifest;
  }
  manifest["format_version"] = 99;
  {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump();
  }
  try {
    Trainer::load(dir, s.records);
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
  CHECK_THROWS_AS(load_model(scratch("missing")), Error);
  fs::remove_all(dir);
}

TEST_CASE("trainer construction errors") {
  auto s = tiny_setup(1);
  TrainConfig cfg;
  CHECK_THROWS_AS(Trainer(tiny_model(s), s.vocab, {}, cfg), Error);
  cfg.contrastive.tap_layer = 9;
  CHECK_THROWS_AS(Trainer(tiny_model(s), s.vocab, s.records, cfg), Error);
  cfg = {};
  s.model.max_seq = 8;
  try {
    Trainer(tiny_model(s), s.vocab, s.records, cfg);
    FAIL("expected length error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::length);
  }
}
