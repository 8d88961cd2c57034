// tests/test_checkpoint.cpp

// Copyright 2026  speechdistill authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <string>
#include <vector>

#include "spd/common.hpp"
#include "spd/config.hpp"
#include "spd/corpus.hpp"
#include "spd/distill.hpp"
#include "spd/params.hpp"
#include "testutil.hpp"

using namespace spd;
using spdtest::TempDir;

namespace {

Manifest make_corpus(const TempDir& tmp, int n_utts, uint64_t seed = 5) {
  SynthSpec s;
  s.n_utts = n_utts;
  s.n_classes = 4;
  s.n_speakers = 4;
  s.n_sessions = 2;
  s.min_dur = 0.5;
  s.max_dur = 0.9;
  s.seed = seed;
  return synthesize_corpus(s, tmp.path());
}

Config train_cfg(uint64_t seed = 1) {
  Config c = Config::preset("tiny");
  c.set("seed", std::to_string(seed));
  c.set("train.sample_budget", "30000");
  c.set("train.lr", "2e-3");
  return c;
}

// A trainer state with nonzero counters and warm Adam moments, so the round
// trip exercises every section with live data.
struct WarmState {
  TempDir tmp;
  Manifest m;
  CorpusCache cache;
  Config cfg;
  std::vector<Batch> batches;
  long long total = 0;

  WarmState() : tmp("ckpt"), m(make_corpus(tmp, 8)), cache(m), cfg(train_cfg()) {
    const TrainConfig tc = TrainConfig::from_config(cfg);
    batches = make_batches(m, tc.sample_budget, tc.seed, 0);
    total = 12;
  }

  TrainerState after(int n_steps) {
    Trainer tr(cfg, total);
    for (int i = 0; i < n_steps; ++i)
      tr.train_step(batches[size_t(i) % batches.size()], m, cache, false);
    return tr.state();
  }
};

void check_states_equal(const TrainerState& a, const TrainerState& b) {
  CHECK(params_bitwise_equal(a.student, b.student));
  CHECK(params_bitwise_equal(a.teacher, b.teacher));
  CHECK(params_bitwise_equal(a.adam_m, b.adam_m));
  CHECK(params_bitwise_equal(a.adam_v, b.adam_v));
  CHECK(a.opt_steps == b.opt_steps);
  CHECK(a.batches_done == b.batches_done);
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly") {
  WarmState w;
  const TrainerState st = w.after(3);
  REQUIRE(st.opt_steps == 3);
  REQUIRE(st.batches_done == 3);

  const std::string path = w.tmp.file("a.ckpt");
  save_checkpoint(path, w.cfg, st, w.total);

  Config cfg2;
  long long total2 = 0;
  const TrainerState got = load_checkpoint(path, cfg2, total2);
  check_states_equal(got, st);
  CHECK(total2 == w.total);
  CHECK(cfg2.canonical_text() == w.cfg.canonical_text());
}

TEST_CASE("saving the same state twice produces identical bytes") {
  WarmState w;
  const TrainerState st = w.after(2);
  const std::string p1 = w.tmp.file("b1.ckpt");
  const std::string p2 = w.tmp.file("b2.ckpt");
  save_checkpoint(p1, w.cfg, st, w.total);
  save_checkpoint(p2, w.cfg, st, w.total);
  CHECK(spdtest::same_bytes(p1, p2));
}

TEST_CASE("a resumed trainer continues the original trajectory exactly") {
  WarmState w;

  Trainer straight(w.cfg, w.total);
  for (int i = 0; i < 4; ++i)
    straight.train_step(w.batches[size_t(i) % w.batches.size()], w.m, w.cache, false);

  Trainer head(w.cfg, w.total);
  for (int i = 0; i < 2; ++i)
    head.train_step(w.batches[size_t(i) % w.batches.size()], w.m, w.cache, false);
  const std::string path = w.tmp.file("resume.ckpt");
  save_checkpoint(path, w.cfg, head.state(), w.total);

  Config cfg2;
  long long total2 = 0;
  TrainerState st = load_checkpoint(path, cfg2, total2);
  Trainer tail(cfg2, total2, std::move(st));
  for (int i = 2; i < 4; ++i)
    tail.train_step(w.batches[size_t(i) % w.batches.size()], w.m, w.cache, false);

  check_states_equal(tail.state(), straight.state());
  CHECK(tail.current_tau() == straight.current_tau());
  CHECK(tail.current_lr() == straight.current_lr());
}

TEST_CASE("loading rejects a state that does not fit the model") {
  WarmState w;
  const std::string path = w.tmp.file("misfit.ckpt");
  save_checkpoint(path, w.cfg, w.after(1), w.total);

  Config cfg2;
  long long total2 = 0;
  TrainerState st = load_checkpoint(path, cfg2, total2);
  Config bigger = w.cfg;
  bigger.set("model.n_layers", "3");
  CHECK_THROWS_WITH_AS(Trainer(bigger, total2, std::move(st)),
                       doctest::Contains("do not fit"), DataError);
}

TEST_CASE("damaged checkpoint files are rejected") {
  WarmState w;
  const std::string path = w.tmp.file("good.ckpt");
  save_checkpoint(path, w.cfg, w.after(1), w.total);
  const std::string body = spdtest::slurp(path);
  REQUIRE(body.size() > 64);

  Config cfg2;
  long long total2 = 0;

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(w.tmp.file("absent.ckpt"), cfg2, total2), DataError);
  }
  SUBCASE("foreign magic") {
    std::string bad = body;
    bad[0] = 'X';
    const std::string p = w.tmp.file("magic.ckpt");
    spdtest::spit(p, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(p, cfg2, total2),
                         doctest::Contains("not a checkpoint"), DataError);
  }
  SUBCASE("unsupported version") {
    std::string bad = body;
    bad[8] = char(0x7f);
    const std::string p = w.tmp.file("version.ckpt");
    spdtest::spit(p, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(p, cfg2, total2), doctest::Contains("version"),
                         DataError);
  }
  SUBCASE("truncated body") {
    const std::string p = w.tmp.file("trunc.ckpt");
    spdtest::spit(p, body.substr(0, body.size() / 2));
    CHECK_THROWS_WITH_AS(load_checkpoint(p, cfg2, total2), doctest::Contains("truncated"),
                         DataError);
  }
  SUBCASE("missing footer") {
    const std::string p = w.tmp.file("nofoot.ckpt");
    spdtest::spit(p, body.substr(0, body.size() - 8));
    CHECK_THROWS_WITH_AS(load_checkpoint(p, cfg2, total2), doctest::Contains("truncated"),
                         DataError);
  }
  SUBCASE("corrupted footer") {
    std::string bad = body;
    bad[bad.size() - 1] = char(bad[bad.size() - 1] ^ 0x40);
    const std::string p = w.tmp.file("foot.ckpt");
    spdtest::spit(p, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(p, cfg2, total2), doctest::Contains("checksum"),
                         DataError);
  }
  SUBCASE("flipped payload byte") {
    std::string bad = body;
    bad[bad.size() * 2 / 3] = char(bad[bad.size() * 2 / 3] ^ 0x01);
    const std::string p = w.tmp.file("flip.ckpt");
    spdtest::spit(p, bad);
    CHECK_THROWS_AS(load_checkpoint(p, cfg2, total2), DataError);
  }
}
