// tests/test_distill.cpp

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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "spd/common.hpp"
#include "spd/corpus.hpp"
#include "spd/distill.hpp"
#include "spd/mask.hpp"
#include "spd/model.hpp"
#include "testutil.hpp"

using namespace spd;
using spdtest::rand_mat;
using spdtest::TempDir;

namespace {

MaskSpec mask_of(std::vector<int> idx) {
  MaskSpec m;
  m.indices = std::move(idx);
  m.p = 0.5;
  m.l = 5;
  return m;
}

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

// Mirrors the planning arithmetic in pretrain().
long long plan_opt_steps(const Manifest& m, const Config& cfg,
                         std::vector<std::vector<Batch>>* plan_out = nullptr) {
  const TrainConfig tc = TrainConfig::from_config(cfg);
  long long total_batches = 0;
  std::vector<std::vector<Batch>> plan;
  for (int e = 0; e < tc.epochs; ++e) {
    plan.push_back(make_batches(m, tc.sample_budget, tc.seed, e));
    total_batches += (long long)plan.back().size();
  }
  if (plan_out) *plan_out = std::move(plan);
  return (total_batches + tc.update_freq - 1) / tc.update_freq;
}

}  // namespace

// ---------------------------------------------------------------- masking --

TEST_CASE("sample_mask degenerate probabilities") {
  Rng r0(1);
  CHECK(sample_mask(37, 0.0, 5, r0).empty());

  Rng r1(1);
  const MaskSpec all = sample_mask(10, 1.0, 5, r1);
  REQUIRE(all.m() == 10);
  for (int i = 0; i < 10; ++i) CHECK(all.indices[size_t(i)] == i);
}

TEST_CASE("sample_mask output is sorted, unique, and in range") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + int(rng.uniform_int(120));
    const int l = 1 + int(rng.uniform_int(7));
    const double p = rng.uniform();
    Rng mr(rng.bits());
    const MaskSpec m = sample_mask(n, p, l, mr);
    CHECK(std::is_sorted(m.indices.begin(), m.indices.end()));
    CHECK(std::adjacent_find(m.indices.begin(), m.indices.end()) == m.indices.end());
    for (int i : m.indices) {
      CHECK(i >= 0);
      CHECK(i < n);
    }
    CHECK(m.m() == int(m.indices.size()));
  }
}

TEST_CASE("a test-local replay of the span rule reproduces sample_mask exactly") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 5 + int(rng.uniform_int(100));
    const int l = 1 + int(rng.uniform_int(6));
    const double p = 0.1 + 0.8 * rng.uniform();
    const uint64_t seed = rng.bits();

    Rng a(seed);
    const MaskSpec got = sample_mask(n, p, l, a);

    Rng b(seed);
    std::set<int> want;
    for (int i = 0; i < n; ++i)
      if (b.uniform() < p)
        for (int j = i; j < std::min(i + l, n); ++j) want.insert(j);

    REQUIRE(got.m() == int(want.size()));
    CHECK(std::equal(got.indices.begin(), got.indices.end(), want.begin()));
  }
}

TEST_CASE("expected_mask_fraction closed form at the quoted point") {
  // n=100, p=0.5, l=5: four ramp-up indices, then 1 - 0.5^5 each.
  CHECK(expected_mask_fraction(100, 0.5, 5) == doctest::Approx(0.960625).epsilon(1e-15));
  CHECK(expected_mask_fraction(10, 0.0, 5) == 0.0);
  CHECK(expected_mask_fraction(10, 1.0, 5) == 1.0);
}

TEST_CASE("Monte-Carlo masked fraction stays within 0.02 of the closed form") {
  const int n = 100, trials = 10000;
  for (double p : {0.3, 0.5}) {
    for (int l : {3, 5}) {
      CAPTURE(p);
      CAPTURE(l);
      Rng rng(derive_seed(17, "mask_mc", uint64_t(l)));
      double frac_sum = 0.0;
      for (int t = 0; t < trials; ++t) frac_sum += double(sample_mask(n, p, l, rng).m()) / n;
      const double mc = frac_sum / trials;
      CHECK(std::fabs(mc - expected_mask_fraction(n, p, l)) < 0.02);
    }
  }
}

// ----------------------------------------------------------------- losses --

TEST_CASE("loss_frame reads only the masked rows") {
  Rng rng(4);
  const Mat ys = rand_mat(rng, 6, 5);
  const Mat yt = rand_mat(rng, 6, 5);
  const MaskSpec m = mask_of({0, 2, 5});

  const FrameLoss got = loss_frame(ys, yt, m);
  CHECK(!got.empty);

  double want = 0.0;
  for (int t : m.indices)
    for (int j = 0; j < 5; ++j) want += (ys(t, j) - yt(t, j)) * (ys(t, j) - yt(t, j));
  want /= double(m.m() * 5);
  CHECK(got.value == doctest::Approx(want).epsilon(1e-14));

  // Perturbing any unmasked row of either side leaves the value bitwise.
  Mat ys2 = ys, yt2 = yt;
  for (int t : {1, 3, 4}) {
    for (int j = 0; j < 5; ++j) {
      ys2(t, j) += 100.0;
      yt2(t, j) -= 3.0;
    }
  }
  CHECK(loss_frame(ys2, yt2, m).value == got.value);

  // Matching masked rows, arbitrary elsewhere: exact zero.
  Mat same = yt;
  for (int t : {1, 3, 4})
    for (int j = 0; j < 5; ++j) same(t, j) += 9.0;
  const FrameLoss zero = loss_frame(same, yt, m);
  CHECK(zero.value == 0.0);
}

TEST_CASE("loss_frame empty mask signals instead of dividing by zero") {
  Rng rng(5);
  const Mat ys = rand_mat(rng, 4, 3);
  const Mat yt = rand_mat(rng, 4, 3);
  const FrameLoss fl = loss_frame(ys, yt, mask_of({}));
  CHECK(fl.empty);
  CHECK(fl.value == 0.0);
}

TEST_CASE("loss_frame worked example over rows 0 and 2") {
  Mat ys(4, 2), yt(4, 2);
  ys(0, 0) = 1; ys(0, 1) = 2; ys(2, 0) = -1; ys(2, 1) = 0;
  yt(0, 0) = 0; yt(0, 1) = 4; yt(2, 0) = 1; yt(2, 1) = 1;
  ys(1, 0) = 50; yt(3, 1) = -50;  // ignored rows
  // ((1)^2 + (2)^2 + (2)^2 + (1)^2) / 4 = 2.5
  CHECK(loss_frame(ys, yt, mask_of({0, 2})).value == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("loss_frame and loss_utterance reject shape mismatches") {
  Mat a(3, 4), b(4, 4), c(3, 5);
  CHECK_THROWS_AS(loss_frame(a, b, mask_of({0})), DataError);
  CHECK_THROWS_AS(loss_frame(a, c, mask_of({0})), DataError);
  Mat u(1, 4), v(1, 5);
  CHECK_THROWS_AS(loss_utterance(u, v), DataError);
}

TEST_CASE("loss_utterance is the dimension-mean MSE") {
  Mat u(1, 4), v(1, 4);
  u(0, 0) = 1.0; u(0, 1) = -2.0; u(0, 2) = 0.5; u(0, 3) = 3.0;
  v = u;
  CHECK(loss_utterance(u, v) == 0.0);

  for (int j = 0; j < 4; ++j) v(0, j) = u(0, j) + 0.25;  // uniform offset c -> c^2
  CHECK(loss_utterance(u, v) == doctest::Approx(0.0625).epsilon(1e-14));

  Rng rng(6);
  Mat x = rand_mat(rng, 1, 4), y = rand_mat(rng, 1, 4);
  double want = 0.0;
  for (int j = 0; j < 4; ++j) want += (x(0, j) - y(0, j)) * (x(0, j) - y(0, j));
  CHECK(loss_utterance(x, y) == doctest::Approx(want / 4.0).epsilon(1e-14));
}

TEST_CASE("utterance_pool implements the three variants") {
  Rng rng(7);
  const int d = 6;
  StudentOutput out;
  out.frames = rand_mat(rng, 9, d);
  const Mat yt = rand_mat(rng, 9, d);

  // Teacher side is always the time mean.
  Mat want_yt(1, d);
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int t = 0; t < 9; ++t) s += yt(t, j);
    want_yt(0, j) = s / 9.0;
  }

  SUBCASE("token returns the single row unchanged") {
    out.utt = rand_mat(rng, 1, d);
    Mat us, yb;
    utterance_pool(out, yt, "token", us, yb);
    CHECK(bitwise_equal(us, out.utt));
    CHECK(spdtest::max_rel_err(yb, want_yt) < 1e-12);
  }
  SUBCASE("chunk averages the token rows") {
    out.utt = rand_mat(rng, 8, d);
    Mat us, yb;
    utterance_pool(out, yt, "chunk", us, yb);
    // Independent mean with reversed summation order.
    Mat want(1, d);
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int r = 7; r >= 0; --r) s += out.utt(r, j);
      want(0, j) = s / 8.0;
    }
    CHECK(spdtest::max_rel_err(us, want) < 1e-6);
    CHECK(spdtest::max_rel_err(us, want) < 1e-12);  // and in fact much tighter
  }
  SUBCASE("global pools the frame outputs") {
    out.utt = Mat(0, 0);
    Mat us, yb;
    utterance_pool(out, yt, "global", us, yb);
    Mat want(1, d);
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int t = 0; t < 9; ++t) s += out.frames(t, j);
      want(0, j) = s / 9.0;
    }
    CHECK(spdtest::max_rel_err(us, want) < 1e-12);
  }
  SUBCASE("constant teacher rows pool to that row exactly") {
    Mat flat(9, d);
    for (int t = 0; t < 9; ++t)
      for (int j = 0; j < d; ++j) flat(t, j) = 0.5 * j - 1.0;
    out.utt = rand_mat(rng, 1, d);
    Mat us, yb;
    utterance_pool(out, flat, "token", us, yb);
    for (int j = 0; j < d; ++j) CHECK(yb(0, j) == doctest::Approx(0.5 * j - 1.0).epsilon(1e-15));
  }
  SUBCASE("variant and token-count mismatches are rejected") {
    out.utt = rand_mat(rng, 2, d);
    Mat us, yb;
    CHECK_THROWS_AS(utterance_pool(out, yt, "token", us, yb), UsageError);
    out.utt = Mat(0, 0);
    CHECK_THROWS_AS(utterance_pool(out, yt, "chunk", us, yb), UsageError);
    out.utt = rand_mat(rng, 1, d);
    CHECK_THROWS_AS(utterance_pool(out, yt, "global", us, yb), UsageError);
    CHECK_THROWS_AS(utterance_pool(out, yt, "sideways", us, yb), UsageError);
  }
}

TEST_CASE("variant consistency: matched statistics give zero utterance loss") {
  // Constant frames shared by teacher and student: every variant pools to
  // the same vector, so l_utt vanishes for all three. Quarter-integer values
  // keep every partial sum of the means exact in floating point.
  const int d = 5;
  Mat flat(8, d);
  for (int t = 0; t < 8; ++t)
    for (int j = 0; j < d; ++j) flat(t, j) = 0.25 * j;
  for (const std::string variant : {"token", "chunk", "global"}) {
    CAPTURE(variant);
    StudentOutput out;
    out.frames = flat;
    const int n_u = variant == "token" ? 1 : (variant == "chunk" ? 4 : 0);
    out.utt = Mat(n_u, d);
    for (int r = 0; r < n_u; ++r)
      for (int j = 0; j < d; ++j) out.utt(r, j) = 0.25 * j;
    Mat us, yb;
    utterance_pool(out, flat, variant, us, yb);
    CHECK(loss_utterance(us, yb) == 0.0);
  }
}

TEST_CASE("total_loss combines the terms exactly") {
  CHECK(total_loss(0.5, 0.25, 1.0).total == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(total_loss(0.0, 0.1, 10.0).total == doctest::Approx(1.0).epsilon(1e-15));

  // alpha = 0 drops the utterance term entirely.
  const LossBreakdown z = total_loss(0.37, 123.0, 0.0);
  CHECK(z.total == 0.37);

  // Affine in l_utt with slope alpha.
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const double lf = rng.uniform(0, 3);
    const double lu = rng.uniform(0, 3);
    const double a = rng.uniform(0, 10);
    const LossBreakdown lb = total_loss(lf, lu, a);
    CHECK(lb.total == lf + a * lu);
    CHECK(lb.l_frm == lf);
    CHECK(lb.l_utt == lu);
    CHECK(lb.alpha == a);
    const LossBreakdown lb2 = total_loss(lf, lu + 1.0, a);
    CHECK(lb2.total - lb.total == doctest::Approx(a).epsilon(1e-12));
  }
}

// -------------------------------------------------------------- schedules --

TEST_CASE("tau schedule hits its endpoints exactly and is linear between") {
  EmaSchedule s;
  s.tau_start = 0.999;
  s.tau_end = 0.99999;
  s.total_steps = 10;
  CHECK(tau_at_step(s, 0) == 0.999);
  CHECK(tau_at_step(s, 10) == 0.99999);
  CHECK(tau_at_step(s, 5) == doctest::Approx(0.999495).epsilon(1e-15));
  CHECK(tau_at_step(s, 12) == 0.99999);  // clamped past the end
  for (int t = 0; t < 10; ++t) CHECK(tau_at_step(s, t) <= tau_at_step(s, t + 1));
  CHECK_THROWS_AS(tau_at_step(s, -1), DataError);

  s.total_steps = 0;  // degenerate schedule pins the start value
  CHECK(tau_at_step(s, 0) == 0.999);
}

TEST_CASE("lr schedule ramps to the peak and decays to zero") {
  const double peak = 7.5e-5;
  const long long total = 100;
  const double frac = 0.05;
  const long long w = 5;  // llround(0.05 * 100)

  CHECK(lr_at_step(0, total, peak, frac) == 0.0);
  CHECK(lr_at_step(w, total, peak, frac) == peak);
  CHECK(lr_at_step(total, total, peak, frac) == 0.0);

  // Linear ramp.
  CHECK(lr_at_step(2, total, peak, frac) == doctest::Approx(peak * 2.0 / 5.0).epsilon(1e-15));

  // Cosine after warmup, checked mid-span against the closed form.
  const long long mid = (w + total) / 2;
  const double want =
      peak * 0.5 * (1.0 + std::cos(M_PI * double(mid - w) / double(total - w)));
  CHECK(lr_at_step(mid, total, peak, frac) == doctest::Approx(want).epsilon(1e-12));

  for (long long t = w; t < total; ++t)
    CHECK(lr_at_step(t, total, peak, frac) >= lr_at_step(t + 1, total, peak, frac));

  // One-step schedule still ends at zero.
  CHECK(lr_at_step(1, 1, peak, frac) == 0.0);
}

// -------------------------------------------------------------------- ema --

namespace {

Parameters toy_params(double bb_val, double fe_val) {
  Parameters p;
  Mat bb(1, 1), fe(1, 1);
  bb(0, 0) = bb_val;
  fe(0, 0) = fe_val;
  p["bb.block0.w"] = bb;
  p["fe.conv0.w"] = fe;
  return p;
}

}  // namespace

TEST_CASE("ema_update scalar oracle: backbone interpolates, extractor copies") {
  Parameters teacher = toy_params(2.0, 2.0);
  const Parameters student = toy_params(4.0, 4.0);
  ema_update(teacher, student, 0.5);
  CHECK(teacher.at("bb.block0.w")(0, 0) == 3.0);
  CHECK(teacher.at("fe.conv0.w")(0, 0) == 4.0);
}

TEST_CASE("ema_update tau=1 freezes the backbone but still copies the extractor") {
  Parameters teacher = toy_params(2.0, 2.0);
  ema_update(teacher, toy_params(4.0, 4.0), 1.0);
  CHECK(teacher.at("bb.block0.w")(0, 0) == 2.0);
  CHECK(teacher.at("fe.conv0.w")(0, 0) == 4.0);
}

TEST_CASE("ema_update tau=0 collapses the teacher onto the student") {
  ModelConfig cfg;
  cfg.d_feat = 6;
  cfg.d_model = 12;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ffn = 16;
  cfg.top_k = 2;
  cfg.utt_tokens = 2;
  Parameters teacher = init_parameters(cfg, 1);
  const Parameters student = init_parameters(cfg, 2);
  ema_update(teacher, student, 0.0);
  CHECK(params_bitwise_equal(teacher, student));
}

TEST_CASE("ema fixed point: an equal teacher stays bitwise equal") {
  ModelConfig cfg;
  cfg.d_feat = 5;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ffn = 10;
  cfg.top_k = 1;
  cfg.utt_tokens = 1;
  const Parameters student = init_parameters(cfg, 9);
  Parameters teacher = student;
  for (double tau : {0.0, 0.5, 0.937, 0.999, 1.0}) {
    ema_update(teacher, student, tau);
    CHECK(params_bitwise_equal(teacher, student));
  }
}

TEST_CASE("ema contraction: the backbone gap shrinks by tau elementwise") {
  Rng rng(10);
  Parameters teacher, student;
  teacher["bb.a"] = rand_mat(rng, 4, 5);
  teacher["fe.c"] = rand_mat(rng, 2, 3);
  student["bb.a"] = rand_mat(rng, 4, 5);
  student["fe.c"] = rand_mat(rng, 2, 3);
  const Parameters before = teacher;
  const double tau = 0.9;
  ema_update(teacher, student, tau);
  const Mat& t_new = teacher.at("bb.a");
  const Mat& t_old = before.at("bb.a");
  const Mat& s = student.at("bb.a");
  for (size_t i = 0; i < t_new.size(); ++i) {
    const double gap_new = std::fabs(t_new.d[i] - s.d[i]);
    const double gap_old = std::fabs(t_old.d[i] - s.d[i]);
    CHECK(gap_new <= tau * gap_old * (1.0 + 1e-12) + 1e-300);
  }
  CHECK(bitwise_equal(teacher.at("fe.c"), student.at("fe.c")));
}

TEST_CASE("ema_update rejects mismatched parameter sets") {
  Parameters teacher = toy_params(1.0, 1.0);
  Parameters student = toy_params(1.0, 1.0);
  student["bb.extra"] = Mat(1, 1);
  CHECK_THROWS_AS(ema_update(teacher, student, 0.5), DataError);
}

// ---------------------------------------------------------------- trainer --

TEST_CASE("train config validation rejects bad settings") {
  const ModelConfig mc = ModelConfig::from_config(Config::preset("tiny"));
  TrainConfig t = TrainConfig::from_config(Config::preset("tiny"));
  t.validate(mc);  // baseline is fine

  TrainConfig bad = t;
  bad.utt_variant = "token";  // tiny has utt_tokens = 2
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  bad = t;
  bad.loss_mode = "sometimes";
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  bad = t;
  bad.mask_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  bad = t;
  bad.warmup_frac = 0.0;
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  bad = t;
  bad.tau_start = 0.9999;
  bad.tau_end = 0.99;
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  bad = t;
  bad.alpha = -0.5;
  CHECK_THROWS_AS(bad.validate(mc), UsageError);

  // frm_only ignores the utterance variant entirely.
  bad = t;
  bad.loss_mode = "frm_only";
  bad.utt_variant = "token";
  bad.validate(mc);
}

TEST_CASE("a zero learning rate freezes both networks") {
  TempDir tmp("freeze");
  const Manifest m = make_corpus(tmp, 8);
  Config cfg = train_cfg();
  cfg.set("train.lr", "0");
  cfg.set("train.epochs", "1");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer tr(cfg, total);
  const Parameters student0 = tr.state().student;
  CorpusCache cache(m);
  for (const Batch& b : plan[0]) tr.train_step(b, m, cache, false);

  CHECK(params_bitwise_equal(tr.state().student, student0));
  CHECK(params_bitwise_equal(tr.state().teacher, student0));
}

TEST_CASE("the teacher starts as a copy and the trainer counts steps") {
  TempDir tmp("ctor");
  const Manifest m = make_corpus(tmp, 6);
  Config cfg = train_cfg();
  cfg.set("train.epochs", "1");
  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer tr(cfg, total);
  CHECK(params_bitwise_equal(tr.state().student, tr.state().teacher));
  CHECK(tr.state().opt_steps == 0);
  CHECK(tr.current_tau() == 0.999);  // schedule start

  CorpusCache cache(m);
  long long done = 0;
  for (const Batch& b : plan[0]) {
    tr.train_step(b, m, cache, false);
    ++done;
    CHECK(tr.state().batches_done == done);
    CHECK(tr.state().opt_steps == done);  // update_freq = 1
  }
}

TEST_CASE("two trainers over the same plan stay bitwise identical") {
  TempDir tmp("det");
  const Manifest m = make_corpus(tmp, 8);
  Config cfg = train_cfg();
  cfg.set("train.epochs", "2");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer a(cfg, total), b(cfg, total);
  CorpusCache ca(m), cb(m);
  for (const auto& epoch : plan)
    for (const Batch& batch : epoch) {
      const LossBreakdown la = a.train_step(batch, m, ca, false);
      const LossBreakdown lb = b.train_step(batch, m, cb, false);
      CHECK(la.total == lb.total);
      CHECK(la.l_frm == lb.l_frm);
      CHECK(la.l_utt == lb.l_utt);
    }
  CHECK(params_bitwise_equal(a.state().student, b.state().student));
  CHECK(params_bitwise_equal(a.state().teacher, b.state().teacher));
  CHECK(params_bitwise_equal(a.state().adam_m, b.state().adam_m));
  CHECK(params_bitwise_equal(a.state().adam_v, b.state().adam_v));
}

TEST_CASE("the teacher moves only through the scheduled ema") {
  TempDir tmp("firewall");
  const Manifest m = make_corpus(tmp, 6);
  Config cfg = train_cfg();
  cfg.set("train.epochs", "1");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer tr(cfg, total);
  CorpusCache cache(m);

  for (const Batch& b : plan[0]) {
    const Parameters teacher_before = tr.state().teacher;
    const double tau = tr.current_tau();
    tr.train_step(b, m, cache, false);
    // Replaying ema_update by hand on the snapshot reproduces the new
    // teacher exactly, so gradients cannot have touched it.
    Parameters expect = teacher_before;
    ema_update(expect, tr.state().student, tau);
    CHECK(params_bitwise_equal(expect, tr.state().teacher));
  }
}

TEST_CASE("gradient accumulation defers updates to the boundary") {
  TempDir tmp("accum");
  const Manifest m = make_corpus(tmp, 8);
  Config cfg = train_cfg();
  cfg.set("train.epochs", "1");
  cfg.set("train.update_freq", "2");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer tr(cfg, total);
  CorpusCache cache(m);
  const Parameters init = tr.state().student;

  REQUIRE(plan[0].size() >= 2);
  tr.train_step(plan[0][0], m, cache, false);
  // Mid-accumulation: nothing applied yet.
  CHECK(params_bitwise_equal(tr.state().student, init));
  CHECK(params_bitwise_equal(tr.state().teacher, init));
  CHECK(tr.state().opt_steps == 0);
  CHECK(!tr.at_update_boundary());

  tr.train_step(plan[0][1], m, cache, false);
  CHECK(!params_bitwise_equal(tr.state().student, init));
  CHECK(tr.state().opt_steps == 1);
  CHECK(tr.at_update_boundary());

  // A final partial group flushes.
  if (plan[0].size() % 2 == 1) {
    for (size_t i = 2; i < plan[0].size(); ++i)
      tr.train_step(plan[0][i], m, cache, i + 1 == plan[0].size());
    CHECK(tr.at_update_boundary());
    CHECK(tr.state().opt_steps == ((long long)plan[0].size() + 1) / 2);
  }
}

TEST_CASE("loss modes gate the terms and keep the total affine") {
  TempDir tmp("modes");
  const Manifest m = make_corpus(tmp, 6);

  auto first_loss = [&](const std::string& mode, const std::string& variant, int tokens) {
    Config cfg = train_cfg();
    cfg.set("train.epochs", "1");
    cfg.set("train.loss_mode", mode);
    cfg.set("train.utt_variant", variant);
    cfg.set("model.utt_tokens", std::to_string(tokens));
    std::vector<std::vector<Batch>> plan;
    const long long total = plan_opt_steps(m, cfg, &plan);
    Trainer tr(cfg, total);
    CorpusCache cache(m);
    return tr.train_step(plan[0][0], m, cache, false);
  };

  const LossBreakdown both = first_loss("both", "chunk", 2);
  const LossBreakdown frm = first_loss("frm_only", "chunk", 2);
  const LossBreakdown utt = first_loss("utt_only", "chunk", 2);

  CHECK(both.total == both.l_frm + both.alpha * both.l_utt);
  CHECK(frm.l_utt == 0.0);
  CHECK(frm.total == frm.l_frm);
  CHECK(utt.l_frm == 0.0);
  CHECK(utt.total == utt.alpha * utt.l_utt);

  // Same seed, same masks: the frame term agrees across modes at step one.
  CHECK(both.l_frm == frm.l_frm);
  CHECK(both.l_utt == utt.l_utt);

  // The global variant runs without any utterance tokens.
  const LossBreakdown glob = first_loss("both", "global", 0);
  CHECK(glob.l_utt > 0.0);
}

TEST_CASE("mask probability endpoints propagate through a training step") {
  TempDir tmp("maskends");
  const Manifest m = make_corpus(tmp, 6);

  Config cfg = train_cfg();
  cfg.set("train.epochs", "1");
  cfg.set("train.mask_prob", "0");
  std::vector<std::vector<Batch>> plan;
  long long total = plan_opt_steps(m, cfg, &plan);
  Trainer a(cfg, total);
  CorpusCache ca(m);
  const LossBreakdown la = a.train_step(plan[0][0], m, ca, false);
  CHECK(la.empty_mask);
  CHECK(la.l_frm == 0.0);
  CHECK(la.l_utt > 0.0);

  cfg = train_cfg();
  cfg.set("train.epochs", "1");
  cfg.set("train.mask_prob", "1");
  total = plan_opt_steps(m, cfg, &plan);
  Trainer b(cfg, total);
  CorpusCache cb(m);
  const LossBreakdown lb = b.train_step(plan[0][0], m, cb, false);
  CHECK(!lb.empty_mask);
  CHECK(lb.l_frm > 0.0);
}

TEST_CASE("fifty steps of training beat the first ten on a small corpus") {
  TempDir tmp("descent");
  SynthSpec s;
  s.n_utts = 20;
  s.n_classes = 4;
  s.n_speakers = 4;
  s.n_sessions = 2;
  s.min_dur = 0.5;
  s.max_dur = 0.8;
  s.seed = 6;
  const Manifest m = synthesize_corpus(s, tmp.path());

  Config cfg = train_cfg();
  cfg.set("train.epochs", "10");
  cfg.set("train.sample_budget", "24000");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer tr(cfg, total);
  CorpusCache cache(m);
  std::vector<double> losses;
  for (const auto& epoch : plan)
    for (const Batch& b : epoch) {
      if (losses.size() >= 50) break;
      losses.push_back(tr.train_step(b, m, cache, false).total);
    }
  REQUIRE(losses.size() >= 50);
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  CHECK(tail < head);
}

TEST_CASE("non-finite values abort with the utterance named") {
  TempDir tmp("nan");
  const Manifest m = make_corpus(tmp, 4);
  Config cfg = train_cfg();
  cfg.set("train.epochs", "1");

  std::vector<std::vector<Batch>> plan;
  const long long total = plan_opt_steps(m, cfg, &plan);
  Trainer good(cfg, total);

  // Poison one student tensor and resume from that state.
  TrainerState st = good.state();
  st.student.begin()->second.d[0] = std::numeric_limits<double>::quiet_NaN();
  Trainer bad(cfg, total, std::move(st));
  CorpusCache cache(m);
  const std::string first_id = m.utterances[size_t(plan[0][0].indices[0])].id;
  CHECK_THROWS_WITH_AS(bad.train_step(plan[0][0], m, cache, false),
                       doctest::Contains(first_id.c_str()), NumericError);
}
