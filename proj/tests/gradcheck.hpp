// tests/gradcheck.hpp

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

#ifndef SPD_TESTS_GRADCHECK_HPP_
#define SPD_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <string>

#include "spd/distill.hpp"
#include "spd/model.hpp"
#include "spd/params.hpp"
#include "spd/rng.hpp"

namespace spdtest {

struct GradArm {
  std::string style;    // standard | mae_decoder
  std::string variant;  // token | chunk | global
  int utt_tokens = 0;
};

struct GradReport {
  double worst_rel = 0.0;   // max over elements of |analytic - fd| / denom
  std::string worst_name;
  size_t n_checked = 0;
};

// Central finite differences of the combined distillation loss against
// student_backward, at a configuration small enough to difference every
// parameter element. The teacher is a frozen copy of the initial student,
// exactly as the trainer treats it within a step.
inline GradReport check_arm_gradients(const GradArm& arm, uint64_t seed = 31,
                                      double alpha = 0.7, double h = 5e-5) {
  using namespace spd;
  ModelConfig cfg;
  cfg.style = arm.style;
  cfg.d_feat = 5;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ffn = 10;
  cfg.top_k = 2;
  cfg.utt_tokens = arm.utt_tokens;
  cfg.decoder_dim = 6;
  cfg.decoder_layers = 2;
  cfg.decoder_kernel = 3;
  cfg.validate();

  Waveform w;
  w.samples.resize(1680);
  Rng wr(derive_seed(seed, "wave"));
  for (double& v : w.samples) v = 0.5 * wr.normal();

  MaskSpec mask;
  mask.indices = {1, 3};
  mask.p = 0.5;
  mask.l = 2;

  const uint64_t noise_seed = derive_seed(seed, "noise");
  Parameters params = init_parameters(cfg, seed);

  // Frozen teacher targets from the initial parameters.
  const Mat z0 = extract_features(w, params, cfg);
  const Mat yt = encode_teacher(z0, params, cfg, cfg.top_k);
  const int n_z = yt.rows;
  const int d = cfg.d_model;

  auto loss_at = [&](const Parameters& p) {
    const StudentOutput out = student_forward(w, mask, p, cfg, noise_seed, nullptr);
    const FrameLoss lf = loss_frame(out.frames, yt, mask);
    Mat us_bar, yt_bar;
    utterance_pool(out, yt, arm.variant, us_bar, yt_bar);
    const double lu = loss_utterance(us_bar, yt_bar);
    return total_loss(lf.value, lu, alpha).total;
  };

  // Analytic gradients via the student backward pass.
  StudentTrace tr;
  const StudentOutput out = student_forward(w, mask, params, cfg, noise_seed, &tr);
  Mat us_bar, yt_bar;
  utterance_pool(out, yt, arm.variant, us_bar, yt_bar);

  Mat d_frames(n_z, d);
  const double cf = 2.0 / (double(mask.m()) * d);
  for (int t : mask.indices)
    for (int j = 0; j < d; ++j) d_frames(t, j) = cf * (out.frames(t, j) - yt(t, j));
  Mat d_utt;
  const double cu = alpha * 2.0 / d;
  if (arm.variant == "global") {
    for (int t = 0; t < n_z; ++t)
      for (int j = 0; j < d; ++j)
        d_frames(t, j) += cu * (us_bar(0, j) - yt_bar(0, j)) / n_z;
  } else {
    d_utt.resize(cfg.utt_tokens, d);
    for (int r = 0; r < cfg.utt_tokens; ++r)
      for (int j = 0; j < d; ++j)
        d_utt(r, j) = cu * (us_bar(0, j) - yt_bar(0, j)) / cfg.utt_tokens;
  }
  Parameters grads = zeros_like(params);
  student_backward(tr, params, cfg, d_utt, d_frames, grads);

  GradReport rep;
  for (auto& [name, theta] : params) {
    const Mat& g = grads.at(name);
    for (size_t i = 0; i < theta.size(); ++i) {
      const double keep = theta.d[i];
      theta.d[i] = keep + h;
      const double lp = loss_at(params);
      theta.d[i] = keep - h;
      const double lm = loss_at(params);
      theta.d[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double denom = std::max(std::max(std::fabs(g.d[i]), std::fabs(fd)), 1e-3);
      const double rel = std::fabs(g.d[i] - fd) / denom;
      if (rel > rep.worst_rel) {
        rep.worst_rel = rel;
        rep.worst_name = name;
      }
      ++rep.n_checked;
    }
  }
  return rep;
}

}  // namespace spdtest

#endif  // SPD_TESTS_GRADCHECK_HPP_
