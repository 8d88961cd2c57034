// include/spd/distill.hpp

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

#ifndef SPD_DISTILL_HPP_
#define SPD_DISTILL_HPP_

#include <iosfwd>
#include <string>
#include <vector>

#include "spd/config.hpp"
#include "spd/corpus.hpp"
#include "spd/mask.hpp"
#include "spd/model.hpp"

namespace spd {

struct LossBreakdown {
  double l_frm = 0.0;
  double l_utt = 0.0;
  double alpha = 1.0;
  double total = 0.0;
  bool empty_mask = false;
};

struct FrameLoss {
  double value = 0.0;
  bool empty = false;  // no masked frames, value forced to 0
};

// MSE over masked rows and all dimensions; unmasked rows never enter.
FrameLoss loss_frame(const Mat& ys, const Mat& yt, const MaskSpec& mask);

// MSE over dimensions of two pooled vectors (1 x d).
double loss_utterance(const Mat& us_bar, const Mat& yt_bar);

// Pools per the variant: teacher side is always the time-mean of yt; student
// side is the mean of the utterance rows (token, chunk) or the time-mean of
// the frame outputs (global).
void utterance_pool(const StudentOutput& out, const Mat& yt, const std::string& variant,
                    Mat& us_bar, Mat& yt_bar);

LossBreakdown total_loss(double l_frm, double l_utt, double alpha);

struct EmaSchedule {
  double tau_start = 0.999;
  double tau_end = 0.99999;
  long long total_steps = 1;
};

// Linear in step, clamped to the endpoints.
double tau_at_step(const EmaSchedule& sched, long long step);

// Linear ramp 0 -> lr_peak over the warmup fraction, then cosine decay to 0.
double lr_at_step(long long step, long long total_steps, double lr_peak, double warmup_frac);

// Backbone arrays move by tau; extractor arrays ("fe.*") are copied outright.
void ema_update(Parameters& teacher, const Parameters& student, double tau);

struct TrainConfig {
  std::string utt_variant = "chunk";  // token | chunk | global
  std::string loss_mode = "both";     // both | frm_only | utt_only
  double alpha = 1.0;
  double lr_peak = 1e-3;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
  double mask_prob = 0.5;
  int mask_len = 5;
  double tau_start = 0.999;
  double tau_end = 0.99999;
  double clip_norm = 0.0;  // 0 = no clipping
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  int epochs = 20;
  long long sample_budget = 300000;
  int update_freq = 1;
  uint64_t seed = 1;
  long long save_every = 0;  // batches between checkpoints; 0 = final only
  long long log_every = 1;

  static TrainConfig from_config(const Config& c);
  void validate(const ModelConfig& mc) const;
};

struct TrainerState {
  Parameters student;
  Parameters teacher;
  Parameters adam_m;
  Parameters adam_v;
  long long opt_steps = 0;     // completed optimizer updates
  long long batches_done = 0;  // completed batches across all epochs
};

// Versioned binary container: config text, step counters, and the four
// parameter sections, little-endian with a checksum footer. Round-trips
// bit-exactly.
void save_checkpoint(const std::string& path, const Config& cfg, const TrainerState& st,
                     long long total_opt_steps);
TrainerState load_checkpoint(const std::string& path, Config& cfg_out,
                             long long& total_opt_steps_out);

class Trainer {
 public:
  // Fresh start: initializes student and copies it into the teacher.
  Trainer(const Config& cfg, long long total_opt_steps);
  // Resume from a loaded state.
  Trainer(const Config& cfg, long long total_opt_steps, TrainerState st);

  // Runs teacher/student forwards, losses, and a gradient step for one
  // batch. Updates are applied every update_freq batches (or when flush is
  // set); the EMA teacher moves after every update. Deterministic given the
  // training seed and the global batch index.
  LossBreakdown train_step(const Batch& batch, const Manifest& m, CorpusCache& cache,
                           bool flush);

  const TrainerState& state() const { return state_; }
  // tau/lr the next optimizer update will use; logged alongside each step.
  double current_tau() const;
  double current_lr() const;
  bool at_update_boundary() const { return accum_batches_ == 0; }

 private:
  void apply_update();

  ModelConfig mcfg_;
  TrainConfig tcfg_;
  TrainerState state_;
  long long total_opt_steps_ = 1;
  Parameters pending_grads_;
  int accum_batches_ = 0;
};

// Drives batches over epochs and writes loss_log.tsv plus checkpoints under
// out_dir. Resumes from resume_path when given (config is taken from the
// checkpoint). Returns the final checkpoint path.
std::string pretrain(const Manifest& m, const Config& cfg, const std::string& out_dir,
                     const std::string& resume_path = "");

}  // namespace spd

#endif  // SPD_DISTILL_HPP_
