// include/spd/probe.hpp

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

#ifndef SPD_PROBE_HPP_
#define SPD_PROBE_HPP_

#include <string>
#include <vector>

#include "spd/config.hpp"
#include "spd/corpus.hpp"
#include "spd/model.hpp"

namespace spd {

// Frozen features for every utterance in the manifest, in manifest order.
struct FeatureDump {
  std::vector<std::string> ids;
  std::vector<Mat> frames;  // one [N_z x d] array per utterance
  Mat pooled;               // n_utts x d, time-mean of frames
  std::string layer_agg;    // last | top_k_mean | last4_mean
  int d = 0;
  uint64_t source = 0;  // checksum of the parameters the features came from
};

// Mask-free, token-free forward through the frozen backbone; per-layer
// outputs reduced per layer_agg, pooled vector = time-mean.
FeatureDump extract_frozen_features(const Parameters& student, const ModelConfig& cfg,
                                    const Manifest& m, CorpusCache& cache,
                                    const std::string& layer_agg);

// Directory with index.tsv plus one binary array file per utterance.
void save_features(const std::string& dir, const FeatureDump& f);
FeatureDump load_features(const std::string& dir);

struct Fold {
  std::vector<int> train, val, test;  // positions in the manifest
};

struct SplitPlan {
  std::vector<Fold> folds;
  std::string scheme;  // session | speaker | random
  uint64_t seed = 0;
};

// session: one fold per session (test = that session, val = 20% of the rest,
// k ignored). speaker: speakers dealt round-robin into k groups; fold i tests
// group i and validates group i+1. random: k disjoint test chunks of a seeded
// shuffle, val = 10% of the labeled set. Unlabeled utterances are skipped.
SplitPlan make_split(const Manifest& m, const std::string& scheme, int k, uint64_t seed);

struct MetricsReport {
  double wa = 0.0;   // percent
  double ua = 0.0;   // percent
  double wf1 = 0.0;  // percent
  std::vector<std::vector<long long>> confusion;  // [true][pred]
  long long n_test = 0;
};

// WA = accuracy; UA = mean per-class recall over classes present in y_true;
// WF1 = support-weighted mean per-class F1. All in percent.
MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                              int n_classes);

struct ProbeConfig {
  std::string head = "linear";  // linear | gru
  int hidden = 32;
  int epochs = 100;
  int patience = 10;
  double lr = 1e-3;
  int batch = 32;
  double weight_decay = 0.0;
  bool val_equals_test = false;  // early-stop and score on the same ids
  uint64_t seed = 1;

  static ProbeConfig from_config(const Config& c);
  void validate() const;
};

// Trains one head per fold on frozen features (linear on pooled vectors, gru
// on frame sequences), early-stops on validation WA, and scores the test set
// with the best weights. Inputs are standardized with training-fold
// statistics.
std::vector<MetricsReport> train_probe(const FeatureDump& f, const Manifest& m,
                                       const SplitPlan& split, const ProbeConfig& pc);

// Per-fold rows plus mean and population std per metric.
std::string render_report_tsv(const std::vector<MetricsReport>& reports);
std::string render_report_text(const std::vector<MetricsReport>& reports);

// Convenience for the mean-WA comparisons the evaluation workflows make.
double mean_wa(const std::vector<MetricsReport>& reports);

}  // namespace spd

#endif  // SPD_PROBE_HPP_
