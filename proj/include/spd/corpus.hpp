// include/spd/corpus.hpp

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

#ifndef SPD_CORPUS_HPP_
#define SPD_CORPUS_HPP_

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "spd/manifest.hpp"
#include "spd/wav.hpp"

namespace spd {

struct SynthSpec {
  int n_utts = 400;
  int n_classes = 4;
  int n_speakers = 10;
  int n_sessions = 5;
  double min_dur = 0.5;   // seconds
  double max_dur = 3.0;
  double noise_std = 0.08;
  uint64_t seed = 1;
};

// Class c occupies the fundamental-frequency band [lo, lo + 50] Hz.
double synth_band_lo(int cls);

// Generates a labeled toy corpus of harmonic tones under out_dir: wav files
// plus manifest.tsv. Class identity sets the pitch band and an amplitude
// modulation rate; speakers differ in harmonic weights. Labels are dealt out
// balanced and then shuffled so they stay independent of the speaker and
// session cycles. Output is byte-identical for a given spec.
Manifest synthesize_corpus(const SynthSpec& spec, const std::string& out_dir);

// Assigns a class to a waveform by scanning for the dominant frequency over
// the synthesizer's pitch range in the first half second. Used as a ceiling
// reference: the generated corpus should be fully separable by this rule.
int dft_peak_class(const Waveform& w, int n_classes);

struct Batch {
  std::vector<int> indices;    // positions in the manifest
  long long total_samples = 0;
};

// Packs utterances into batches holding at most sample_budget samples in
// total, first-fit over a seeded shuffle. An utterance longer than the budget
// is an error. Every utterance lands in exactly one batch.
std::vector<Batch> make_batches(const Manifest& m, long long sample_budget, uint64_t seed,
                                int epoch);

// Lazily loads and keeps decoded waveforms, checking the sample count
// declared in the manifest.
class CorpusCache {
 public:
  explicit CorpusCache(const Manifest& m) : m_(m) {}
  const Waveform& get(int idx);

 private:
  const Manifest& m_;
  std::unordered_map<int, Waveform> cache_;
};

}  // namespace spd

#endif  // SPD_CORPUS_HPP_
