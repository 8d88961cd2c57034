// src/corpus.cpp

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

#include "spd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "spd/common.hpp"
#include "spd/rng.hpp"

namespace spd {

namespace {
constexpr double kTwoPi = 6.2831853071795864769;
constexpr double kBandWidth = 50.0;   // Hz
constexpr double kBandSpacing = 90.0; // Hz between band starts
constexpr double kAmDepth = 0.6;
constexpr int kHarmonics = 3;
}  // namespace

double synth_band_lo(int cls) { return 140.0 + kBandSpacing * cls; }

Manifest synthesize_corpus(const SynthSpec& spec, const std::string& out_dir) {
  SPD_DATA_CHECK(spec.n_utts > 0, "n_utts must be positive");
  SPD_DATA_CHECK(spec.n_classes >= 2, "need at least 2 classes, got ", spec.n_classes);
  SPD_DATA_CHECK(spec.n_speakers > 0 && spec.n_sessions > 0, "need speakers and sessions");
  SPD_DATA_CHECK(spec.min_dur > 0 && spec.max_dur >= spec.min_dur, "bad duration range");

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "wav");

  // Balanced label deal, then shuffle so labels do not track the
  // speaker/session cycles below.
  std::vector<int> labels(spec.n_utts);
  for (int i = 0; i < spec.n_utts; ++i) labels[i] = i % spec.n_classes;
  Rng label_rng(derive_seed(spec.seed, "labels"));
  label_rng.shuffle(labels);

  // Per-speaker harmonic weights; the fundamental stays dominant so the
  // corpus remains separable by pitch alone.
  std::vector<std::vector<double>> spk_weights(spec.n_speakers);
  for (int s = 0; s < spec.n_speakers; ++s) {
    Rng r(derive_seed(spec.seed, "speaker", uint64_t(s)));
    std::vector<double> w(kHarmonics);
    w[0] = 1.0;
    for (int h = 1; h < kHarmonics; ++h) w[h] = r.uniform(0.2, 0.5);
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& v : w) v /= sum;
    spk_weights[s] = std::move(w);
  }

  Manifest m;
  for (int i = 0; i < spec.n_utts; ++i) {
    Rng r(derive_seed(spec.seed, "utt", uint64_t(i)));
    const int cls = labels[i];
    const int spk = i % spec.n_speakers;
    const int ses = i % spec.n_sessions;

    const double dur = r.uniform(spec.min_dur, spec.max_dur);
    const int n = int(std::lrint(dur * kSampleRate));
    const double f0 = r.uniform(synth_band_lo(cls), synth_band_lo(cls) + kBandWidth);
    const double am_rate = 1.5 + 2.0 * cls;
    const double am_phase = r.uniform(0.0, kTwoPi);
    const double gain = r.uniform(0.3, 0.9);
    std::vector<double> phase(kHarmonics);
    for (int h = 0; h < kHarmonics; ++h) phase[h] = r.uniform(0.0, kTwoPi);
    const std::vector<double>& w = spk_weights[spk];

    Waveform wav;
    wav.samples.resize(n);
    for (int t = 0; t < n; ++t) {
      const double tt = double(t) / kSampleRate;
      double tone = 0.0;
      for (int h = 0; h < kHarmonics; ++h)
        tone += w[h] * std::sin(kTwoPi * (h + 1) * f0 * tt + phase[h]);
      const double am = (1.0 + kAmDepth * std::sin(kTwoPi * am_rate * tt + am_phase)) /
                        (1.0 + kAmDepth);
      wav.samples[t] = gain * am * tone + r.normal(0.0, spec.noise_std);
    }

    char id[32];
    std::snprintf(id, sizeof id, "utt%05d", i);
    const std::string rel = util::str("wav/", id, ".wav");
    write_wav((fs::path(out_dir) / rel).string(), wav);

    UtteranceRecord rec;
    rec.id = id;
    rec.audio = rel;
    rec.n_samples = n;
    rec.label = util::str("c", cls);
    rec.speaker = util::str("spk", spk < 10 ? "0" : "", spk);
    rec.session = util::str("ses", ses);
    rec.lang = "syn";
    m.utterances.push_back(std::move(rec));
  }

  for (int c = 0; c < spec.n_classes; ++c) m.label_set.push_back(util::str("c", c));
  save_manifest((fs::path(out_dir) / "manifest.tsv").string(), m);

  // Reload so audio paths are resolved exactly as consumers will see them.
  return load_manifest((fs::path(out_dir) / "manifest.tsv").string());
}

int dft_peak_class(const Waveform& w, int n_classes) {
  const int n = std::min(w.n(), kSampleRate / 2);
  SPD_DATA_CHECK(n > 0, "empty waveform");
  const double f_lo = synth_band_lo(0) - 20.0;
  const double f_hi = synth_band_lo(n_classes - 1) + kBandWidth + 20.0;

  double best_f = f_lo, best_p = -1.0;
  for (double f = f_lo; f <= f_hi; f += 1.0) {
    // Goertzel power at frequency f.
    const double k = kTwoPi * f / kSampleRate;
    const double coeff = 2.0 * std::cos(k);
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (int t = 0; t < n; ++t) {
      s0 = w.samples[t] + coeff * s1 - s2;
      s2 = s1;
      s1 = s0;
    }
    const double p = s1 * s1 + s2 * s2 - coeff * s1 * s2;
    if (p > best_p) {
      best_p = p;
      best_f = f;
    }
  }

  int best_c = 0;
  double best_d = 1e300;
  for (int c = 0; c < n_classes; ++c) {
    const double center = synth_band_lo(c) + kBandWidth / 2;
    const double d = std::abs(best_f - center);
    if (d < best_d) {
      best_d = d;
      best_c = c;
    }
  }
  return best_c;
}

std::vector<Batch> make_batches(const Manifest& m, long long sample_budget, uint64_t seed,
                                int epoch) {
  SPD_DATA_CHECK(sample_budget > 0, "sample budget must be positive");
  std::vector<int> order(m.size());
  std::iota(order.begin(), order.end(), 0);
  Rng r(derive_seed(seed, "batch", uint64_t(epoch)));
  r.shuffle(order);

  std::vector<Batch> batches;
  for (int idx : order) {
    const long long len = m.utterances[idx].n_samples;
    SPD_DATA_CHECK(len <= sample_budget, "utterance '", m.utterances[idx].id, "' has ", len,
                   " samples, more than the batch budget ", sample_budget);
    bool placed = false;
    for (auto& b : batches) {
      if (b.total_samples + len <= sample_budget) {
        b.indices.push_back(idx);
        b.total_samples += len;
        placed = true;
        break;
      }
    }
    if (!placed) {
      Batch b;
      b.indices.push_back(idx);
      b.total_samples = len;
      batches.push_back(std::move(b));
    }
  }
  return batches;
}

const Waveform& CorpusCache::get(int idx) {
  auto it = cache_.find(idx);
  if (it != cache_.end()) return it->second;
  const UtteranceRecord& rec = m_.utterances.at(idx);
  Waveform w = read_wav(rec.audio);
  SPD_DATA_CHECK(w.n() == rec.n_samples, "utterance '", rec.id, "': manifest says ",
                 rec.n_samples, " samples but file has ", w.n());
  return cache_.emplace(idx, std::move(w)).first->second;
}

}  // namespace spd
