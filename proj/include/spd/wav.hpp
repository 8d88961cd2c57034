// include/spd/wav.hpp

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

#ifndef SPD_WAV_HPP_
#define SPD_WAV_HPP_

#include <string>
#include <vector>

namespace spd {

constexpr int kSampleRate = 16000;

// Mono waveform, samples in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int n() const { return static_cast<int>(samples.size()); }
};

// Reads a RIFF/WAVE file. Accepts only 16-bit PCM, mono, 16 kHz; anything
// else raises DataError naming the offending property.
Waveform read_wav(const std::string& path);

// Writes 16-bit PCM mono at 16 kHz. Samples are clamped to [-1, 1].
void write_wav(const std::string& path, const Waveform& w);

}  // namespace spd

#endif  // SPD_WAV_HPP_
