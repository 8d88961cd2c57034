// src/wav.cpp

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

#include "spd/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "spd/common.hpp"

namespace spd {

namespace {

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0] | b[1] << 8);
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SPD_DATA_CHECK(in.good(), "cannot open wav file: ", path);

  char tag[5] = {0};
  in.read(tag, 4);
  SPD_DATA_CHECK(in.good() && std::memcmp(tag, "RIFF", 4) == 0, "not a RIFF file: ", path);
  read_u32(in);  // riff size
  in.read(tag, 4);
  SPD_DATA_CHECK(in.good() && std::memcmp(tag, "WAVE", 4) == 0, "not a WAVE file: ", path);

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  Waveform w;

  while (in.read(tag, 4)) {
    const uint32_t chunk_size = read_u32(in);
    SPD_DATA_CHECK(in.good(), "truncated wav chunk header: ", path);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      SPD_DATA_CHECK(chunk_size >= 16, "fmt chunk too small in ", path);
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      in.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      SPD_DATA_CHECK(have_fmt, "data chunk before fmt in ", path);
      SPD_DATA_CHECK(format == 1, "unsupported wav encoding ", format, " (want 16-bit PCM) in ", path);
      SPD_DATA_CHECK(bits == 16, "unsupported sample width ", bits, " bits (want 16) in ", path);
      SPD_DATA_CHECK(channels == 1, "expected mono audio, got ", channels, " channels in ", path);
      SPD_DATA_CHECK(rate == uint32_t(kSampleRate), "expected ", kSampleRate, " Hz audio, got ",
                     rate, " Hz in ", path);
      const uint32_t n = chunk_size / 2;
      std::vector<unsigned char> raw(chunk_size);
      in.read(reinterpret_cast<char*>(raw.data()), chunk_size);
      SPD_DATA_CHECK(in.gcount() == std::streamsize(chunk_size), "truncated data chunk in ", path);
      w.samples.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        const int16_t s = int16_t(raw[2 * i] | raw[2 * i + 1] << 8);
        w.samples[i] = s / 32768.0;
      }
      return w;
    } else {
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  throw DataError(util::str("no data chunk found in ", path));
}

void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  SPD_DATA_CHECK(out.good(), "cannot write wav file: ", path);

  const uint32_t data_bytes = uint32_t(w.samples.size()) * 2;
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, kSampleRate);
  write_u32(out, kSampleRate * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (double v : w.samples) {
    double c = v < -1.0 ? -1.0 : (v > 1.0 ? 1.0 : v);
    const int16_t s = int16_t(std::lrint(c * 32767.0));
    write_u16(out, uint16_t(s));
  }
  SPD_DATA_CHECK(out.good(), "failed while writing wav file: ", path);
}

}  // namespace spd
