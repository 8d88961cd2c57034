// include/spd/rng.hpp

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

#ifndef SPD_RNG_HPP
#define SPD_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace spd {

// splitmix64 step; used to fan a master seed out into named sub-streams.
inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives a child seed from (seed, tag, indices...). Same inputs always give
// the same child seed, so every random decision in a run can be re-created
// from the master seed alone (no RNG state needs to be checkpointed).
inline uint64_t derive_seed(uint64_t seed, const std::string& tag) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : tag) { h ^= c; h *= 0x100000001b3ull; }
  uint64_t x = seed ^ h;
  return splitmix64(x);
}

inline uint64_t derive_seed(uint64_t seed, const std::string& tag, uint64_t a) {
  uint64_t x = derive_seed(seed, tag) ^ (a * 0x9e3779b97f4a7c15ull + 0x165667b19e3779f9ull);
  return splitmix64(x);
}

inline uint64_t derive_seed(uint64_t seed, const std::string& tag, uint64_t a, uint64_t b) {
  uint64_t x = derive_seed(seed, tag, a) ^ (b * 0xd6e8feb86659fd93ull + 1);
  return splitmix64(x);
}

// Deterministic RNG. std::mt19937_64 output is pinned by the standard; the
// distributions below are implemented by hand because the std:: distribution
// objects are implementation-defined and would break bit-level reproducibility
// across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is < 2^-53 for the n used here.
  uint64_t uniform_int(uint64_t n) { return eng_() % n; }

  // Box-Muller without caching so each draw consumes a fixed number of
  // engine steps.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace spd

#endif  // SPD_RNG_HPP
