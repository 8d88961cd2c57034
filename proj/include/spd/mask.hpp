// include/spd/mask.hpp

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

#ifndef SPD_MASK_HPP_
#define SPD_MASK_HPP_

#include <vector>

#include "spd/rng.hpp"

namespace spd {

// Frame indices hidden from the student. Sorted, unique, within [0, n_frames).
struct MaskSpec {
  std::vector<int> indices;
  double p = 0.0;
  int l = 1;

  int m() const { return static_cast<int>(indices.size()); }
  bool empty() const { return indices.empty(); }
  bool contains(int i) const;
};

// Each index is independently a span start with probability p; a span covers
// the next min(l, n_frames - i) frames; overlaps merge.
MaskSpec sample_mask(int n_frames, double p, int l, Rng& rng);

// Expected masked fraction of the rule above, by exact per-index probability.
double expected_mask_fraction(int n_frames, double p, int l);

}  // namespace spd

#endif  // SPD_MASK_HPP_
