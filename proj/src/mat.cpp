// src/mat.cpp

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

#include "spd/mat.hpp"

#include <cmath>
#include <cstring>

#include "spd/common.hpp"

namespace spd {

Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

bool all_finite(const Mat& a) {
  for (double v : a.d)
    if (!std::isfinite(v)) return false;
  return true;
}

uint64_t mat_checksum(const Mat& a) {
  uint64_t h = util::fnv1a(&a.rows, sizeof(a.rows));
  h = util::fnv1a(&a.cols, sizeof(a.cols), h);
  if (!a.d.empty()) h = util::fnv1a(a.d.data(), a.d.size() * sizeof(double), h);
  return h;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) return INFINITY;
  double m = 0.0;
  for (size_t i = 0; i < a.d.size(); ++i) m = std::max(m, std::fabs(a.d[i] - b.d[i]));
  return m;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) return false;
  if (a.d.empty()) return true;
  return std::memcmp(a.d.data(), b.d.data(), a.d.size() * sizeof(double)) == 0;
}

}  // namespace spd
