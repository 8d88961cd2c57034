// src/params.cpp

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

#include "spd/params.hpp"

#include <cassert>

#include "spd/common.hpp"

namespace spd {

Parameters zeros_like(const Parameters& p) {
  Parameters z;
  for (const auto& [name, m] : p) {
    Mat zm;
    zm.resize(m.rows, m.cols);
    z.emplace(name, std::move(zm));
  }
  return z;
}

void accumulate(Parameters& dst, const Parameters& src) {
  for (const auto& [name, m] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, m);
      continue;
    }
    assert(it->second.same_shape(m));
    for (size_t i = 0; i < m.size(); ++i) it->second.d[i] += m.d[i];
  }
}

size_t total_elements(const Parameters& p) {
  size_t n = 0;
  for (const auto& [name, m] : p) n += m.size();
  return n;
}

uint64_t params_checksum(const Parameters& p) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, m] : p) {
    h = util::fnv1a(name.data(), name.size(), h);
    const uint64_t mh = mat_checksum(m);
    h = util::fnv1a(&mh, sizeof mh, h);
  }
  return h;
}

bool params_bitwise_equal(const Parameters& a, const Parameters& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (!bitwise_equal(ia->second, ib->second)) return false;
  }
  return true;
}

}  // namespace spd
