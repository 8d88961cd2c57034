// include/spd/params.hpp

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

#ifndef SPD_PARAMS_HPP_
#define SPD_PARAMS_HPP_

#include <cstdint>
#include <map>
#include <string>

#include "spd/mat.hpp"

namespace spd {

// Named tensors, ordered by name. Iteration order is the canonical
// flattening order used by gradient checks and checkpoints.
using Parameters = std::map<std::string, Mat>;

// Zero tensors with the same names and shapes.
Parameters zeros_like(const Parameters& p);

// Accumulates src into dst, adding missing entries. Shapes must agree.
void accumulate(Parameters& dst, const Parameters& src);

size_t total_elements(const Parameters& p);
uint64_t params_checksum(const Parameters& p);
bool params_bitwise_equal(const Parameters& a, const Parameters& b);

}  // namespace spd

#endif  // SPD_PARAMS_HPP_
