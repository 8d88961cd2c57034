// tests/test_grad.cpp

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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"

using spdtest::GradArm;
using spdtest::GradReport;

// Every student parameter element is centrally differenced against the
// analytic backward pass for both backbone styles and all three
// utterance-loss variants.

TEST_CASE("standard/token gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"standard", "token", 1});
  CAPTURE(r.worst_name);
  CAPTURE(r.n_checked);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("standard/chunk gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"standard", "chunk", 3});
  CAPTURE(r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("standard/global gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"standard", "global", 0});
  CAPTURE(r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("mae/token gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"mae_decoder", "token", 1});
  CAPTURE(r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("mae/chunk gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"mae_decoder", "chunk", 3});
  CAPTURE(r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("mae/global gradients match finite differences") {
  const GradReport r = spdtest::check_arm_gradients({"mae_decoder", "global", 0});
  CAPTURE(r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}
