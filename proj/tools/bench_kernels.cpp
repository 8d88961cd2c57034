// tools/bench_kernels.cpp

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

// Times each kernel in the serial reference lane against the OpenMP lane on
// model-shaped inputs and checks that the outputs agree bitwise.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "spd/kernels.hpp"
#include "spd/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using spd::Conv1dSpec;
using spd::Mat;

namespace {

Mat random_mat(int rows, int cols, spd::Rng& r) {
  Mat m;
  m.resize(rows, cols);
  for (size_t i = 0; i < m.size(); ++i) m.d[i] = r.normal();
  return m;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm the caches and fault the pages
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

int failures = 0;

void row(const std::string& name, const std::string& shape, double serial_ms, double omp_ms,
         bool same) {
  if (!same) ++failures;
  std::printf("%-22s %-26s %10.3f %10.3f %7.2fx  %s\n", name.c_str(), shape.c_str(), serial_ms,
              omp_ms, serial_ms / omp_ms, same ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
  const int reps = 20;
  spd::Rng rng(7);

#ifdef _OPENMP
  std::printf("OpenMP lane: %d threads\n", omp_get_max_threads());
#else
  std::printf("OpenMP lane: compiled without OpenMP\n");
#endif
  std::printf("%-22s %-26s %10s %10s %8s\n", "kernel", "shape", "serial ms", "omp ms",
              "speedup");

  {
    const Mat a = random_mat(256, 256, rng), b = random_mat(256, 256, rng);
    Mat cs, cp;
    const double ts = time_ms([&] { spd::refk::matmul(a, b, cs); }, reps);
    const double tp = time_ms([&] { spd::kernels::matmul(a, b, cp); }, reps);
    row("matmul", "256x256 * 256x256", ts, tp, spd::bitwise_equal(cs, cp));
  }
  {
    const Mat a = random_mat(256, 192, rng), b = random_mat(256, 160, rng);
    Mat cs, cp;
    const double ts = time_ms([&] { spd::refk::matmul_tn(a, b, cs); }, reps);
    const double tp = time_ms([&] { spd::kernels::matmul_tn(a, b, cp); }, reps);
    row("matmul_tn", "(256x192)^T * 256x160", ts, tp, spd::bitwise_equal(cs, cp));
  }
  {
    const Mat a = random_mat(256, 192, rng), b = random_mat(160, 192, rng);
    Mat cs, cp;
    const double ts = time_ms([&] { spd::refk::matmul_nt(a, b, cs); }, reps);
    const double tp = time_ms([&] { spd::kernels::matmul_nt(a, b, cp); }, reps);
    row("matmul_nt", "256x192 * (160x192)^T", ts, tp, spd::bitwise_equal(cs, cp));
  }
  {
    Conv1dSpec spec{1, 32, 10, 5, 0, 1};
    const Mat x = random_mat(48000, 1, rng);
    const Mat w = random_mat(10, 32, rng);
    const Mat bias = random_mat(1, 32, rng);
    Mat ys, yp;
    const double ts = time_ms([&] { spd::refk::conv1d(x, w, bias, spec, ys); }, reps);
    const double tp = time_ms([&] { spd::kernels::conv1d(x, w, bias, spec, yp); }, reps);
    row("conv1d (wave)", "48000x1, k10 s5 -> 32ch", ts, tp, spd::bitwise_equal(ys, yp));
  }
  {
    Conv1dSpec spec{48, 48, 19, 1, 9, 16};
    const Mat x = random_mat(1500, 48, rng);
    const Mat w = random_mat((48 / 16) * 19, 48, rng);
    const Mat bias = random_mat(1, 48, rng);
    Mat ys, yp;
    const double ts = time_ms([&] { spd::refk::conv1d(x, w, bias, spec, ys); }, reps);
    const double tp = time_ms([&] { spd::kernels::conv1d(x, w, bias, spec, yp); }, reps);
    row("conv1d (pos)", "1500x48, k19 g16", ts, tp, spd::bitwise_equal(ys, yp));
  }
  {
    Conv1dSpec spec{32, 48, 3, 2, 0, 1};
    const Mat x = random_mat(3000, 32, rng);
    const Mat w = random_mat(32 * 3, 48, rng);
    const Mat bias = random_mat(1, 48, rng);
    Mat y;
    spd::kernels::conv1d(x, w, bias, spec, y);
    const Mat dy = random_mat(y.rows, y.cols, rng);
    Mat dxs, dws, dbs, dxp, dwp, dbp;
    const double ts =
        time_ms([&] { spd::refk::conv1d_backward(x, w, spec, dy, dxs, dws, dbs); }, reps);
    const double tp =
        time_ms([&] { spd::kernels::conv1d_backward(x, w, spec, dy, dxp, dwp, dbp); }, reps);
    row("conv1d_backward", "3000x32, k3 s2 -> 48ch", ts, tp,
        spd::bitwise_equal(dxs, dxp) && spd::bitwise_equal(dws, dwp) &&
            spd::bitwise_equal(dbs, dbp));
  }
  {
    const Mat x = random_mat(2000, 48, rng);
    const Mat g = random_mat(1, 48, rng), b = random_mat(1, 48, rng);
    Mat ys, yp, xhs, xhp;
    std::vector<double> iss, isp;
    const double ts = time_ms([&] { spd::refk::layer_norm(x, g, b, 1e-5, ys, xhs, iss); }, reps);
    const double tp =
        time_ms([&] { spd::kernels::layer_norm(x, g, b, 1e-5, yp, xhp, isp); }, reps);
    row("layer_norm", "2000x48", ts, tp, spd::bitwise_equal(ys, yp));
  }
  {
    const Mat x = random_mat(2000, 2000, rng);
    Mat ys, yp;
    const double ts = time_ms([&] { spd::refk::softmax_rows(x, ys); }, reps);
    const double tp = time_ms([&] { spd::kernels::softmax_rows(x, yp); }, reps);
    row("softmax_rows", "2000x2000", ts, tp, spd::bitwise_equal(ys, yp));
  }
  {
    const Mat x = random_mat(2000, 384, rng);
    Mat ys, yp;
    const double ts = time_ms([&] { spd::refk::gelu(x, ys); }, reps);
    const double tp = time_ms([&] { spd::kernels::gelu(x, yp); }, reps);
    row("gelu", "2000x384", ts, tp, spd::bitwise_equal(ys, yp));
  }

  if (failures > 0) {
    std::printf("%d kernel(s) disagreed between lanes\n", failures);
    return 1;
  }
  return 0;
}
