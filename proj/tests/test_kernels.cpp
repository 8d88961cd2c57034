// tests/test_kernels.cpp

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

#include <omp.h>

#include <cmath>
#include <functional>
#include <vector>

#include "spd/kernels.hpp"
#include "spd/mat.hpp"
#include "spd/rng.hpp"
#include "testutil.hpp"

using namespace spd;
using spdtest::rand_mat;

namespace {

// Independent dense oracle, plain i-j-k order.
Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Independent per-output-element convolution sum.
Mat naive_conv1d(const Mat& x, const Mat& w, const Mat& bias, const Conv1dSpec& s) {
  const int t_out = conv_out_len(x.rows, s);
  const int in_per_group = s.in_ch / s.groups;
  const int out_per_group = s.out_ch / s.groups;
  Mat y(t_out, s.out_ch);
  for (int t = 0; t < t_out; ++t)
    for (int co = 0; co < s.out_ch; ++co) {
      const int g = co / out_per_group;
      double acc = bias(0, co);
      for (int cl = 0; cl < in_per_group; ++cl)
        for (int k = 0; k < s.kernel; ++k) {
          const int xi = t * s.stride + k - s.pad;
          if (xi < 0 || xi >= x.rows) continue;
          acc += x(xi, g * in_per_group + cl) * w(cl * s.kernel + k, co);
        }
      y(t, co) = acc;
    }
  return y;
}

double weighted_sum(const Mat& y, const Mat& r) {
  double s = 0.0;
  for (size_t i = 0; i < y.size(); ++i) s += y.d[i] * r.d[i];
  return s;
}

// Central finite difference of loss(x) = sum(f(x) .* r) w.r.t. one element.
double fd_elem(Mat& x, size_t i, double h, const std::function<double()>& loss) {
  const double keep = x.d[i];
  x.d[i] = keep + h;
  const double lp = loss();
  x.d[i] = keep - h;
  const double lm = loss();
  x.d[i] = keep;
  return (lp - lm) / (2.0 * h);
}

void check_grad_mat(Mat& x, const Mat& analytic, double h, double tol,
                    const std::function<double()>& loss) {
  REQUIRE(x.size() == analytic.size());
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double fd = fd_elem(x, i, h, loss);
    worst = std::max(worst, spdtest::rel_err(analytic.d[i], fd, 1e-6));
  }
  CHECK(worst < tol);
}

}  // namespace

TEST_CASE("conv_out_len follows the floor recurrence") {
  CHECK(conv_out_len(16000, {1, 1, 10, 5, 0, 1}) == 3199);
  CHECK(conv_out_len(10, {1, 1, 3, 2, 0, 1}) == 4);
  CHECK(conv_out_len(10, {1, 1, 3, 2, 1, 1}) == 5);
  CHECK(conv_out_len(2, {1, 1, 3, 1, 0, 1}) == 0);
  CHECK(conv_out_len(3, {1, 1, 3, 1, 0, 1}) == 1);
  CHECK(conv_out_len(2, {1, 1, 3, 1, 1, 1}) == 2);
  CHECK(conv_out_len(7, {1, 1, 1, 3, 0, 1}) == 3);
}

TEST_CASE("matmul family matches a plain triple loop") {
  Rng rng(11);
  const Mat a = rand_mat(rng, 9, 14);
  const Mat b = rand_mat(rng, 14, 6);
  Mat c;
  kernels::matmul(a, b, c);
  CHECK(spdtest::max_rel_err(c, naive_matmul(a, b)) < 1e-12);

  const Mat at = transpose(a);  // matmul_tn(at, b) == a * b
  Mat ctn;
  kernels::matmul_tn(at, b, ctn);
  CHECK(spdtest::max_rel_err(ctn, naive_matmul(a, b)) < 1e-12);

  const Mat bt = transpose(b);
  Mat cnt;
  kernels::matmul_nt(a, bt, cnt);
  CHECK(spdtest::max_rel_err(cnt, naive_matmul(a, b)) < 1e-12);
}

TEST_CASE("add_bias and col_sums") {
  Rng rng(12);
  Mat y = rand_mat(rng, 5, 7);
  const Mat y0 = y;
  const Mat bias = rand_mat(rng, 1, 7);
  kernels::add_bias(y, bias);
  for (int i = 0; i < y.rows; ++i)
    for (int j = 0; j < y.cols; ++j) CHECK(y(i, j) == y0(i, j) + bias(0, j));

  Mat sums;
  kernels::col_sums(y, sums);
  REQUIRE(sums.rows == 1);
  REQUIRE(sums.cols == 7);
  for (int j = 0; j < y.cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < y.rows; ++i) s += y(i, j);
    CHECK(spdtest::rel_err(sums(0, j), s) < 1e-12);
  }
}

TEST_CASE("conv1d matches direct summation across stride, pad, and groups") {
  Rng rng(13);
  const std::vector<Conv1dSpec> specs = {
      {1, 4, 10, 5, 0, 1},   // waveform-style front layer
      {5, 4, 3, 2, 0, 1},    // strided mid layer
      {4, 6, 3, 1, 1, 1},    // same-pad
      {6, 6, 19, 1, 9, 3},   // grouped positional-style
      {4, 2, 7, 1, 3, 2},    // grouped, fewer outputs than inputs
  };
  for (const Conv1dSpec& s : specs) {
    CAPTURE(s.in_ch);
    CAPTURE(s.groups);
    const int t_in = 41;
    const Mat x = rand_mat(rng, t_in, s.in_ch);
    const Mat w = rand_mat(rng, (s.in_ch / s.groups) * s.kernel, s.out_ch);
    const Mat b = rand_mat(rng, 1, s.out_ch);
    Mat y;
    kernels::conv1d(x, w, b, s, y);
    const Mat want = naive_conv1d(x, w, b, s);
    REQUIRE(y.rows == want.rows);
    REQUIRE(y.cols == want.cols);
    CHECK(spdtest::max_rel_err(y, want, 1e-9) < 1e-12);
  }
}

TEST_CASE("conv1d on a worked example") {
  // x = [1 2 3 4], kernel [1 1], stride 2, bias 0.5 -> [3.5, 7.5]
  Mat x(4, 1);
  x(0, 0) = 1; x(1, 0) = 2; x(2, 0) = 3; x(3, 0) = 4;
  Mat w(2, 1);
  w(0, 0) = 1; w(1, 0) = 1;
  Mat b(1, 1);
  b(0, 0) = 0.5;
  Mat y;
  kernels::conv1d(x, w, b, {1, 1, 2, 2, 0, 1}, y);
  REQUIRE(y.rows == 2);
  CHECK(y(0, 0) == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(y(1, 0) == doctest::Approx(7.5).epsilon(1e-15));
}

TEST_CASE("conv1d_backward matches finite differences") {
  Rng rng(14);
  const std::vector<Conv1dSpec> specs = {
      {3, 4, 3, 2, 1, 1},
      {4, 4, 5, 1, 2, 2},
      {1, 3, 10, 5, 0, 1},
  };
  for (const Conv1dSpec& s : specs) {
    CAPTURE(s.kernel);
    Mat x = rand_mat(rng, 23, s.in_ch);
    Mat w = rand_mat(rng, (s.in_ch / s.groups) * s.kernel, s.out_ch);
    Mat b = rand_mat(rng, 1, s.out_ch);
    Mat y;
    kernels::conv1d(x, w, b, s, y);
    const Mat r = rand_mat(rng, y.rows, y.cols);

    Mat dx, dw, db;
    kernels::conv1d_backward(x, w, s, r, dx, dw, db);

    auto loss = [&]() {
      Mat yy;
      kernels::conv1d(x, w, b, s, yy);
      return weighted_sum(yy, r);
    };
    // The map is bilinear, so central differences are exact up to roundoff.
    check_grad_mat(x, dx, 1e-4, 1e-7, loss);
    check_grad_mat(w, dw, 1e-4, 1e-7, loss);
    check_grad_mat(b, db, 1e-4, 1e-7, loss);
  }
}

TEST_CASE("layer_norm normalizes each row and applies the affine terms") {
  Rng rng(15);
  const Mat x = rand_mat(rng, 6, 9, 2.0);
  const Mat g = rand_mat(rng, 1, 9);
  const Mat b = rand_mat(rng, 1, 9);
  Mat y, xhat;
  std::vector<double> inv_std;
  kernels::layer_norm(x, g, b, 1e-5, y, xhat, inv_std);
  REQUIRE(int(inv_std.size()) == x.rows);
  for (int i = 0; i < x.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < x.cols; ++j) mean += xhat(i, j);
    mean /= x.cols;
    for (int j = 0; j < x.cols; ++j) var += (xhat(i, j) - mean) * (xhat(i, j) - mean);
    var /= x.cols;
    CHECK(std::fabs(mean) < 1e-12);
    CHECK(std::fabs(var - 1.0) < 1e-4);  // eps shrinks the variance slightly
    for (int j = 0; j < x.cols; ++j)
      CHECK(y(i, j) == doctest::Approx(xhat(i, j) * g(0, j) + b(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm_backward matches finite differences") {
  Rng rng(16);
  Mat x = rand_mat(rng, 5, 8);
  Mat g = rand_mat(rng, 1, 8);
  Mat b = rand_mat(rng, 1, 8);
  Mat y, xhat;
  std::vector<double> inv_std;
  kernels::layer_norm(x, g, b, 1e-5, y, xhat, inv_std);
  const Mat r = rand_mat(rng, 5, 8);

  Mat dx, dg, db;
  kernels::layer_norm_backward(r, xhat, inv_std, g, dx, dg, db);

  auto loss = [&]() {
    Mat yy, xh;
    std::vector<double> is;
    kernels::layer_norm(x, g, b, 1e-5, yy, xh, is);
    return weighted_sum(yy, r);
  };
  check_grad_mat(x, dx, 1e-5, 1e-5, loss);
  check_grad_mat(g, dg, 1e-5, 1e-5, loss);
  check_grad_mat(b, db, 1e-5, 1e-5, loss);
}

TEST_CASE("instance_norm_time normalizes each channel over time") {
  Rng rng(17);
  const Mat x = rand_mat(rng, 40, 6, 3.0);
  Mat y;
  kernels::instance_norm_time(x, 1e-5, y);
  for (int j = 0; j < x.cols; ++j) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < x.rows; ++i) mean += y(i, j);
    mean /= x.rows;
    for (int i = 0; i < x.rows; ++i) var += (y(i, j) - mean) * (y(i, j) - mean);
    var /= x.rows;
    CHECK(std::fabs(mean) < 1e-12);
    CHECK(std::fabs(var - 1.0) < 1e-4);
  }

  // Constant channel: zero variance, eps keeps it finite, output all zero.
  Mat c(7, 2);
  c.fill(3.25);
  Mat yc;
  kernels::instance_norm_time(c, 1e-5, yc);
  for (double v : yc.d) CHECK(v == 0.0);

  // Single frame degenerates the same way.
  Mat one(1, 3);
  one(0, 0) = 5.0; one(0, 1) = -2.0; one(0, 2) = 0.25;
  Mat yone;
  kernels::instance_norm_time(one, 1e-5, yone);
  for (double v : yone.d) CHECK(v == 0.0);
}

TEST_CASE("softmax_rows sums to one and is shift invariant") {
  Rng rng(18);
  const Mat x = rand_mat(rng, 7, 11, 4.0);
  Mat y;
  kernels::softmax_rows(x, y);
  for (int i = 0; i < y.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < y.cols; ++j) {
      CHECK(y(i, j) > 0.0);
      s += y(i, j);
    }
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }

  // Uniform row shifts cancel against the subtracted row max.
  Mat xs = x;
  for (int i = 0; i < xs.rows; ++i)
    for (int j = 0; j < xs.cols; ++j) xs(i, j) += 100.0;
  Mat ys;
  kernels::softmax_rows(xs, ys);
  CHECK(spdtest::max_rel_err(ys, y) < 1e-12);

  // Max subtraction keeps huge logits finite.
  Mat big(2, 3);
  big(0, 0) = 1e4; big(0, 1) = 1e4 - 3.0; big(0, 2) = -1e4;
  big(1, 0) = -1e4; big(1, 1) = -1e4; big(1, 2) = -1e4;
  Mat yb;
  kernels::softmax_rows(big, yb);
  CHECK(all_finite(yb));
  CHECK(yb(0, 0) > 0.9);
  CHECK(yb(1, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax_rows_backward matches finite differences") {
  Rng rng(19);
  Mat x = rand_mat(rng, 4, 6);
  Mat y;
  kernels::softmax_rows(x, y);
  const Mat r = rand_mat(rng, 4, 6);
  Mat dx;
  kernels::softmax_rows_backward(r, y, dx);

  auto loss = [&]() {
    Mat yy;
    kernels::softmax_rows(x, yy);
    return weighted_sum(yy, r);
  };
  check_grad_mat(x, dx, 1e-5, 1e-5, loss);
}

TEST_CASE("gelu matches the erf form and its backward matches finite differences") {
  Rng rng(20);
  Mat x = rand_mat(rng, 5, 9, 2.0);
  Mat y;
  kernels::gelu(x, y);
  for (size_t i = 0; i < x.size(); ++i) {
    const double v = x.d[i];
    const double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(spdtest::rel_err(y.d[i], want, 1e-12) < 1e-12);
  }
  Mat zero(1, 1);
  Mat yz;
  kernels::gelu(zero, yz);
  CHECK(yz(0, 0) == 0.0);

  const Mat r = rand_mat(rng, 5, 9);
  Mat dx;
  kernels::gelu_backward(r, x, dx);
  auto loss = [&]() {
    Mat yy;
    kernels::gelu(x, yy);
    return weighted_sum(yy, r);
  };
  check_grad_mat(x, dx, 1e-5, 1e-5, loss);
}

TEST_CASE("parallel and reference lanes agree bitwise at any thread count") {
  const int saved_threads = omp_get_max_threads();
  for (int threads : {1, 3}) {
    omp_set_num_threads(threads);
    CAPTURE(threads);
    Rng rng(21);

    {
      const Mat a = rand_mat(rng, 17, 23);
      const Mat b = rand_mat(rng, 23, 9);
      Mat c1, c2;
      kernels::matmul(a, b, c1);
      refk::matmul(a, b, c2);
      CHECK(bitwise_equal(c1, c2));

      const Mat at = transpose(a);
      kernels::matmul_tn(at, b, c1);
      refk::matmul_tn(at, b, c2);
      CHECK(bitwise_equal(c1, c2));

      const Mat bt = transpose(b);
      kernels::matmul_nt(a, bt, c1);
      refk::matmul_nt(a, bt, c2);
      CHECK(bitwise_equal(c1, c2));
    }
    {
      Mat y1 = rand_mat(rng, 12, 7);
      Mat y2 = y1;
      const Mat bias = rand_mat(rng, 1, 7);
      kernels::add_bias(y1, bias);
      refk::add_bias(y2, bias);
      CHECK(bitwise_equal(y1, y2));

      Mat s1, s2;
      kernels::col_sums(y1, s1);
      refk::col_sums(y1, s2);
      CHECK(bitwise_equal(s1, s2));
    }
    {
      const Conv1dSpec s{6, 6, 19, 1, 9, 3};
      const Mat x = rand_mat(rng, 33, s.in_ch);
      const Mat w = rand_mat(rng, (s.in_ch / s.groups) * s.kernel, s.out_ch);
      const Mat b = rand_mat(rng, 1, s.out_ch);
      Mat y1, y2;
      kernels::conv1d(x, w, b, s, y1);
      refk::conv1d(x, w, b, s, y2);
      CHECK(bitwise_equal(y1, y2));

      const Mat r = rand_mat(rng, y1.rows, y1.cols);
      Mat dx1, dw1, db1, dx2, dw2, db2;
      kernels::conv1d_backward(x, w, s, r, dx1, dw1, db1);
      refk::conv1d_backward(x, w, s, r, dx2, dw2, db2);
      CHECK(bitwise_equal(dx1, dx2));
      CHECK(bitwise_equal(dw1, dw2));
      CHECK(bitwise_equal(db1, db2));
    }
    {
      const Mat x = rand_mat(rng, 21, 13);
      const Mat g = rand_mat(rng, 1, 13);
      const Mat b = rand_mat(rng, 1, 13);
      Mat y1, xh1, y2, xh2;
      std::vector<double> is1, is2;
      kernels::layer_norm(x, g, b, 1e-5, y1, xh1, is1);
      refk::layer_norm(x, g, b, 1e-5, y2, xh2, is2);
      CHECK(bitwise_equal(y1, y2));
      CHECK(bitwise_equal(xh1, xh2));
      REQUIRE(is1.size() == is2.size());
      for (size_t i = 0; i < is1.size(); ++i) CHECK(is1[i] == is2[i]);

      const Mat r = rand_mat(rng, 21, 13);
      Mat dx1, dg1, db1, dx2, dg2, db2;
      kernels::layer_norm_backward(r, xh1, is1, g, dx1, dg1, db1);
      refk::layer_norm_backward(r, xh2, is2, g, dx2, dg2, db2);
      CHECK(bitwise_equal(dx1, dx2));
      CHECK(bitwise_equal(dg1, dg2));
      CHECK(bitwise_equal(db1, db2));
    }
    {
      const Mat x = rand_mat(rng, 29, 5);
      Mat y1, y2;
      kernels::instance_norm_time(x, 1e-5, y1);
      refk::instance_norm_time(x, 1e-5, y2);
      CHECK(bitwise_equal(y1, y2));
    }
    {
      const Mat x = rand_mat(rng, 15, 15, 3.0);
      Mat y1, y2;
      kernels::softmax_rows(x, y1);
      refk::softmax_rows(x, y2);
      CHECK(bitwise_equal(y1, y2));

      const Mat r = rand_mat(rng, 15, 15);
      Mat dx1, dx2;
      kernels::softmax_rows_backward(r, y1, dx1);
      refk::softmax_rows_backward(r, y2, dx2);
      CHECK(bitwise_equal(dx1, dx2));
    }
    {
      const Mat x = rand_mat(rng, 19, 11, 2.0);
      Mat y1, y2;
      kernels::gelu(x, y1);
      refk::gelu(x, y2);
      CHECK(bitwise_equal(y1, y2));

      const Mat r = rand_mat(rng, 19, 11);
      Mat dx1, dx2;
      kernels::gelu_backward(r, x, dx1);
      refk::gelu_backward(r, x, dx2);
      CHECK(bitwise_equal(dx1, dx2));
    }
  }
  omp_set_num_threads(saved_threads);
}
