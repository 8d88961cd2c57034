// src/kernels.cpp

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

#include "spd/kernels.hpp"

#include <cassert>
#include <cmath>

namespace spd::kernels {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

void matmul(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.rows);
  c.resize(a.rows, b.cols);
  const int m = a.rows, k = a.cols, n = b.cols;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c.row(i);
    const double* ai = a.row(i);
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b.row(kk);
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

void matmul_tn(const Mat& a, const Mat& b, Mat& c) {
  assert(a.rows == b.rows);
  c.resize(a.cols, b.cols);
  const int t = a.rows, m = a.cols, n = b.cols;
  // summation over t; parallel over output rows so each element keeps the
  // ascending-t order
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c.row(i);
    for (int tt = 0; tt < t; ++tt) {
      const double av = a(tt, i);
      const double* bt = b.row(tt);
      for (int j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

void matmul_nt(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.cols);
  // materializing b^T keeps the vectorizable i-k-j loop; the per-element
  // summation order (ascending k) matches the reference lane's dot products
  Mat bt = transpose(b);
  matmul(a, bt, c);
}

void add_bias(Mat& y, const Mat& bias) {
  assert(bias.rows == 1 && bias.cols == y.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < y.rows; ++i) {
    double* yi = y.row(i);
    for (int j = 0; j < y.cols; ++j) yi[j] += bias(0, j);
  }
}

void col_sums(const Mat& x, Mat& out) {
  out.resize(1, x.cols);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < x.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < x.rows; ++i) acc += x(i, j);
    out(0, j) = acc;
  }
}

namespace {

// gathers one group's windows: row t holds x[t*stride + k - pad, ci] for
// ci_local-major, k-minor ordering; out-of-range samples are zero
void im2col_group(const Mat& x, const Conv1dSpec& s, int group, int t_out, Mat& cols) {
  const int in_g = s.in_ch / s.groups;
  const int ci0 = group * in_g;
  cols.resize(t_out, in_g * s.kernel);
  for (int t = 0; t < t_out; ++t) {
    double* r = cols.row(t);
    const int base = t * s.stride - s.pad;
    for (int ci = 0; ci < in_g; ++ci) {
      for (int k = 0; k < s.kernel; ++k) {
        const int ti = base + k;
        r[ci * s.kernel + k] = (ti >= 0 && ti < x.rows) ? x(ti, ci0 + ci) : 0.0;
      }
    }
  }
}

}  // namespace

void conv1d(const Mat& x, const Mat& w, const Mat& bias, const Conv1dSpec& s, Mat& y) {
  assert(x.cols == s.in_ch);
  assert(w.rows == (s.in_ch / s.groups) * s.kernel && w.cols == s.out_ch);
  const int t_out = conv_out_len(x.rows, s);
  y.resize(t_out, s.out_ch);
  if (t_out == 0) return;
  const int out_g = s.out_ch / s.groups;
  Mat cols, yg;
  if (s.groups == 1) {
    im2col_group(x, s, 0, t_out, cols);
    matmul(cols, w, y);
  } else {
    for (int g = 0; g < s.groups; ++g) {
      im2col_group(x, s, g, t_out, cols);
      Mat wg(w.rows, out_g);
      for (int r = 0; r < w.rows; ++r)
        for (int j = 0; j < out_g; ++j) wg(r, j) = w(r, g * out_g + j);
      matmul(cols, wg, yg);
      for (int t = 0; t < t_out; ++t)
        for (int j = 0; j < out_g; ++j) y(t, g * out_g + j) = yg(t, j);
    }
  }
  if (!bias.empty()) add_bias(y, bias);
}

void conv1d_backward(const Mat& x, const Mat& w, const Conv1dSpec& s, const Mat& dy,
                     Mat& dx, Mat& dw, Mat& db) {
  const int t_out = dy.rows;
  const int in_g = s.in_ch / s.groups;
  const int out_g = s.out_ch / s.groups;
  dx.resize(x.rows, x.cols);
  dw.resize(w.rows, w.cols);
  db.resize(1, s.out_ch);

  col_sums(dy, db);

  // dw = im2col^T * dy, per group
  Mat cols, dyg, dwg;
  for (int g = 0; g < s.groups; ++g) {
    im2col_group(x, s, g, t_out, cols);
    dyg.resize(t_out, out_g);
    for (int t = 0; t < t_out; ++t)
      for (int j = 0; j < out_g; ++j) dyg(t, j) = dy(t, g * out_g + j);
    matmul_tn(cols, dyg, dwg);
    for (int r = 0; r < w.rows; ++r)
      for (int j = 0; j < out_g; ++j) dw(r, g * out_g + j) = dwg(r, j);
  }

  // dx in gather form: every input position sums its own contributions, so
  // the loop is race-free under the parallel for
#pragma omp parallel for schedule(static)
  for (int ti = 0; ti < x.rows; ++ti) {
    for (int g = 0; g < s.groups; ++g) {
      for (int ci = 0; ci < in_g; ++ci) {
        double acc = 0.0;
        // t*stride + k - pad == ti  =>  k = ti + pad - t*stride in [0, kernel)
        int t_lo = (ti + s.pad - (s.kernel - 1));
        t_lo = t_lo <= 0 ? 0 : (t_lo + s.stride - 1) / s.stride;
        int t_hi = (ti + s.pad) / s.stride;
        if (t_hi >= t_out) t_hi = t_out - 1;
        for (int t = t_lo; t <= t_hi; ++t) {
          const int k = ti + s.pad - t * s.stride;
          const double* wrow = w.row(ci * s.kernel + k);
          const double* dyt = dy.row(t);
          for (int j = 0; j < out_g; ++j) acc += dyt[g * out_g + j] * wrow[g * out_g + j];
        }
        dx(ti, g * in_g + ci) = acc;
      }
    }
  }
}

void layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, Mat& y,
                Mat& xhat, std::vector<double>& inv_std) {
  const int n = x.cols;
  y.resize(x.rows, n);
  xhat.resize(x.rows, n);
  inv_std.assign(x.rows, 0.0);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xi[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dv = xi[j] - mean;
      var += dv * dv;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[i] = istd;
    double* xh = xhat.row(i);
    double* yi = y.row(i);
    for (int j = 0; j < n; ++j) {
      xh[j] = (xi[j] - mean) * istd;
      yi[j] = gain(0, j) * xh[j] + bias(0, j);
    }
  }
}

void layer_norm_backward(const Mat& dy, const Mat& xhat, const std::vector<double>& inv_std,
                         const Mat& gain, Mat& dx, Mat& dgain, Mat& dbias) {
  const int n = dy.cols;
  dx.resize(dy.rows, n);
  dgain.resize(1, n);
  dbias.resize(1, n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyi = dy.row(i);
    const double* xh = xhat.row(i);
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxh = dyi[j] * gain(0, j);
      m1 += dxh;
      m2 += dxh * xh[j];
    }
    m1 /= n;
    m2 /= n;
    double* dxi = dx.row(i);
    for (int j = 0; j < n; ++j) {
      const double dxh = dyi[j] * gain(0, j);
      dxi[j] = inv_std[i] * (dxh - m1 - xh[j] * m2);
    }
  }
#pragma omp parallel for schedule(static)
  for (int j = 0; j < n; ++j) {
    double ag = 0.0, ab = 0.0;
    for (int i = 0; i < dy.rows; ++i) {
      ag += dy(i, j) * xhat(i, j);
      ab += dy(i, j);
    }
    dgain(0, j) = ag;
    dbias(0, j) = ab;
  }
}

void instance_norm_time(const Mat& x, double eps, Mat& y) {
  y.resize(x.rows, x.cols);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < x.cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < x.rows; ++i) mean += x(i, j);
    mean /= x.rows;
    double var = 0.0;
    for (int i = 0; i < x.rows; ++i) {
      const double dv = x(i, j) - mean;
      var += dv * dv;
    }
    var /= x.rows;
    const double istd = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < x.rows; ++i) y(i, j) = (x(i, j) - mean) * istd;
  }
}

void softmax_rows(const Mat& x, Mat& y) {
  y.resize(x.rows, x.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mx = xi[0];
    for (int j = 1; j < x.cols; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    double* yi = y.row(i);
    for (int j = 0; j < x.cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < x.cols; ++j) yi[j] *= inv;
  }
}

void softmax_rows_backward(const Mat& dy, const Mat& y, Mat& dx) {
  dx.resize(dy.rows, dy.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyi = dy.row(i);
    const double* yi = y.row(i);
    double dot = 0.0;
    for (int j = 0; j < dy.cols; ++j) dot += dyi[j] * yi[j];
    double* dxi = dx.row(i);
    for (int j = 0; j < dy.cols; ++j) dxi[j] = yi[j] * (dyi[j] - dot);
  }
}

void gelu(const Mat& x, Mat& y) {
  y.resize(x.rows, x.cols);
  const size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    const double v = x.d[i];
    y.d[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
}

void gelu_backward(const Mat& dy, const Mat& x, Mat& dx) {
  dx.resize(x.rows, x.cols);
  const size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    const double v = x.d[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    dx.d[i] = dy.d[i] * (cdf + v * pdf);
  }
}

}  // namespace spd::kernels
