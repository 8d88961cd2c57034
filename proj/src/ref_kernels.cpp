// src/ref_kernels.cpp

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

// Serial reference lane. Straight-line loops, no OpenMP. Each output element
// is accumulated in the same order as in spd::kernels so the two lanes agree
// bit for bit.

#include <cassert>
#include <cmath>

#include "spd/kernels.hpp"

namespace spd::refk {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double sample_or_zero(const Mat& x, int t, int c) {
  return (t >= 0 && t < x.rows) ? x(t, c) : 0.0;
}
}  // namespace

void matmul(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.rows);
  c.resize(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
}

void matmul_tn(const Mat& a, const Mat& b, Mat& c) {
  assert(a.rows == b.rows);
  c.resize(a.cols, b.cols);
  for (int i = 0; i < a.cols; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (int t = 0; t < a.rows; ++t) acc += a(t, i) * b(t, j);
      c(i, j) = acc;
    }
}

void matmul_nt(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.cols);
  c.resize(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.rows; ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) acc += a(i, k) * b(j, k);
      c(i, j) = acc;
    }
}

void add_bias(Mat& y, const Mat& bias) {
  for (int i = 0; i < y.rows; ++i)
    for (int j = 0; j < y.cols; ++j) y(i, j) += bias(0, j);
}

void col_sums(const Mat& x, Mat& out) {
  out.resize(1, x.cols);
  for (int j = 0; j < x.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < x.rows; ++i) acc += x(i, j);
    out(0, j) = acc;
  }
}

void conv1d(const Mat& x, const Mat& w, const Mat& bias, const Conv1dSpec& s, Mat& y) {
  const int t_out = conv_out_len(x.rows, s);
  const int in_g = s.in_ch / s.groups;
  const int out_g = s.out_ch / s.groups;
  y.resize(t_out, s.out_ch);
  for (int t = 0; t < t_out; ++t) {
    const int base = t * s.stride - s.pad;
    for (int co = 0; co < s.out_ch; ++co) {
      const int g = co / out_g;
      double acc = 0.0;
      for (int ci = 0; ci < in_g; ++ci)
        for (int k = 0; k < s.kernel; ++k)
          acc += sample_or_zero(x, base + k, g * in_g + ci) * w(ci * s.kernel + k, co);
      y(t, co) = acc + (bias.empty() ? 0.0 : bias(0, co));
    }
  }
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

  for (int co = 0; co < s.out_ch; ++co) {
    const int g = co / out_g;
    for (int ci = 0; ci < in_g; ++ci)
      for (int k = 0; k < s.kernel; ++k) {
        double acc = 0.0;
        for (int t = 0; t < t_out; ++t)
          acc += sample_or_zero(x, t * s.stride - s.pad + k, g * in_g + ci) * dy(t, co);
        dw(ci * s.kernel + k, co) = acc;
      }
  }

  for (int ti = 0; ti < x.rows; ++ti) {
    for (int g = 0; g < s.groups; ++g) {
      for (int ci = 0; ci < in_g; ++ci) {
        double acc = 0.0;
        int t_lo = (ti + s.pad - (s.kernel - 1));
        t_lo = t_lo <= 0 ? 0 : (t_lo + s.stride - 1) / s.stride;
        int t_hi = (ti + s.pad) / s.stride;
        if (t_hi >= t_out) t_hi = t_out - 1;
        for (int t = t_lo; t <= t_hi; ++t) {
          const int k = ti + s.pad - t * s.stride;
          for (int j = 0; j < out_g; ++j)
            acc += dy(t, g * out_g + j) * w(ci * s.kernel + k, g * out_g + j);
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
  for (int i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[i] = istd;
    for (int j = 0; j < n; ++j) {
      xhat(i, j) = (x(i, j) - mean) * istd;
      y(i, j) = gain(0, j) * xhat(i, j) + bias(0, j);
    }
  }
}

void layer_norm_backward(const Mat& dy, const Mat& xhat, const std::vector<double>& inv_std,
                         const Mat& gain, Mat& dx, Mat& dgain, Mat& dbias) {
  const int n = dy.cols;
  dx.resize(dy.rows, n);
  dgain.resize(1, n);
  dbias.resize(1, n);
  for (int i = 0; i < dy.rows; ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxh = dy(i, j) * gain(0, j);
      m1 += dxh;
      m2 += dxh * xhat(i, j);
    }
    m1 /= n;
    m2 /= n;
    for (int j = 0; j < n; ++j) {
      const double dxh = dy(i, j) * gain(0, j);
      dx(i, j) = inv_std[i] * (dxh - m1 - xhat(i, j) * m2);
    }
  }
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
  for (int j = 0; j < x.cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < x.rows; ++i) mean += x(i, j);
    mean /= x.rows;
    double var = 0.0;
    for (int i = 0; i < x.rows; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= x.rows;
    const double istd = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < x.rows; ++i) y(i, j) = (x(i, j) - mean) * istd;
  }
}

void softmax_rows(const Mat& x, Mat& y) {
  y.resize(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double mx = x(i, 0);
    for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      y(i, j) = std::exp(x(i, j) - mx);
      sum += y(i, j);
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < x.cols; ++j) y(i, j) *= inv;
  }
}

void softmax_rows_backward(const Mat& dy, const Mat& y, Mat& dx) {
  dx.resize(dy.rows, dy.cols);
  for (int i = 0; i < dy.rows; ++i) {
    double dot = 0.0;
    for (int j = 0; j < dy.cols; ++j) dot += dy(i, j) * y(i, j);
    for (int j = 0; j < dy.cols; ++j) dx(i, j) = y(i, j) * (dy(i, j) - dot);
  }
}

void gelu(const Mat& x, Mat& y) {
  y.resize(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i)
    y.d[i] = 0.5 * x.d[i] * (1.0 + std::erf(x.d[i] * kInvSqrt2));
}

void gelu_backward(const Mat& dy, const Mat& x, Mat& dx) {
  dx.resize(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i) {
    const double v = x.d[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    dx.d[i] = dy.d[i] * (cdf + v * pdf);
  }
}

}  // namespace spd::refk
