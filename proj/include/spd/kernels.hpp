// include/spd/kernels.hpp

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

#ifndef SPD_KERNELS_HPP
#define SPD_KERNELS_HPP

#include <vector>

#include "spd/mat.hpp"

// Numeric kernels come in two lanes with identical signatures and identical
// per-element summation order:
//
//   spd::kernels  - OpenMP-parallel lane used by the model code. Loops are
//                   parallelized only over independent output elements, so
//                   results are bitwise identical for any thread count.
//   spd::refk     - plain serial loops kept as the reference implementation;
//                   tests assert bitwise agreement between the two lanes and
//                   tools/bench_kernels compares their throughput.

namespace spd {

struct Conv1dSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// floor length recurrence for a strided/padded 1-D convolution
inline int conv_out_len(int t, const Conv1dSpec& s) {
  int n = t + 2 * s.pad - s.kernel;
  if (n < 0) return 0;
  return n / s.stride + 1;
}

namespace kernels {

void matmul(const Mat& a, const Mat& b, Mat& c);      // c = a * b
void matmul_tn(const Mat& a, const Mat& b, Mat& c);   // c = a^T * b
void matmul_nt(const Mat& a, const Mat& b, Mat& c);   // c = a * b^T

void add_bias(Mat& y, const Mat& bias);
void col_sums(const Mat& x, Mat& out);

// x is [T x in_ch] time-major; weight is [(in_ch/groups)*kernel x out_ch]
// with row index ci_local*kernel + k; y is [T_out x out_ch].
void conv1d(const Mat& x, const Mat& w, const Mat& bias, const Conv1dSpec& spec, Mat& y);
void conv1d_backward(const Mat& x, const Mat& w, const Conv1dSpec& spec, const Mat& dy,
                     Mat& dx, Mat& dw, Mat& db);

// per-row normalization over channels with learnable gain/bias
void layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, Mat& y,
                Mat& xhat, std::vector<double>& inv_std);
void layer_norm_backward(const Mat& dy, const Mat& xhat, const std::vector<double>& inv_std,
                         const Mat& gain, Mat& dx, Mat& dgain, Mat& dbias);

// per-channel normalization over the time axis, no affine terms
void instance_norm_time(const Mat& x, double eps, Mat& y);

void softmax_rows(const Mat& x, Mat& y);
void softmax_rows_backward(const Mat& dy, const Mat& y, Mat& dx);

void gelu(const Mat& x, Mat& y);
void gelu_backward(const Mat& dy, const Mat& x, Mat& dx);

}  // namespace kernels

namespace refk {

void matmul(const Mat& a, const Mat& b, Mat& c);
void matmul_tn(const Mat& a, const Mat& b, Mat& c);
void matmul_nt(const Mat& a, const Mat& b, Mat& c);
void add_bias(Mat& y, const Mat& bias);
void col_sums(const Mat& x, Mat& out);
void conv1d(const Mat& x, const Mat& w, const Mat& bias, const Conv1dSpec& spec, Mat& y);
void conv1d_backward(const Mat& x, const Mat& w, const Conv1dSpec& spec, const Mat& dy,
                     Mat& dx, Mat& dw, Mat& db);
void layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, Mat& y,
                Mat& xhat, std::vector<double>& inv_std);
void layer_norm_backward(const Mat& dy, const Mat& xhat, const std::vector<double>& inv_std,
                         const Mat& gain, Mat& dx, Mat& dgain, Mat& dbias);
void instance_norm_time(const Mat& x, double eps, Mat& y);
void softmax_rows(const Mat& x, Mat& y);
void softmax_rows_backward(const Mat& dy, const Mat& y, Mat& dx);
void gelu(const Mat& x, Mat& y);
void gelu_backward(const Mat& dy, const Mat& x, Mat& dx);

}  // namespace refk

}  // namespace spd

#endif  // SPD_KERNELS_HPP
