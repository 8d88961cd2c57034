// include/spd/model.hpp

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

#ifndef SPD_MODEL_HPP_
#define SPD_MODEL_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "spd/config.hpp"
#include "spd/mask.hpp"
#include "spd/mat.hpp"
#include "spd/params.hpp"
#include "spd/wav.hpp"

namespace spd {

// Waveform encoder geometry, fixed: seven valid (unpadded) conv layers with
// 320x total downsampling, so 16 kHz audio comes out at 50 Hz.
inline constexpr int kFeLayers = 7;
inline constexpr int kFeKernel[kFeLayers] = {10, 3, 3, 3, 3, 2, 2};
inline constexpr int kFeStride[kFeLayers] = {5, 2, 2, 2, 2, 2, 2};
inline constexpr long long kFeDownsample = 320;
inline constexpr long long kFeReceptive = 400;
inline constexpr int kPosLayers = 5;
inline constexpr int kPosKernel = 19;

struct ModelConfig {
  std::string style = "standard";  // standard | mae_decoder
  int d_feat = 32;
  int d_model = 48;
  int n_layers = 4;
  int n_heads = 4;
  int d_ffn = 96;
  int top_k = 3;
  bool teacher_instnorm = true;
  int utt_tokens = 8;  // N_u; 0 means no utterance tokens
  int decoder_dim = 24;
  int decoder_layers = 4;
  int decoder_kernel = 7;
  double mae_noise_std = 1.0;
  double ln_eps = 1e-5;

  static ModelConfig from_config(const Config& c);
  void validate() const;
  bool mae() const { return style == "mae_decoder"; }
  // Largest divisor of d_model that is at most 16, used by the grouped
  // positional convolutions.
  int pos_groups() const;
};

// Frames produced by the extractor for a waveform of n samples; 0 when the
// input is too short to survive all seven layers.
long long fe_out_len(long long n_samples);

// Half-open sample interval whose content reaches frames [a, b) and no other
// frame, under the extractor's stride/receptive-field geometry.
struct SampleRange {
  long long lo = 0, hi = 0;  // [lo, hi)
};
SampleRange samples_exclusive_to_frames(long long a, long long b);

// Deterministic per-tensor initialization; the teacher starts as a copy.
Parameters init_parameters(const ModelConfig& cfg, uint64_t seed);

// --- forward-only paths -----------------------------------------------------

// Conv stack + linear projection: waveform -> N_z x d_model. Raises DataError
// when the waveform is too short to produce a single frame.
Mat extract_features(const Waveform& w, const Parameters& p, const ModelConfig& cfg);

// Positional encoding + transformer stack over unmasked frames with no
// utterance tokens; returns each block's output. Shared by the teacher and
// by frozen feature extraction.
std::vector<Mat> backbone_layer_outputs(const Mat& z, const Parameters& p,
                                        const ModelConfig& cfg);

// Mean of the top_k block outputs, each first instance-normalized over time
// per channel when cfg.teacher_instnorm is set. Pure in (z, p, top_k).
Mat encode_teacher(const Mat& z, const Parameters& p, const ModelConfig& cfg, int top_k);

struct StudentOutput {
  Mat utt;     // N_u x d_model (0 rows when utt_tokens == 0)
  Mat frames;  // N_z x d_model
};

// --- student path with gradients ---------------------------------------------

struct LnTrace {
  Mat xhat;
  std::vector<double> inv_std;
};

struct ConvLnGeluTrace {
  Mat conv_in;
  LnTrace ln;
  Mat gelu_in;  // normalized output, pre-activation
};

struct BlockTrace {
  Mat x;  // block input
  Mat q, k, v;
  std::vector<Mat> probs;  // per-head softmax rows
  Mat ctx;                 // concatenated head contexts, input to wo
  LnTrace ln1;
  Mat y1;     // LN1 output, ffn input
  Mat ffn_h;  // y1*w1+b1, gelu input
  Mat ffn_g;  // gelu(ffn_h), input to w2
  LnTrace ln2;
};

struct PosTrace {
  Mat in;                        // stack input
  std::vector<Mat> conv_in;      // per layer
  std::vector<Mat> gelu_in;      // per layer conv output
};

struct StudentTrace {
  Mat wave;                                      // T x 1
  std::array<ConvLnGeluTrace, kFeLayers> fe;
  Mat proj_in;                                   // N_z x d_feat
  Mat z;                                         // N_z x d_model, pre-mask
  MaskSpec mask;
  Mat backbone_input;     // standard: z with masked rows replaced;
                          // mae: visible rows only, in frame order
  std::vector<int> visible;  // mae: frame indices kept
  PosTrace pos;
  Mat enc_in;             // utterance tokens stacked on positional output
  std::vector<BlockTrace> blocks;
  Mat enc_out;
  Mat head_in_tokens;     // rows feeding the output projection
  Mat head_in_frames;     // standard style only
  Mat dec_in;             // mae: scattered encoder rows + noise fill
  std::vector<ConvLnGeluTrace> dec;
  Mat dec_proj_in;
};

// Full student pipeline from audio. Masked frames are replaced by the mask
// embedding (standard) or dropped before the encoder and rebuilt by the conv
// decoder from Gaussian noise fill drawn from noise_seed (mae). Utterance
// tokens are prepended after the positional stack and split off again. The
// trace, when given, holds everything student_backward needs.
StudentOutput student_forward(const Waveform& w, const MaskSpec& mask, const Parameters& p,
                              const ModelConfig& cfg, uint64_t noise_seed, StudentTrace* tr);

// Same path starting from precomputed features; forward only.
StudentOutput encode_student(const Mat& z, const MaskSpec& mask, const Parameters& p,
                             const ModelConfig& cfg, uint64_t noise_seed);

// Accumulates d(loss)/d(parameter) into grads for upstream gradients d_utt
// (N_u x d_model) and d_frames (N_z x d_model). Either may be empty for a
// loss term that does not touch it.
void student_backward(const StudentTrace& tr, const Parameters& p, const ModelConfig& cfg,
                      const Mat& d_utt, const Mat& d_frames, Parameters& grads);

}  // namespace spd

#endif  // SPD_MODEL_HPP_
