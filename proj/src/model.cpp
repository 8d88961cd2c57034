// src/model.cpp

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

#include "spd/model.hpp"

#include <cassert>
#include <cmath>

#include "spd/common.hpp"
#include "spd/kernels.hpp"
#include "spd/rng.hpp"

namespace spd {

namespace K = kernels;

namespace {

const Mat& P(const Parameters& p, const std::string& name) {
  auto it = p.find(name);
  SPD_DATA_CHECK(it != p.end(), "missing parameter array '", name, "'");
  return it->second;
}

void acc(Parameters& g, const std::string& name, const Mat& m) {
  auto it = g.find(name);
  if (it == g.end()) {
    g.emplace(name, m);
    return;
  }
  assert(it->second.same_shape(m));
  for (size_t i = 0; i < m.size(); ++i) it->second.d[i] += m.d[i];
}

void add_inplace(Mat& a, const Mat& b) {
  assert(a.same_shape(b));
  for (size_t i = 0; i < a.size(); ++i) a.d[i] += b.d[i];
}

void scale_inplace(Mat& a, double s) {
  for (size_t i = 0; i < a.size(); ++i) a.d[i] *= s;
}

Mat vstack(const Mat& a, const Mat& b) {
  if (a.rows == 0) return b;
  if (b.rows == 0) return a;
  assert(a.cols == b.cols);
  Mat r;
  r.resize(a.rows + b.rows, a.cols);
  std::copy(a.d.begin(), a.d.end(), r.d.begin());
  std::copy(b.d.begin(), b.d.end(), r.d.begin() + a.size());
  return r;
}

Mat rows_of(const Mat& m, int r0, int r1) {
  Mat r;
  r.resize(r1 - r0, m.cols);
  std::copy(m.d.begin() + size_t(r0) * m.cols, m.d.begin() + size_t(r1) * m.cols, r.d.begin());
  return r;
}

Mat cols_of(const Mat& m, int c0, int c1) {
  Mat r;
  r.resize(m.rows, c1 - c0);
  for (int i = 0; i < m.rows; ++i)
    for (int j = c0; j < c1; ++j) r(i, j - c0) = m(i, j);
  return r;
}

void paste_cols(Mat& dst, const Mat& src, int c0) {
  for (int i = 0; i < src.rows; ++i)
    for (int j = 0; j < src.cols; ++j) dst(i, c0 + j) = src(i, j);
}

Conv1dSpec fe_spec(int layer, const ModelConfig& cfg) {
  Conv1dSpec s;
  s.in_ch = layer == 0 ? 1 : cfg.d_feat;
  s.out_ch = cfg.d_feat;
  s.kernel = kFeKernel[layer];
  s.stride = kFeStride[layer];
  s.pad = 0;
  s.groups = 1;
  return s;
}

Conv1dSpec pos_spec(const ModelConfig& cfg) {
  Conv1dSpec s;
  s.in_ch = cfg.d_model;
  s.out_ch = cfg.d_model;
  s.kernel = kPosKernel;
  s.stride = 1;
  s.pad = (kPosKernel - 1) / 2;
  s.groups = cfg.pos_groups();
  return s;
}

Conv1dSpec dec_spec(int layer, const ModelConfig& cfg) {
  Conv1dSpec s;
  s.in_ch = layer == 0 ? cfg.d_model : cfg.decoder_dim;
  s.out_ch = cfg.decoder_dim;
  s.kernel = cfg.decoder_kernel;
  s.stride = 1;
  s.pad = (cfg.decoder_kernel - 1) / 2;
  s.groups = 1;
  return s;
}

void ln_forward(const Mat& x, const Mat& gain, const Mat& bias, double eps, Mat& y,
                LnTrace* tr) {
  if (tr) {
    K::layer_norm(x, gain, bias, eps, y, tr->xhat, tr->inv_std);
  } else {
    Mat xhat;
    std::vector<double> inv_std;
    K::layer_norm(x, gain, bias, eps, y, xhat, inv_std);
  }
}

// Linear projection y = x*W + b.
void linear(const Mat& x, const Mat& w, const Mat& b, Mat& y) {
  K::matmul(x, w, y);
  K::add_bias(y, b);
}

Mat attention_forward(const Mat& x, const Parameters& p, const std::string& px,
                      const ModelConfig& cfg, BlockTrace* tr) {
  const int d = cfg.d_model;
  const int nh = cfg.n_heads;
  const int dh = d / nh;
  const double scale = 1.0 / std::sqrt(double(dh));

  Mat q, k, v;
  linear(x, P(p, px + ".attn.wq"), P(p, px + ".attn.bq"), q);
  linear(x, P(p, px + ".attn.wk"), P(p, px + ".attn.bk"), k);
  linear(x, P(p, px + ".attn.wv"), P(p, px + ".attn.bv"), v);

  Mat ctx;
  ctx.resize(x.rows, d);
  std::vector<Mat> probs(nh);
  for (int h = 0; h < nh; ++h) {
    Mat qh = cols_of(q, h * dh, (h + 1) * dh);
    Mat kh = cols_of(k, h * dh, (h + 1) * dh);
    Mat vh = cols_of(v, h * dh, (h + 1) * dh);
    Mat scores;
    K::matmul_nt(qh, kh, scores);
    scale_inplace(scores, scale);
    K::softmax_rows(scores, probs[h]);
    Mat ctxh;
    K::matmul(probs[h], vh, ctxh);
    paste_cols(ctx, ctxh, h * dh);
  }
  Mat out;
  linear(ctx, P(p, px + ".attn.wo"), P(p, px + ".attn.bo"), out);
  if (tr) {
    tr->q = std::move(q);
    tr->k = std::move(k);
    tr->v = std::move(v);
    tr->probs = std::move(probs);
    tr->ctx = std::move(ctx);
  }
  return out;
}

// Post-norm transformer block: y = LN2(LN1(x + attn(x)) + ffn(LN1(x + attn(x)))).
Mat block_forward(const Mat& x, const Parameters& p, const std::string& px,
                  const ModelConfig& cfg, BlockTrace* tr) {
  if (tr) tr->x = x;
  Mat a = attention_forward(x, p, px, cfg, tr);
  Mat r1 = x;
  add_inplace(r1, a);
  Mat y1;
  ln_forward(r1, P(p, px + ".ln1.g"), P(p, px + ".ln1.b"), cfg.ln_eps, y1,
             tr ? &tr->ln1 : nullptr);

  Mat h;
  linear(y1, P(p, px + ".ffn.w1"), P(p, px + ".ffn.b1"), h);
  Mat g;
  K::gelu(h, g);
  Mat f;
  linear(g, P(p, px + ".ffn.w2"), P(p, px + ".ffn.b2"), f);

  Mat r2 = y1;
  add_inplace(r2, f);
  Mat y2;
  ln_forward(r2, P(p, px + ".ln2.g"), P(p, px + ".ln2.b"), cfg.ln_eps, y2,
             tr ? &tr->ln2 : nullptr);
  if (tr) {
    tr->y1 = std::move(y1);
    tr->ffn_h = std::move(h);
    tr->ffn_g = std::move(g);
  }
  return y2;
}

Mat block_backward(const Mat& dy2, const BlockTrace& tr, const Parameters& p,
                   const std::string& px, const ModelConfig& cfg, Parameters& g) {
  const int d = cfg.d_model;
  const int nh = cfg.n_heads;
  const int dh = d / nh;
  const double scale = 1.0 / std::sqrt(double(dh));

  Mat dr2, dg2, db2;
  K::layer_norm_backward(dy2, tr.ln2.xhat, tr.ln2.inv_std, P(p, px + ".ln2.g"), dr2, dg2, db2);
  acc(g, px + ".ln2.g", dg2);
  acc(g, px + ".ln2.b", db2);

  // r2 = y1 + ffn(y1)
  Mat dy1 = dr2;
  {
    Mat dgmat;
    K::matmul_nt(dr2, P(p, px + ".ffn.w2"), dgmat);
    Mat dw2;
    K::matmul_tn(tr.ffn_g, dr2, dw2);
    acc(g, px + ".ffn.w2", dw2);
    Mat db2v;
    K::col_sums(dr2, db2v);
    acc(g, px + ".ffn.b2", db2v);

    Mat dh;
    K::gelu_backward(dgmat, tr.ffn_h, dh);
    Mat dw1;
    K::matmul_tn(tr.y1, dh, dw1);
    acc(g, px + ".ffn.w1", dw1);
    Mat db1v;
    K::col_sums(dh, db1v);
    acc(g, px + ".ffn.b1", db1v);
    Mat dy1_ffn;
    K::matmul_nt(dh, P(p, px + ".ffn.w1"), dy1_ffn);
    add_inplace(dy1, dy1_ffn);
  }

  Mat dr1, dg1, db1;
  K::layer_norm_backward(dy1, tr.ln1.xhat, tr.ln1.inv_std, P(p, px + ".ln1.g"), dr1, dg1, db1);
  acc(g, px + ".ln1.g", dg1);
  acc(g, px + ".ln1.b", db1);

  // r1 = x + attn(x)
  Mat dx = dr1;
  Mat dctx;
  K::matmul_nt(dr1, P(p, px + ".attn.wo"), dctx);
  {
    Mat dwo;
    K::matmul_tn(tr.ctx, dr1, dwo);
    acc(g, px + ".attn.wo", dwo);
    Mat dbo;
    K::col_sums(dr1, dbo);
    acc(g, px + ".attn.bo", dbo);
  }

  Mat dq, dk, dv;
  dq.resize(tr.q.rows, d);
  dk.resize(tr.q.rows, d);
  dv.resize(tr.q.rows, d);
  for (int h = 0; h < nh; ++h) {
    Mat qh = cols_of(tr.q, h * dh, (h + 1) * dh);
    Mat kh = cols_of(tr.k, h * dh, (h + 1) * dh);
    Mat vh = cols_of(tr.v, h * dh, (h + 1) * dh);
    Mat dctxh = cols_of(dctx, h * dh, (h + 1) * dh);

    Mat dp;
    K::matmul_nt(dctxh, vh, dp);
    Mat dvh;
    K::matmul_tn(tr.probs[h], dctxh, dvh);
    Mat ds;
    K::softmax_rows_backward(dp, tr.probs[h], ds);
    scale_inplace(ds, scale);
    Mat dqh;
    K::matmul(ds, kh, dqh);
    Mat dkh;
    K::matmul_tn(ds, qh, dkh);

    paste_cols(dq, dqh, h * dh);
    paste_cols(dk, dkh, h * dh);
    paste_cols(dv, dvh, h * dh);
  }

  const struct {
    const char* w;
    const char* b;
    Mat* dmat;
  } qkv[3] = {{".attn.wq", ".attn.bq", &dq}, {".attn.wk", ".attn.bk", &dk},
              {".attn.wv", ".attn.bv", &dv}};
  for (const auto& t : qkv) {
    Mat dw;
    K::matmul_tn(tr.x, *t.dmat, dw);
    acc(g, px + t.w, dw);
    Mat db;
    K::col_sums(*t.dmat, db);
    acc(g, px + t.b, db);
    Mat dxt;
    K::matmul_nt(*t.dmat, P(p, px + t.w), dxt);
    add_inplace(dx, dxt);
  }
  return dx;
}

// Five grouped conv+GELU layers with one residual connection around the stack.
Mat pos_forward(const Mat& x, const Parameters& p, const ModelConfig& cfg, PosTrace* tr) {
  const Conv1dSpec spec = pos_spec(cfg);
  Mat s = x;
  if (tr) {
    tr->in = x;
    tr->conv_in.clear();
    tr->gelu_in.clear();
  }
  for (int j = 0; j < kPosLayers; ++j) {
    Mat h;
    K::conv1d(s, P(p, util::str("bb.pos", j, ".w")), P(p, util::str("bb.pos", j, ".b")), spec, h);
    if (tr) {
      tr->conv_in.push_back(std::move(s));
      tr->gelu_in.push_back(h);
    }
    Mat gout;
    K::gelu(h, gout);
    s = std::move(gout);
  }
  Mat out = x;
  add_inplace(out, s);
  return out;
}

Mat pos_backward(const Mat& dout, const PosTrace& tr, const Parameters& p,
                 const ModelConfig& cfg, Parameters& g) {
  const Conv1dSpec spec = pos_spec(cfg);
  Mat ds = dout;
  for (int j = kPosLayers - 1; j >= 0; --j) {
    Mat dh;
    K::gelu_backward(ds, tr.gelu_in[j], dh);
    Mat dx, dw, db;
    K::conv1d_backward(tr.conv_in[j], P(p, util::str("bb.pos", j, ".w")), spec, dh, dx, dw, db);
    acc(g, util::str("bb.pos", j, ".w"), dw);
    acc(g, util::str("bb.pos", j, ".b"), db);
    ds = std::move(dx);
  }
  Mat din = dout;
  add_inplace(din, ds);
  return din;
}

Mat fe_forward(const Waveform& w, const Parameters& p, const ModelConfig& cfg,
               StudentTrace* tr) {
  SPD_DATA_CHECK(fe_out_len(w.n()) >= 1, "waveform of ", w.n(),
                 " samples is too short for the extractor (needs at least ", kFeReceptive, ")");
  Mat x;
  x.resize(w.n(), 1);
  for (int t = 0; t < w.n(); ++t) x(t, 0) = w.samples[t];
  if (tr) tr->wave = x;

  for (int i = 0; i < kFeLayers; ++i) {
    const Conv1dSpec spec = fe_spec(i, cfg);
    const std::string px = util::str("fe.conv", i);
    Mat y;
    K::conv1d(x, P(p, px + ".w"), P(p, px + ".b"), spec, y);
    Mat yn;
    ln_forward(y, P(p, px + ".ln.g"), P(p, px + ".ln.b"), cfg.ln_eps, yn,
               tr ? &tr->fe[i].ln : nullptr);
    Mat ya;
    K::gelu(yn, ya);
    if (tr) {
      tr->fe[i].conv_in = std::move(x);
      tr->fe[i].gelu_in = std::move(yn);
    }
    x = std::move(ya);
  }

  Mat z;
  linear(x, P(p, "fe.proj.w"), P(p, "fe.proj.b"), z);
  if (tr) {
    tr->proj_in = std::move(x);
    tr->z = z;
  }
  return z;
}

void fe_backward(const StudentTrace& tr, const Parameters& p, const ModelConfig& cfg,
                 const Mat& dz, Parameters& g) {
  Mat dout;
  K::matmul_nt(dz, P(p, "fe.proj.w"), dout);
  {
    Mat dw;
    K::matmul_tn(tr.proj_in, dz, dw);
    acc(g, "fe.proj.w", dw);
    Mat db;
    K::col_sums(dz, db);
    acc(g, "fe.proj.b", db);
  }
  for (int i = kFeLayers - 1; i >= 0; --i) {
    const Conv1dSpec spec = fe_spec(i, cfg);
    const std::string px = util::str("fe.conv", i);
    Mat dln_out;
    K::gelu_backward(dout, tr.fe[i].gelu_in, dln_out);
    Mat dconv_out, dgain, dbias;
    K::layer_norm_backward(dln_out, tr.fe[i].ln.xhat, tr.fe[i].ln.inv_std, P(p, px + ".ln.g"),
                           dconv_out, dgain, dbias);
    acc(g, px + ".ln.g", dgain);
    acc(g, px + ".ln.b", dbias);
    Mat dx, dw, db;
    K::conv1d_backward(tr.fe[i].conv_in, P(p, px + ".w"), spec, dconv_out, dx, dw, db);
    acc(g, px + ".w", dw);
    acc(g, px + ".b", db);
    dout = std::move(dx);
  }
}

void check_mask(const MaskSpec& mask, int n_frames) {
  int prev = -1;
  for (int i : mask.indices) {
    if (i <= prev || i < 0 || i >= n_frames)
      throw UsageError(util::str("mask index ", i, " invalid for ", n_frames, " frames"));
    prev = i;
  }
}

StudentOutput encode_student_core(const Mat& z, const MaskSpec& mask, const Parameters& p,
                                  const ModelConfig& cfg, uint64_t noise_seed,
                                  StudentTrace* tr) {
  const int nz = z.rows;
  const int nu = cfg.utt_tokens;
  const int d = cfg.d_model;
  check_mask(mask, nz);
  if (tr) tr->mask = mask;

  Mat bb_in;
  std::vector<int> visible;
  if (!cfg.mae()) {
    bb_in = z;
    const Mat& emb = P(p, "bb.mask_emb");
    for (int i : mask.indices)
      for (int j = 0; j < d; ++j) bb_in(i, j) = emb(0, j);
  } else {
    visible.reserve(nz - mask.m());
    size_t mi = 0;
    for (int i = 0; i < nz; ++i) {
      if (mi < mask.indices.size() && mask.indices[mi] == i) {
        ++mi;
        continue;
      }
      visible.push_back(i);
    }
    bb_in.resize(int(visible.size()), d);
    for (size_t r = 0; r < visible.size(); ++r)
      for (int j = 0; j < d; ++j) bb_in(int(r), j) = z(visible[r], j);
  }
  if (tr) {
    tr->backbone_input = bb_in;
    tr->visible = visible;
  }

  Mat zp = pos_forward(bb_in, p, cfg, tr ? &tr->pos : nullptr);
  Mat x = nu > 0 ? vstack(P(p, "bb.utt_tokens"), zp) : zp;
  if (tr) {
    tr->enc_in = x;
    tr->blocks.assign(size_t(cfg.n_layers), BlockTrace{});
  }
  for (int l = 0; l < cfg.n_layers; ++l)
    x = block_forward(x, p, util::str("bb.blk", l), cfg, tr ? &tr->blocks[l] : nullptr);
  if (tr) tr->enc_out = x;

  StudentOutput out;
  Mat tok = rows_of(x, 0, nu);
  if (nu > 0) {
    linear(tok, P(p, "head.w"), P(p, "head.b"), out.utt);
  } else {
    out.utt.resize(0, d);
  }

  if (!cfg.mae()) {
    Mat frames_in = rows_of(x, nu, x.rows);
    linear(frames_in, P(p, "head.w"), P(p, "head.b"), out.frames);
    if (tr) {
      tr->head_in_tokens = std::move(tok);
      tr->head_in_frames = std::move(frames_in);
    }
  } else {
    // Scatter encoder frame rows back to full length; masked rows are filled
    // with Gaussian noise before the conv decoder rebuilds them.
    Mat dec_in;
    dec_in.resize(nz, d);
    for (size_t r = 0; r < visible.size(); ++r)
      for (int j = 0; j < d; ++j) dec_in(visible[r], j) = x(nu + int(r), j);
    Rng noise(noise_seed);
    for (int i : mask.indices)
      for (int j = 0; j < d; ++j) dec_in(i, j) = noise.normal(0.0, cfg.mae_noise_std);
    if (tr) {
      tr->head_in_tokens = std::move(tok);
      tr->dec_in = dec_in;
      tr->dec.assign(size_t(cfg.decoder_layers), ConvLnGeluTrace{});
    }
    Mat cur = std::move(dec_in);
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const Conv1dSpec spec = dec_spec(l, cfg);
      const std::string px = util::str("dec.conv", l);
      Mat y;
      K::conv1d(cur, P(p, px + ".w"), P(p, px + ".b"), spec, y);
      Mat yn;
      ln_forward(y, P(p, px + ".ln.g"), P(p, px + ".ln.b"), cfg.ln_eps, yn,
                 tr ? &tr->dec[l].ln : nullptr);
      Mat ya;
      K::gelu(yn, ya);
      if (tr) {
        tr->dec[l].conv_in = std::move(cur);
        tr->dec[l].gelu_in = std::move(yn);
      }
      cur = std::move(ya);
    }
    linear(cur, P(p, "dec.proj.w"), P(p, "dec.proj.b"), out.frames);
    if (tr) tr->dec_proj_in = std::move(cur);
  }
  return out;
}

}  // namespace

ModelConfig ModelConfig::from_config(const Config& c) {
  ModelConfig m;
  m.style = c.gets("model.style");
  m.d_feat = int(c.geti("model.d_feat"));
  m.d_model = int(c.geti("model.d_model"));
  m.n_layers = int(c.geti("model.n_layers"));
  m.n_heads = int(c.geti("model.n_heads"));
  m.d_ffn = int(c.geti("model.d_ffn"));
  m.top_k = int(c.geti("model.top_k"));
  m.teacher_instnorm = c.getb("model.teacher_instnorm");
  m.utt_tokens = int(c.geti("model.utt_tokens"));
  m.decoder_dim = int(c.geti("model.decoder_dim"));
  m.decoder_layers = int(c.geti("model.decoder_layers"));
  m.decoder_kernel = int(c.geti("model.decoder_kernel"));
  m.mae_noise_std = c.getd("model.mae_noise_std");
  m.ln_eps = c.getd("model.ln_eps");
  m.validate();
  return m;
}

void ModelConfig::validate() const {
  if (style != "standard" && style != "mae_decoder")
    throw UsageError(util::str("model.style '", style, "' unknown (standard or mae_decoder)"));
  if (d_feat < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ffn < 1)
    throw UsageError("model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw UsageError(util::str("d_model ", d_model, " not divisible by n_heads ", n_heads));
  if (top_k < 1 || top_k > n_layers)
    throw UsageError(util::str("top_k ", top_k, " out of range [1, ", n_layers, "]"));
  if (utt_tokens < 0) throw UsageError("utt_tokens must be >= 0");
  if (mae()) {
    if (decoder_dim < 1 || decoder_layers < 1)
      throw UsageError("decoder dimensions must be positive");
    if (decoder_kernel < 1 || decoder_kernel % 2 == 0)
      throw UsageError(util::str("decoder_kernel must be odd, got ", decoder_kernel));
    if (mae_noise_std < 0) throw UsageError("mae_noise_std must be >= 0");
  }
  if (ln_eps <= 0) throw UsageError("ln_eps must be positive");
}

int ModelConfig::pos_groups() const {
  for (int g = std::min(16, d_model); g >= 1; --g)
    if (d_model % g == 0) return g;
  return 1;
}

long long fe_out_len(long long n_samples) {
  long long len = n_samples;
  for (int i = 0; i < kFeLayers; ++i) {
    if (len < kFeKernel[i]) return 0;
    len = (len - kFeKernel[i]) / kFeStride[i] + 1;
  }
  return len;
}

SampleRange samples_exclusive_to_frames(long long a, long long b) {
  SampleRange r;
  r.lo = kFeDownsample * a + (kFeReceptive - kFeDownsample);
  r.hi = kFeDownsample * b;
  return r;
}

Parameters init_parameters(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Parameters p;

  auto weight = [&](const std::string& name, int rows, int cols) {
    Mat m;
    m.resize(rows, cols);
    Rng r(derive_seed(seed, name));
    const double s = 1.0 / std::sqrt(double(rows));
    for (size_t i = 0; i < m.size(); ++i) m.d[i] = r.normal(0.0, s);
    p.emplace(name, std::move(m));
  };
  auto constant = [&](const std::string& name, int rows, int cols, double v) {
    Mat m;
    m.resize(rows, cols);
    m.fill(v);
    p.emplace(name, std::move(m));
  };
  auto gaussian = [&](const std::string& name, int rows, int cols, double std) {
    Mat m;
    m.resize(rows, cols);
    Rng r(derive_seed(seed, name));
    for (size_t i = 0; i < m.size(); ++i) m.d[i] = r.normal(0.0, std);
    p.emplace(name, std::move(m));
  };

  for (int i = 0; i < kFeLayers; ++i) {
    const Conv1dSpec s = fe_spec(i, cfg);
    const std::string px = util::str("fe.conv", i);
    weight(px + ".w", s.in_ch * s.kernel, s.out_ch);
    constant(px + ".b", 1, s.out_ch, 0.0);
    constant(px + ".ln.g", 1, s.out_ch, 1.0);
    constant(px + ".ln.b", 1, s.out_ch, 0.0);
  }
  weight("fe.proj.w", cfg.d_feat, cfg.d_model);
  constant("fe.proj.b", 1, cfg.d_model, 0.0);

  const Conv1dSpec ps = pos_spec(cfg);
  for (int j = 0; j < kPosLayers; ++j) {
    weight(util::str("bb.pos", j, ".w"), (ps.in_ch / ps.groups) * ps.kernel, ps.out_ch);
    constant(util::str("bb.pos", j, ".b"), 1, ps.out_ch, 0.0);
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string px = util::str("bb.blk", l);
    for (const char* nm : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
      weight(px + nm, cfg.d_model, cfg.d_model);
    for (const char* nm : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
      constant(px + nm, 1, cfg.d_model, 0.0);
    constant(px + ".ln1.g", 1, cfg.d_model, 1.0);
    constant(px + ".ln1.b", 1, cfg.d_model, 0.0);
    constant(px + ".ln2.g", 1, cfg.d_model, 1.0);
    constant(px + ".ln2.b", 1, cfg.d_model, 0.0);
    weight(px + ".ffn.w1", cfg.d_model, cfg.d_ffn);
    constant(px + ".ffn.b1", 1, cfg.d_ffn, 0.0);
    weight(px + ".ffn.w2", cfg.d_ffn, cfg.d_model);
    constant(px + ".ffn.b2", 1, cfg.d_model, 0.0);
  }
  if (cfg.utt_tokens > 0) gaussian("bb.utt_tokens", cfg.utt_tokens, cfg.d_model, 0.02);
  if (!cfg.mae()) gaussian("bb.mask_emb", 1, cfg.d_model, 0.1);
  weight("head.w", cfg.d_model, cfg.d_model);
  constant("head.b", 1, cfg.d_model, 0.0);

  if (cfg.mae()) {
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const Conv1dSpec s = dec_spec(l, cfg);
      const std::string px = util::str("dec.conv", l);
      weight(px + ".w", s.in_ch * s.kernel, s.out_ch);
      constant(px + ".b", 1, s.out_ch, 0.0);
      constant(px + ".ln.g", 1, s.out_ch, 1.0);
      constant(px + ".ln.b", 1, s.out_ch, 0.0);
    }
    weight("dec.proj.w", cfg.decoder_dim, cfg.d_model);
    constant("dec.proj.b", 1, cfg.d_model, 0.0);
  }
  return p;
}

Mat extract_features(const Waveform& w, const Parameters& p, const ModelConfig& cfg) {
  return fe_forward(w, p, cfg, nullptr);
}

std::vector<Mat> backbone_layer_outputs(const Mat& z, const Parameters& p,
                                        const ModelConfig& cfg) {
  Mat x = pos_forward(z, p, cfg, nullptr);
  std::vector<Mat> outs;
  outs.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    x = block_forward(x, p, util::str("bb.blk", l), cfg, nullptr);
    outs.push_back(x);
  }
  return outs;
}

Mat encode_teacher(const Mat& z, const Parameters& p, const ModelConfig& cfg, int top_k) {
  if (top_k < 1 || top_k > cfg.n_layers)
    throw UsageError(util::str("teacher top_k ", top_k, " out of range [1, ", cfg.n_layers, "]"));
  const std::vector<Mat> outs = backbone_layer_outputs(z, p, cfg);
  Mat sum;
  sum.resize(z.rows, cfg.d_model);
  for (int l = cfg.n_layers - top_k; l < cfg.n_layers; ++l) {
    if (cfg.teacher_instnorm) {
      Mat n;
      K::instance_norm_time(outs[l], cfg.ln_eps, n);
      add_inplace(sum, n);
    } else {
      add_inplace(sum, outs[l]);
    }
  }
  scale_inplace(sum, 1.0 / top_k);
  return sum;
}

StudentOutput student_forward(const Waveform& w, const MaskSpec& mask, const Parameters& p,
                              const ModelConfig& cfg, uint64_t noise_seed, StudentTrace* tr) {
  Mat z = fe_forward(w, p, cfg, tr);
  return encode_student_core(z, mask, p, cfg, noise_seed, tr);
}

StudentOutput encode_student(const Mat& z, const MaskSpec& mask, const Parameters& p,
                             const ModelConfig& cfg, uint64_t noise_seed) {
  return encode_student_core(z, mask, p, cfg, noise_seed, nullptr);
}

void student_backward(const StudentTrace& tr, const Parameters& p, const ModelConfig& cfg,
                      const Mat& d_utt, const Mat& d_frames, Parameters& grads) {
  const int nu = cfg.utt_tokens;
  const int d = cfg.d_model;
  const int nz = tr.z.rows;
  const int n_enc = tr.enc_out.rows;

  Mat d_enc;
  d_enc.resize(n_enc, d);

  // Utterance rows reach the output projection directly in both styles.
  if (nu > 0 && d_utt.rows > 0) {
    Mat dw;
    K::matmul_tn(tr.head_in_tokens, d_utt, dw);
    acc(grads, "head.w", dw);
    Mat db;
    K::col_sums(d_utt, db);
    acc(grads, "head.b", db);
    Mat dtok;
    K::matmul_nt(d_utt, P(p, "head.w"), dtok);
    for (int i = 0; i < nu; ++i)
      for (int j = 0; j < d; ++j) d_enc(i, j) = dtok(i, j);
  }

  if (!cfg.mae()) {
    if (d_frames.rows > 0) {
      Mat dw;
      K::matmul_tn(tr.head_in_frames, d_frames, dw);
      acc(grads, "head.w", dw);
      Mat db;
      K::col_sums(d_frames, db);
      acc(grads, "head.b", db);
      Mat dfr;
      K::matmul_nt(d_frames, P(p, "head.w"), dfr);
      for (int i = 0; i < nz; ++i)
        for (int j = 0; j < d; ++j) d_enc(nu + i, j) = dfr(i, j);
    }
  } else if (d_frames.rows > 0) {
    Mat dcur;
    K::matmul_nt(d_frames, P(p, "dec.proj.w"), dcur);
    {
      Mat dw;
      K::matmul_tn(tr.dec_proj_in, d_frames, dw);
      acc(grads, "dec.proj.w", dw);
      Mat db;
      K::col_sums(d_frames, db);
      acc(grads, "dec.proj.b", db);
    }
    for (int l = cfg.decoder_layers - 1; l >= 0; --l) {
      const Conv1dSpec spec = dec_spec(l, cfg);
      const std::string px = util::str("dec.conv", l);
      Mat dln_out;
      K::gelu_backward(dcur, tr.dec[l].gelu_in, dln_out);
      Mat dconv_out, dgain, dbias;
      K::layer_norm_backward(dln_out, tr.dec[l].ln.xhat, tr.dec[l].ln.inv_std,
                             P(p, px + ".ln.g"), dconv_out, dgain, dbias);
      acc(grads, px + ".ln.g", dgain);
      acc(grads, px + ".ln.b", dbias);
      Mat dx, dw, db;
      K::conv1d_backward(tr.dec[l].conv_in, P(p, px + ".w"), spec, dconv_out, dx, dw, db);
      acc(grads, px + ".w", dw);
      acc(grads, px + ".b", db);
      dcur = std::move(dx);
    }
    // Noise rows are constants; only visible rows carry gradient back into
    // the encoder.
    for (size_t r = 0; r < tr.visible.size(); ++r)
      for (int j = 0; j < d; ++j) d_enc(nu + int(r), j) = dcur(tr.visible[r], j);
  }

  Mat dx = std::move(d_enc);
  for (int l = cfg.n_layers - 1; l >= 0; --l)
    dx = block_backward(dx, tr.blocks[l], p, util::str("bb.blk", l), cfg, grads);

  if (nu > 0) {
    Mat dtok = rows_of(dx, 0, nu);
    acc(grads, "bb.utt_tokens", dtok);
  }
  Mat d_zp = rows_of(dx, nu, dx.rows);
  Mat d_bbin = pos_backward(d_zp, tr.pos, p, cfg, grads);

  Mat dz;
  dz.resize(nz, d);
  if (!cfg.mae()) {
    dz = d_bbin;
    Mat demb;
    demb.resize(1, d);
    for (int i : tr.mask.indices) {
      for (int j = 0; j < d; ++j) {
        demb(0, j) += dz(i, j);
        dz(i, j) = 0.0;
      }
    }
    acc(grads, "bb.mask_emb", demb);
  } else {
    for (size_t r = 0; r < tr.visible.size(); ++r)
      for (int j = 0; j < d; ++j) dz(tr.visible[r], j) = d_bbin(int(r), j);
  }
  fe_backward(tr, p, cfg, dz, grads);
}

}  // namespace spd
