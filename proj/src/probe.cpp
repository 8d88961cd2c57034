// src/probe.cpp

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

#include "spd/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "spd/common.hpp"
#include "spd/kernels.hpp"
#include "spd/params.hpp"
#include "spd/rng.hpp"

namespace spd {

namespace {

Mat time_mean(const Mat& x) {
  Mat r;
  r.resize(1, x.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) r(0, j) += x(i, j);
  const double inv = 1.0 / x.rows;
  for (int j = 0; j < x.cols; ++j) r(0, j) *= inv;
  return r;
}

}  // namespace

FeatureDump extract_frozen_features(const Parameters& student, const ModelConfig& cfg,
                                    const Manifest& m, CorpusCache& cache,
                                    const std::string& layer_agg) {
  int n_avg = 0;
  if (layer_agg == "last") {
    n_avg = 1;
  } else if (layer_agg == "top_k_mean") {
    n_avg = cfg.top_k;
  } else if (layer_agg == "last4_mean") {
    if (cfg.n_layers < 4)
      throw UsageError(util::str("last4_mean needs >= 4 layers, model has ", cfg.n_layers));
    n_avg = 4;
  } else {
    throw UsageError(util::str("unknown layer aggregation '", layer_agg, "'"));
  }

  FeatureDump f;
  f.layer_agg = layer_agg;
  f.d = cfg.d_model;
  f.source = params_checksum(student);
  const int n = int(m.utterances.size());
  f.ids.resize(n);
  f.frames.resize(n);
  f.pooled.resize(n, cfg.d_model);
  for (int i = 0; i < n; ++i) {
    f.ids[i] = m.utterances[i].id;
    const Mat z = extract_features(cache.get(i), student, cfg);
    const std::vector<Mat> layers = backbone_layer_outputs(z, student, cfg);
    Mat agg;
    agg.resize(z.rows, cfg.d_model);
    for (int l = int(layers.size()) - n_avg; l < int(layers.size()); ++l)
      for (size_t e = 0; e < agg.size(); ++e) agg.d[e] += layers[l].d[e];
    const double inv = 1.0 / n_avg;
    for (size_t e = 0; e < agg.size(); ++e) agg.d[e] *= inv;
    SPD_DATA_CHECK(all_finite(agg), "non-finite features at utterance '", f.ids[i], "'");
    const Mat pool = time_mean(agg);
    for (int j = 0; j < cfg.d_model; ++j) f.pooled(i, j) = pool(0, j);
    f.frames[i] = std::move(agg);
  }
  return f;
}

// --- dump files -----------------------------------------------------------

namespace {
constexpr char kFeatMagic[8] = {'S', 'P', 'D', 'F', 'E', 'A', 'T', '\x01'};

void put_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<char*>(b), 4);
}

uint32_t take_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  SPD_DATA_CHECK(in.gcount() == 4, "truncated feature file: ", path);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}
}  // namespace

void save_features(const std::string& dir, const FeatureDump& f) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string index_path = (fs::path(dir) / "index.tsv").string();
  std::ofstream index(index_path, std::ios::trunc);
  SPD_DATA_CHECK(index.good(), "cannot write feature index: ", index_path);
  index << "# spd-features v1\n";
  index << "# layer_agg=" << f.layer_agg << "\td=" << f.d << "\tsource=" << util::hex64(f.source)
        << "\n";
  for (size_t i = 0; i < f.ids.size(); ++i) {
    char fname[32];
    std::snprintf(fname, sizeof fname, "feat_%06zu.bin", i);
    const std::string fpath = (fs::path(dir) / fname).string();
    std::ofstream out(fpath, std::ios::binary);
    SPD_DATA_CHECK(out.good(), "cannot write feature file: ", fpath);
    out.write(kFeatMagic, 8);
    const Mat& mr = f.frames[i];
    put_u32(out, uint32_t(mr.rows));
    put_u32(out, uint32_t(mr.cols));
    std::vector<unsigned char> buf(mr.size() * 8);
    for (size_t e = 0; e < mr.size(); ++e) {
      uint64_t bits;
      std::memcpy(&bits, &mr.d[e], 8);
      for (int b = 0; b < 8; ++b) buf[e * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    SPD_DATA_CHECK(out.good(), "failed while writing feature file: ", fpath);
    index << f.ids[i] << '\t' << fname << '\t' << mr.rows << '\n';
  }
  SPD_DATA_CHECK(index.good(), "failed while writing feature index: ", index_path);
}

FeatureDump load_features(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string index_path = (fs::path(dir) / "index.tsv").string();
  std::ifstream index(index_path);
  SPD_DATA_CHECK(index.good(), "cannot open feature index: ", index_path);
  std::string line;
  SPD_DATA_CHECK(std::getline(index, line) && line == "# spd-features v1",
                 "unrecognized feature index header: ", index_path);
  SPD_DATA_CHECK(std::getline(index, line) && line.rfind("# layer_agg=", 0) == 0,
                 "missing feature metadata line: ", index_path);
  FeatureDump f;
  {
    const std::string meta = line.substr(2);
    size_t pos = 0;
    while (pos < meta.size()) {
      size_t tab = meta.find('\t', pos);
      if (tab == std::string::npos) tab = meta.size();
      const std::string kv = meta.substr(pos, tab - pos);
      const size_t eq = kv.find('=');
      SPD_DATA_CHECK(eq != std::string::npos, "bad feature metadata field '", kv, "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "layer_agg") f.layer_agg = val;
      if (key == "d") f.d = std::stoi(val);
      if (key == "source") f.source = std::stoull(val, nullptr, 16);
      pos = tab + 1;
    }
  }
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = line.find('\t', t1 + 1);
    SPD_DATA_CHECK(t1 != std::string::npos && t2 != std::string::npos,
                   "bad feature index row: ", line);
    f.ids.push_back(line.substr(0, t1));
    const std::string fname = line.substr(t1 + 1, t2 - t1 - 1);
    const std::string fpath = (fs::path(dir) / fname).string();
    std::ifstream in(fpath, std::ios::binary);
    SPD_DATA_CHECK(in.good(), "cannot open feature file: ", fpath);
    char magic[8];
    in.read(magic, 8);
    SPD_DATA_CHECK(in.gcount() == 8 && std::memcmp(magic, kFeatMagic, 8) == 0,
                   "not a feature file: ", fpath);
    const uint32_t rows = take_u32(in, fpath);
    const uint32_t cols = take_u32(in, fpath);
    SPD_DATA_CHECK(int(cols) == f.d, "feature width ", cols, " does not match index d=", f.d);
    Mat mr;
    mr.resize(int(rows), int(cols));
    std::vector<unsigned char> buf(mr.size() * 8);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    SPD_DATA_CHECK(size_t(in.gcount()) == buf.size(), "truncated feature file: ", fpath);
    for (size_t e = 0; e < mr.size(); ++e) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= uint64_t(buf[e * 8 + b]) << (8 * b);
      std::memcpy(&mr.d[e], &bits, 8);
    }
    f.frames.push_back(std::move(mr));
  }
  SPD_DATA_CHECK(!f.ids.empty(), "feature index lists no utterances: ", index_path);
  f.pooled.resize(int(f.ids.size()), f.d);
  for (size_t i = 0; i < f.ids.size(); ++i) {
    const Mat pool = time_mean(f.frames[i]);
    for (int j = 0; j < f.d; ++j) f.pooled(int(i), j) = pool(0, j);
  }
  return f;
}

// --- splits ----------------------------------------------------------------

namespace {

std::vector<int> labeled_indices(const Manifest& m) {
  std::vector<int> idx;
  for (int i = 0; i < int(m.utterances.size()); ++i)
    if (m.utterances[i].labeled()) idx.push_back(i);
  SPD_DATA_CHECK(!idx.empty(), "no labeled utterances to split");
  return idx;
}

void sort_fold(Fold& f) {
  std::sort(f.train.begin(), f.train.end());
  std::sort(f.val.begin(), f.val.end());
  std::sort(f.test.begin(), f.test.end());
}

}  // namespace

SplitPlan make_split(const Manifest& m, const std::string& scheme, int k, uint64_t seed) {
  SplitPlan plan;
  plan.scheme = scheme;
  plan.seed = seed;
  const std::vector<int> idx = labeled_indices(m);

  if (scheme == "session") {
    std::set<std::string> sess;
    for (int i : idx) sess.insert(m.utterances[i].session);
    SPD_DATA_CHECK(sess.size() >= 2, "session split needs >= 2 sessions, have ", sess.size());
    int fold_i = 0;
    for (const std::string& s : sess) {
      Fold f;
      std::vector<int> rest;
      for (int i : idx)
        (m.utterances[i].session == s ? f.test : rest).push_back(i);
      Rng r(derive_seed(seed, "val", uint64_t(fold_i)));
      r.shuffle(rest);
      const size_t n_val = std::max<size_t>(1, rest.size() / 5);
      f.val.assign(rest.begin(), rest.begin() + n_val);
      f.train.assign(rest.begin() + n_val, rest.end());
      sort_fold(f);
      plan.folds.push_back(std::move(f));
      ++fold_i;
    }
  } else if (scheme == "speaker") {
    std::set<std::string> spk_set;
    for (int i : idx) spk_set.insert(m.utterances[i].speaker);
    std::vector<std::string> spk(spk_set.begin(), spk_set.end());
    SPD_DATA_CHECK(k >= 2, "speaker split needs k >= 2, got ", k);
    SPD_DATA_CHECK(int(spk.size()) >= k, "speaker split needs >= ", k, " speakers, have ",
                   spk.size());
    std::map<std::string, int> group;
    for (size_t j = 0; j < spk.size(); ++j) group[spk[j]] = int(j % size_t(k));
    for (int f_i = 0; f_i < k; ++f_i) {
      Fold f;
      const int val_g = (f_i + 1) % k;
      for (int i : idx) {
        const int g = group[m.utterances[i].speaker];
        if (g == f_i)
          f.test.push_back(i);
        else if (g == val_g)
          f.val.push_back(i);
        else
          f.train.push_back(i);
      }
      sort_fold(f);
      plan.folds.push_back(std::move(f));
    }
  } else if (scheme == "random") {
    SPD_DATA_CHECK(k >= 2, "random split needs k >= 2, got ", k);
    const size_t chunk = idx.size() / size_t(k);
    SPD_DATA_CHECK(chunk >= 1, "random split: ", idx.size(), " utterances cannot fill ", k,
                   " folds");
    std::vector<int> order = idx;
    Rng r(derive_seed(seed, "random"));
    r.shuffle(order);
    for (int f_i = 0; f_i < k; ++f_i) {
      Fold f;
      f.test.assign(order.begin() + size_t(f_i) * chunk,
                    order.begin() + size_t(f_i + 1) * chunk);
      std::vector<int> rest;
      for (size_t j = 0; j < order.size(); ++j)
        if (j < size_t(f_i) * chunk || j >= size_t(f_i + 1) * chunk) rest.push_back(order[j]);
      Rng rv(derive_seed(seed, "val", uint64_t(f_i)));
      rv.shuffle(rest);
      const size_t n_val = std::max<size_t>(1, idx.size() / 10);
      SPD_DATA_CHECK(n_val < rest.size(), "random split leaves no training data");
      f.val.assign(rest.begin(), rest.begin() + n_val);
      f.train.assign(rest.begin() + n_val, rest.end());
      sort_fold(f);
      plan.folds.push_back(std::move(f));
    }
  } else {
    throw UsageError(util::str("unknown split scheme '", scheme, "'"));
  }

  for (const Fold& f : plan.folds)
    SPD_DATA_CHECK(!f.train.empty() && !f.val.empty() && !f.test.empty(),
                   "split left an empty train/val/test set");
  return plan;
}

// --- metrics ----------------------------------------------------------------

MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                              int n_classes) {
  SPD_DATA_CHECK(y_true.size() == y_pred.size(), "metrics length mismatch: ", y_true.size(),
                 " vs ", y_pred.size());
  SPD_DATA_CHECK(!y_true.empty(), "metrics need at least one pair");
  MetricsReport r;
  r.n_test = (long long)(y_true.size());
  r.confusion.assign(size_t(n_classes), std::vector<long long>(size_t(n_classes), 0));
  for (size_t i = 0; i < y_true.size(); ++i) {
    SPD_DATA_CHECK(y_true[i] >= 0 && y_true[i] < n_classes, "label ", y_true[i],
                   " outside 0..", n_classes - 1);
    SPD_DATA_CHECK(y_pred[i] >= 0 && y_pred[i] < n_classes, "prediction ", y_pred[i],
                   " outside 0..", n_classes - 1);
    r.confusion[size_t(y_true[i])][size_t(y_pred[i])]++;
  }
  long long correct = 0;
  for (int c = 0; c < n_classes; ++c) correct += r.confusion[size_t(c)][size_t(c)];
  r.wa = 100.0 * double(correct) / double(r.n_test);

  double recall_sum = 0.0;
  int present = 0;
  double wf1_sum = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    long long support = 0, colsum = 0;
    for (int j = 0; j < n_classes; ++j) {
      support += r.confusion[size_t(c)][size_t(j)];
      colsum += r.confusion[size_t(j)][size_t(c)];
    }
    if (support == 0) continue;  // absent classes are excluded from UA
    const long long tp = r.confusion[size_t(c)][size_t(c)];
    const double recall = double(tp) / double(support);
    recall_sum += recall;
    ++present;
    const double precision = colsum > 0 ? double(tp) / double(colsum) : 0.0;
    const double f1 =
        precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    wf1_sum += double(support) * f1;
  }
  r.ua = 100.0 * recall_sum / present;
  r.wf1 = 100.0 * wf1_sum / double(r.n_test);
  return r;
}

// --- probe heads -------------------------------------------------------------

ProbeConfig ProbeConfig::from_config(const Config& c) {
  ProbeConfig p;
  p.head = c.gets("probe.head");
  p.hidden = int(c.geti("probe.hidden"));
  p.epochs = int(c.geti("probe.epochs"));
  p.patience = int(c.geti("probe.patience"));
  p.lr = c.getd("probe.lr");
  p.batch = int(c.geti("probe.batch"));
  p.weight_decay = c.getd("probe.weight_decay");
  p.val_equals_test = c.getb("probe.val_equals_test");
  p.seed = derive_seed(uint64_t(c.geti("seed")), "probe");
  return p;
}

void ProbeConfig::validate() const {
  if (head != "linear" && head != "gru")
    throw UsageError(util::str("unknown probe head '", head, "'"));
  if (hidden < 1) throw UsageError("probe hidden size must be >= 1");
  if (epochs < 1) throw UsageError("probe epochs must be >= 1");
  if (patience < 1) throw UsageError("probe patience must be >= 1");
  if (batch < 1) throw UsageError("probe batch must be >= 1");
  if (lr <= 0) throw UsageError("probe lr must be positive");
  if (weight_decay < 0) throw UsageError("probe weight_decay must be >= 0");
}

namespace {

// Plain Adam over a flat list of arrays, with decoupled weight decay.
class AdamOpt {
 public:
  AdamOpt(std::vector<Mat*> params, double lr, double wd)
      : params_(std::move(params)), lr_(lr), wd_(wd) {
    for (Mat* p : params_) {
      Mat z;
      z.resize(p->rows, p->cols);
      m_.push_back(z);
      v_.push_back(std::move(z));
    }
  }
  void step(const std::vector<Mat*>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, double(t_));
    const double bc2 = 1.0 - std::pow(0.999, double(t_));
    for (size_t a = 0; a < params_.size(); ++a) {
      Mat& p = *params_[a];
      const Mat& g = *grads[a];
      for (size_t i = 0; i < p.size(); ++i) {
        m_[a].d[i] = 0.9 * m_[a].d[i] + 0.1 * g.d[i];
        v_[a].d[i] = 0.999 * v_[a].d[i] + 0.001 * g.d[i] * g.d[i];
        const double mhat = m_[a].d[i] / bc1;
        const double vhat = v_[a].d[i] / bc2;
        p.d[i] -= lr_ * (mhat / (std::sqrt(vhat) + 1e-8) + wd_ * p.d[i]);
      }
    }
  }

 private:
  std::vector<Mat*> params_;
  std::vector<Mat> m_, v_;
  double lr_, wd_;
  long long t_ = 0;
};

struct Standardizer {
  Mat mean, inv_std;  // 1 x d each

  void fit_rows(const Mat& x, const std::vector<int>& rows) {
    mean.resize(1, x.cols);
    inv_std.resize(1, x.cols);
    for (int i : rows)
      for (int j = 0; j < x.cols; ++j) mean(0, j) += x(i, j);
    const double inv_n = 1.0 / double(rows.size());
    for (int j = 0; j < x.cols; ++j) mean(0, j) *= inv_n;
    for (int i : rows)
      for (int j = 0; j < x.cols; ++j) {
        const double c = x(i, j) - mean(0, j);
        inv_std(0, j) += c * c;
      }
    for (int j = 0; j < x.cols; ++j)
      inv_std(0, j) = 1.0 / (std::sqrt(inv_std(0, j) * inv_n) + 1e-8);
  }

  void fit_frames(const std::vector<Mat>& frames, const std::vector<int>& utts) {
    const int d = frames[size_t(utts[0])].cols;
    mean.resize(1, d);
    inv_std.resize(1, d);
    long long n = 0;
    for (int u : utts) {
      const Mat& x = frames[size_t(u)];
      n += x.rows;
      for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < d; ++j) mean(0, j) += x(i, j);
    }
    const double inv_n = 1.0 / double(n);
    for (int j = 0; j < d; ++j) mean(0, j) *= inv_n;
    for (int u : utts) {
      const Mat& x = frames[size_t(u)];
      for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < d; ++j) {
          const double c = x(i, j) - mean(0, j);
          inv_std(0, j) += c * c;
        }
    }
    for (int j = 0; j < d; ++j)
      inv_std(0, j) = 1.0 / (std::sqrt(inv_std(0, j) * inv_n) + 1e-8);
  }

  void apply_row(const Mat& x, int row, double* out) const {
    for (int j = 0; j < x.cols; ++j) out[j] = (x(row, j) - mean(0, j)) * inv_std(0, j);
  }
  Mat apply(const Mat& x) const {
    Mat y;
    y.resize(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) apply_row(x, i, &y(i, 0));
    return y;
  }
};

Mat init_weight(int rows, int cols, Rng& r) {
  Mat w;
  w.resize(rows, cols);
  const double scale = 1.0 / std::sqrt(double(rows));
  for (size_t i = 0; i < w.size(); ++i) w.d[i] = r.normal(0.0, scale);
  return w;
}

int argmax_row(const Mat& m, int row) {
  int best = 0;
  for (int j = 1; j < m.cols; ++j)
    if (m(row, j) > m(row, best)) best = j;
  return best;
}

// Softmax cross-entropy on logits; fills dlogits with d(mean loss)/dlogits.
double softmax_ce(const Mat& logits, const std::vector<int>& y, Mat* dlogits) {
  const int B = logits.rows, C = logits.cols;
  if (dlogits) dlogits->resize(B, C);
  double loss = 0.0;
  for (int i = 0; i < B; ++i) {
    double mx = logits(i, 0);
    for (int j = 1; j < C; ++j) mx = std::max(mx, logits(i, j));
    double zsum = 0.0;
    for (int j = 0; j < C; ++j) zsum += std::exp(logits(i, j) - mx);
    const double logz = std::log(zsum) + mx;
    loss += logz - logits(i, y[size_t(i)]);
    if (dlogits)
      for (int j = 0; j < C; ++j) {
        const double p = std::exp(logits(i, j) - logz);
        (*dlogits)(i, j) = (p - (j == y[size_t(i)] ? 1.0 : 0.0)) / B;
      }
  }
  return loss / B;
}

struct LinearHead {
  Mat w1, b1, w2, b2;

  LinearHead(int d, int h, int C, Rng& r) {
    w1 = init_weight(d, h, r);
    b1.resize(1, h);
    w2 = init_weight(h, C, r);
    b2.resize(1, C);
  }

  Mat forward(const Mat& x, Mat* hidden) const {
    Mat h;
    kernels::matmul(x, w1, h);
    kernels::add_bias(h, b1);
    for (size_t i = 0; i < h.size(); ++i) h.d[i] = std::max(0.0, h.d[i]);
    Mat logits;
    kernels::matmul(h, w2, logits);
    kernels::add_bias(logits, b2);
    if (hidden) *hidden = std::move(h);
    return logits;
  }

  double train_batch(const Mat& x, const std::vector<int>& y, AdamOpt& opt) {
    Mat h;
    const Mat logits = forward(x, &h);
    Mat dlogits;
    const double loss = softmax_ce(logits, y, &dlogits);
    Mat dw2, db2, dh, dw1, db1;
    kernels::matmul_tn(h, dlogits, dw2);
    kernels::col_sums(dlogits, db2);
    kernels::matmul_nt(dlogits, w2, dh);
    for (size_t i = 0; i < dh.size(); ++i)
      if (h.d[i] <= 0.0) dh.d[i] = 0.0;
    kernels::matmul_tn(x, dh, dw1);
    kernels::col_sums(dh, db1);
    opt.step({&dw1, &db1, &dw2, &db2});
    return loss;
  }
};

// Two stacked GRU layers; the top layer's final state feeds a linear
// classifier. Gates are ordered r|z|n in the fused weight arrays.
struct GruHead {
  int in_dim, h, C;
  Mat wx[2], wh[2], bx[2], bh[2];
  Mat wo, bo;

  GruHead(int in_dim_, int h_, int C_, Rng& r) : in_dim(in_dim_), h(h_), C(C_) {
    for (int l = 0; l < 2; ++l) {
      const int in = l == 0 ? in_dim : h;
      wx[l] = init_weight(in, 3 * h, r);
      wh[l] = init_weight(h, 3 * h, r);
      bx[l].resize(1, 3 * h);
      bh[l].resize(1, 3 * h);
    }
    wo = init_weight(h, C, r);
    bo.resize(1, C);
  }

  std::vector<Mat*> params() {
    return {&wx[0], &wh[0], &bx[0], &bh[0], &wx[1], &wh[1], &bx[1], &bh[1], &wo, &bo};
  }

  struct LayerTrace {
    Mat x;                 // T x in
    Mat hs;                // (T+1) x h, row 0 = zeros
    Mat r, z, n, hn;       // T x h each; hn = wh-side pre-activation of n
  };

  void layer_forward(int l, const Mat& x, LayerTrace& tr) const {
    const int T = x.rows;
    tr.x = x;
    tr.hs.resize(T + 1, h);
    tr.r.resize(T, h);
    tr.z.resize(T, h);
    tr.n.resize(T, h);
    tr.hn.resize(T, h);
    Mat ax;
    kernels::matmul(x, wx[l], ax);
    kernels::add_bias(ax, bx[l]);
    Mat hrow, ah;
    hrow.resize(1, h);
    for (int t = 0; t < T; ++t) {
      for (int j = 0; j < h; ++j) hrow(0, j) = tr.hs(t, j);
      kernels::matmul(hrow, wh[l], ah);
      kernels::add_bias(ah, bh[l]);
      for (int j = 0; j < h; ++j) {
        const double rg = 1.0 / (1.0 + std::exp(-(ax(t, j) + ah(0, j))));
        const double zg = 1.0 / (1.0 + std::exp(-(ax(t, h + j) + ah(0, h + j))));
        const double hn = ah(0, 2 * h + j);
        const double ng = std::tanh(ax(t, 2 * h + j) + rg * hn);
        tr.r(t, j) = rg;
        tr.z(t, j) = zg;
        tr.n(t, j) = ng;
        tr.hn(t, j) = hn;
        tr.hs(t + 1, j) = (1.0 - zg) * ng + zg * tr.hs(t, j);
      }
    }
  }

  // dh_seq: per-step gradient on this layer's outputs (T x h); dlast is added
  // at the final step. Returns d(loss)/d(layer input).
  Mat layer_backward(int l, const LayerTrace& tr, const Mat& dh_seq, const Mat& dlast,
                     Mat& dwx, Mat& dwh, Mat& dbx, Mat& dbh) const {
    const int T = tr.x.rows;
    dwx.resize(wx[l].rows, wx[l].cols);
    dwh.resize(wh[l].rows, wh[l].cols);
    dbx.resize(1, 3 * h);
    dbh.resize(1, 3 * h);
    Mat dx;
    dx.resize(T, tr.x.cols);
    std::vector<double> dh(size_t(h), 0.0);
    std::vector<double> da(size_t(3 * h)), db(size_t(3 * h));
    for (int t = T - 1; t >= 0; --t) {
      if (dh_seq.rows == T)
        for (int j = 0; j < h; ++j) dh[size_t(j)] += dh_seq(t, j);
      if (t == T - 1 && dlast.rows == 1)
        for (int j = 0; j < h; ++j) dh[size_t(j)] += dlast(0, j);
      for (int j = 0; j < h; ++j) {
        const double rg = tr.r(t, j), zg = tr.z(t, j), ng = tr.n(t, j);
        const double dzg = dh[size_t(j)] * (tr.hs(t, j) - ng);
        const double dng = dh[size_t(j)] * (1.0 - zg);
        const double dn_pre = dng * (1.0 - ng * ng);
        const double drg = dn_pre * tr.hn(t, j);
        const double dr_pre = drg * rg * (1.0 - rg);
        const double dz_pre = dzg * zg * (1.0 - zg);
        da[size_t(j)] = dr_pre;
        da[size_t(h + j)] = dz_pre;
        da[size_t(2 * h + j)] = dn_pre;
        db[size_t(j)] = dr_pre;
        db[size_t(h + j)] = dz_pre;
        db[size_t(2 * h + j)] = dn_pre * rg;
        dh[size_t(j)] *= zg;  // direct carry to h_{t-1}
      }
      for (int j = 0; j < 3 * h; ++j) {
        dbx(0, j) += da[size_t(j)];
        dbh(0, j) += db[size_t(j)];
      }
      for (int i = 0; i < tr.x.cols; ++i) {
        const double xi = tr.x(t, i);
        double acc = 0.0;
        for (int j = 0; j < 3 * h; ++j) {
          dwx(i, j) += xi * da[size_t(j)];
          acc += da[size_t(j)] * wx[l](i, j);
        }
        dx(t, i) = acc;
      }
      for (int i = 0; i < h; ++i) {
        const double hi = tr.hs(t, i);
        double acc = 0.0;
        for (int j = 0; j < 3 * h; ++j) {
          dwh(i, j) += hi * db[size_t(j)];
          acc += db[size_t(j)] * wh[l](i, j);
        }
        dh[size_t(i)] += acc;
      }
    }
    return dx;
  }

  int predict(const Mat& x) const {
    LayerTrace t0, t1;
    layer_forward(0, x, t0);
    Mat mid;
    mid.resize(x.rows, h);
    for (int t = 0; t < x.rows; ++t)
      for (int j = 0; j < h; ++j) mid(t, j) = t0.hs(t + 1, j);
    layer_forward(1, mid, t1);
    Mat last;
    last.resize(1, h);
    for (int j = 0; j < h; ++j) last(0, j) = t1.hs(x.rows, j);
    Mat logits;
    kernels::matmul(last, wo, logits);
    kernels::add_bias(logits, bo);
    return argmax_row(logits, 0);
  }

  // Forward + backward for one sequence; accumulates into the grad list
  // aligned with params(). Returns the sequence loss.
  double accumulate_sequence(const Mat& x, int label, std::vector<Mat>& grads) {
    LayerTrace t0, t1;
    layer_forward(0, x, t0);
    Mat mid;
    mid.resize(x.rows, h);
    for (int t = 0; t < x.rows; ++t)
      for (int j = 0; j < h; ++j) mid(t, j) = t0.hs(t + 1, j);
    layer_forward(1, mid, t1);
    Mat last;
    last.resize(1, h);
    for (int j = 0; j < h; ++j) last(0, j) = t1.hs(x.rows, j);
    Mat logits;
    kernels::matmul(last, wo, logits);
    kernels::add_bias(logits, bo);
    Mat dlogits;
    const double loss = softmax_ce(logits, {label}, &dlogits);

    Mat dwo, dbo, dlast;
    kernels::matmul_tn(last, dlogits, dwo);
    kernels::col_sums(dlogits, dbo);
    kernels::matmul_nt(dlogits, wo, dlast);

    Mat dwx1, dwh1, dbx1, dbh1;
    Mat none;
    const Mat dmid = layer_backward(1, t1, none, dlast, dwx1, dwh1, dbx1, dbh1);
    Mat dwx0, dwh0, dbx0, dbh0;
    Mat nolast;
    layer_backward(0, t0, dmid, nolast, dwx0, dwh0, dbx0, dbh0);

    const Mat* parts[10] = {&dwx0, &dwh0, &dbx0, &dbh0, &dwx1,
                            &dwh1, &dbx1, &dbh1, &dwo,  &dbo};
    for (int a = 0; a < 10; ++a)
      for (size_t i = 0; i < parts[a]->size(); ++i) grads[size_t(a)].d[i] += parts[a]->d[i];
    return loss;
  }
};

}  // namespace

std::vector<MetricsReport> train_probe(const FeatureDump& f, const Manifest& m,
                                       const SplitPlan& split, const ProbeConfig& pc) {
  pc.validate();
  SPD_DATA_CHECK(f.ids.size() == m.utterances.size(), "feature dump covers ", f.ids.size(),
                 " utterances, manifest has ", m.utterances.size());
  for (size_t i = 0; i < f.ids.size(); ++i)
    SPD_DATA_CHECK(f.ids[i] == m.utterances[i].id, "feature dump does not match manifest at '",
                   f.ids[i], "'");
  SPD_DATA_CHECK(!split.folds.empty(), "split has no folds");
  const int C = int(m.label_set.size());
  SPD_DATA_CHECK(C >= 2, "need >= 2 classes, have ", C);
  std::map<std::string, int> label_id;
  for (int c = 0; c < C; ++c) label_id[m.label_set[size_t(c)]] = c;
  std::vector<int> y_all(m.utterances.size(), -1);
  for (size_t i = 0; i < m.utterances.size(); ++i)
    if (m.utterances[i].labeled()) y_all[i] = label_id.at(m.utterances[i].label);

  std::vector<MetricsReport> reports;
  for (size_t fold_i = 0; fold_i < split.folds.size(); ++fold_i) {
    const Fold& fold = split.folds[fold_i];
    const std::vector<int>& val_ids = pc.val_equals_test ? fold.test : fold.val;
    for (const std::vector<int>* ids : {&fold.train, &val_ids, &fold.test})
      for (int i : *ids)
        SPD_DATA_CHECK(y_all[size_t(i)] >= 0, "unlabeled utterance '",
                       m.utterances[size_t(i)].id, "' in a probe fold");

    Rng init_rng(derive_seed(pc.seed, "probe_init", uint64_t(fold_i)));
    Standardizer stz;

    auto wa_of = [&](const std::vector<int>& ids, auto&& predict) {
      long long ok = 0;
      for (int i : ids) ok += predict(i) == y_all[size_t(i)] ? 1 : 0;
      return 100.0 * double(ok) / double(ids.size());
    };

    std::vector<int> preds;
    if (pc.head == "linear") {
      stz.fit_rows(f.pooled, fold.train);
      const Mat x_all = stz.apply(f.pooled);
      LinearHead head(f.d, pc.hidden, C, init_rng);
      AdamOpt opt(
          {&head.w1, &head.b1, &head.w2, &head.b2}, pc.lr, pc.weight_decay);
      auto predict_one = [&](int i) {
        Mat x;
        x.resize(1, f.d);
        for (int j = 0; j < f.d; ++j) x(0, j) = x_all(i, j);
        return argmax_row(head.forward(x, nullptr), 0);
      };

      LinearHead best = head;
      double best_wa = -1.0;
      int stale = 0;
      std::vector<int> order = fold.train;
      for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        Rng r(derive_seed(pc.seed, "probe_order", uint64_t(fold_i), uint64_t(epoch)));
        r.shuffle(order);
        for (size_t at = 0; at < order.size(); at += size_t(pc.batch)) {
          const size_t bsz = std::min(size_t(pc.batch), order.size() - at);
          Mat x;
          x.resize(int(bsz), f.d);
          std::vector<int> y(bsz);
          for (size_t b = 0; b < bsz; ++b) {
            const int i = order[at + b];
            for (int j = 0; j < f.d; ++j) x(int(b), j) = x_all(i, j);
            y[b] = y_all[size_t(i)];
          }
          head.train_batch(x, y, opt);
        }
        const double wa = wa_of(val_ids, predict_one);
        if (wa > best_wa) {
          best_wa = wa;
          best = head;
          stale = 0;
        } else if (++stale >= pc.patience) {
          break;
        }
      }
      head = best;
      for (int i : fold.test) preds.push_back(predict_one(i));
    } else {
      stz.fit_frames(f.frames, fold.train);
      GruHead head(f.d, pc.hidden, C, init_rng);
      auto seq_of = [&](int i) { return stz.apply(f.frames[size_t(i)]); };
      auto predict_one = [&](int i) { return head.predict(seq_of(i)); };

      GruHead best = head;
      double best_wa = -1.0;
      int stale = 0;
      AdamOpt opt(head.params(), pc.lr, pc.weight_decay);
      std::vector<int> order = fold.train;
      for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        Rng r(derive_seed(pc.seed, "probe_order", uint64_t(fold_i), uint64_t(epoch)));
        r.shuffle(order);
        for (size_t at = 0; at < order.size(); at += size_t(pc.batch)) {
          const size_t bsz = std::min(size_t(pc.batch), order.size() - at);
          std::vector<Mat> grads;
          for (Mat* p : head.params()) {
            Mat z;
            z.resize(p->rows, p->cols);
            grads.push_back(std::move(z));
          }
          for (size_t b = 0; b < bsz; ++b) {
            const int i = order[at + b];
            head.accumulate_sequence(seq_of(i), y_all[size_t(i)], grads);
          }
          const double inv = 1.0 / double(bsz);
          std::vector<Mat*> gp;
          for (Mat& g : grads) {
            for (size_t e = 0; e < g.size(); ++e) g.d[e] *= inv;
            gp.push_back(&g);
          }
          opt.step(gp);
        }
        const double wa = wa_of(val_ids, predict_one);
        if (wa > best_wa) {
          best_wa = wa;
          best = head;
          stale = 0;
        } else if (++stale >= pc.patience) {
          break;
        }
      }
      head = best;
      for (int i : fold.test) preds.push_back(predict_one(i));
    }

    std::vector<int> y_test;
    for (int i : fold.test) y_test.push_back(y_all[size_t(i)]);
    reports.push_back(compute_metrics(y_test, preds, C));
  }
  return reports;
}

// --- reports ----------------------------------------------------------------

namespace {
struct Agg {
  double mean_wa = 0, mean_ua = 0, mean_wf1 = 0;
  double std_wa = 0, std_ua = 0, std_wf1 = 0;
};

Agg aggregate(const std::vector<MetricsReport>& rs) {
  Agg a;
  const double n = double(rs.size());
  for (const MetricsReport& r : rs) {
    a.mean_wa += r.wa;
    a.mean_ua += r.ua;
    a.mean_wf1 += r.wf1;
  }
  a.mean_wa /= n;
  a.mean_ua /= n;
  a.mean_wf1 /= n;
  for (const MetricsReport& r : rs) {
    a.std_wa += (r.wa - a.mean_wa) * (r.wa - a.mean_wa);
    a.std_ua += (r.ua - a.mean_ua) * (r.ua - a.mean_ua);
    a.std_wf1 += (r.wf1 - a.mean_wf1) * (r.wf1 - a.mean_wf1);
  }
  a.std_wa = std::sqrt(a.std_wa / n);
  a.std_ua = std::sqrt(a.std_ua / n);
  a.std_wf1 = std::sqrt(a.std_wf1 / n);
  return a;
}
}  // namespace

std::string render_report_tsv(const std::vector<MetricsReport>& reports) {
  SPD_DATA_CHECK(!reports.empty(), "no fold reports to render");
  std::string out = "fold\twa\tua\twf1\tn_test\n";
  for (size_t i = 0; i < reports.size(); ++i) {
    const MetricsReport& r = reports[i];
    out += util::str(i, '\t', util::format_g17(r.wa), '\t', util::format_g17(r.ua), '\t',
                     util::format_g17(r.wf1), '\t', r.n_test, '\n');
  }
  const Agg a = aggregate(reports);
  out += util::str("mean\t", util::format_g17(a.mean_wa), '\t', util::format_g17(a.mean_ua),
                   '\t', util::format_g17(a.mean_wf1), "\t-\n");
  out += util::str("std\t", util::format_g17(a.std_wa), '\t', util::format_g17(a.std_ua), '\t',
                   util::format_g17(a.std_wf1), "\t-\n");
  return out;
}

std::string render_report_text(const std::vector<MetricsReport>& reports) {
  SPD_DATA_CHECK(!reports.empty(), "no fold reports to render");
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%-6s %8s %8s %8s %8s\n", "fold", "WA", "UA", "WF1",
                "n_test");
  out += line;
  for (size_t i = 0; i < reports.size(); ++i) {
    const MetricsReport& r = reports[i];
    std::snprintf(line, sizeof line, "%-6zu %8.2f %8.2f %8.2f %8lld\n", i, r.wa, r.ua, r.wf1,
                  r.n_test);
    out += line;
  }
  const Agg a = aggregate(reports);
  std::snprintf(line, sizeof line, "%-6s %8.2f %8.2f %8.2f %8s\n", "mean", a.mean_wa, a.mean_ua,
                a.mean_wf1, "-");
  out += line;
  std::snprintf(line, sizeof line, "%-6s %8.2f %8.2f %8.2f %8s\n", "std", a.std_wa, a.std_ua,
                a.std_wf1, "-");
  out += line;
  out += "# std is the population standard deviation over folds.\n";
  out += "# UA averages per-class recall over classes present in each fold's references.\n";
  return out;
}

double mean_wa(const std::vector<MetricsReport>& reports) {
  SPD_DATA_CHECK(!reports.empty(), "no fold reports to average");
  double s = 0.0;
  for (const MetricsReport& r : reports) s += r.wa;
  return s / double(reports.size());
}

}  // namespace spd
