// src/distill.cpp

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

#include "spd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "spd/common.hpp"

namespace spd {

bool MaskSpec::contains(int i) const {
  return std::binary_search(indices.begin(), indices.end(), i);
}

MaskSpec sample_mask(int n_frames, double p, int l, Rng& rng) {
  SPD_DATA_CHECK(n_frames >= 1, "mask sampling needs at least one frame");
  SPD_DATA_CHECK(l >= 1, "mask span length must be >= 1, got ", l);
  std::vector<char> hit(n_frames, 0);
  for (int i = 0; i < n_frames; ++i) {
    const double u = rng.uniform();
    if (u < p) {
      const int end = std::min(i + l, n_frames);
      for (int j = i; j < end; ++j) hit[j] = 1;
    }
  }
  MaskSpec m;
  m.p = p;
  m.l = l;
  for (int i = 0; i < n_frames; ++i)
    if (hit[i]) m.indices.push_back(i);
  return m;
}

double expected_mask_fraction(int n_frames, double p, int l) {
  double sum = 0.0;
  for (int i = 0; i < n_frames; ++i) {
    const int starts = std::min(i + 1, l);
    sum += 1.0 - std::pow(1.0 - p, starts);
  }
  return sum / n_frames;
}

FrameLoss loss_frame(const Mat& ys, const Mat& yt, const MaskSpec& mask) {
  SPD_DATA_CHECK(ys.same_shape(yt), "frame loss shape mismatch: ", ys.rows, "x", ys.cols,
                 " vs ", yt.rows, "x", yt.cols);
  FrameLoss r;
  if (mask.empty()) {
    r.empty = true;
    return r;
  }
  double sum = 0.0;
  for (int i : mask.indices) {
    SPD_DATA_CHECK(i < ys.rows, "mask index ", i, " outside ", ys.rows, " frames");
    for (int j = 0; j < ys.cols; ++j) {
      const double dlt = ys(i, j) - yt(i, j);
      sum += dlt * dlt;
    }
  }
  r.value = sum / (double(mask.m()) * ys.cols);
  return r;
}

double loss_utterance(const Mat& us_bar, const Mat& yt_bar) {
  SPD_DATA_CHECK(us_bar.same_shape(yt_bar) && us_bar.rows == 1,
                 "utterance loss wants two 1-row vectors of equal width");
  double sum = 0.0;
  for (int j = 0; j < us_bar.cols; ++j) {
    const double dlt = us_bar(0, j) - yt_bar(0, j);
    sum += dlt * dlt;
  }
  return sum / us_bar.cols;
}

namespace {
Mat row_mean(const Mat& m) {
  Mat r;
  r.resize(1, m.cols);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) r(0, j) += m(i, j);
  const double inv = 1.0 / m.rows;
  for (int j = 0; j < m.cols; ++j) r(0, j) *= inv;
  return r;
}
}  // namespace

void utterance_pool(const StudentOutput& out, const Mat& yt, const std::string& variant,
                    Mat& us_bar, Mat& yt_bar) {
  const int nu = out.utt.rows;
  if (variant == "token") {
    if (nu != 1) throw UsageError(util::str("token variant needs 1 utterance token, have ", nu));
    us_bar = out.utt;
  } else if (variant == "chunk") {
    if (nu < 2) throw UsageError(util::str("chunk variant needs >1 utterance tokens, have ", nu));
    us_bar = row_mean(out.utt);
  } else if (variant == "global") {
    if (nu != 0) throw UsageError(util::str("global variant needs 0 utterance tokens, have ", nu));
    us_bar = row_mean(out.frames);
  } else {
    throw UsageError(util::str("unknown utterance variant '", variant, "'"));
  }
  yt_bar = row_mean(yt);
}

LossBreakdown total_loss(double l_frm, double l_utt, double alpha) {
  LossBreakdown lb;
  lb.l_frm = l_frm;
  lb.l_utt = l_utt;
  lb.alpha = alpha;
  lb.total = l_frm + alpha * l_utt;
  return lb;
}

double tau_at_step(const EmaSchedule& sched, long long step) {
  SPD_DATA_CHECK(step >= 0, "negative schedule step ", step);
  if (sched.total_steps <= 0) return sched.tau_start;
  if (step >= sched.total_steps) return sched.tau_end;
  if (step == 0) return sched.tau_start;
  const double f = double(step) / double(sched.total_steps);
  return sched.tau_start + (sched.tau_end - sched.tau_start) * f;
}

double lr_at_step(long long step, long long total_steps, double lr_peak, double warmup_frac) {
  if (total_steps <= 0) return 0.0;
  if (step <= 0) return 0.0;
  if (step >= total_steps) return lr_peak * 0.5 * (1.0 + std::cos(M_PI));
  long long warm = llround(warmup_frac * double(total_steps));
  if (warm < 1) warm = 1;
  if (step <= warm) return lr_peak * double(step) / double(warm);
  const double phase = double(step - warm) / double(total_steps - warm);
  return lr_peak * 0.5 * (1.0 + std::cos(M_PI * phase));
}

void ema_update(Parameters& teacher, const Parameters& student, double tau) {
  SPD_DATA_CHECK(teacher.size() == student.size(), "teacher/student parameter sets differ");
  auto ts = student.begin();
  for (auto& [name, tm] : teacher) {
    SPD_DATA_CHECK(ts != student.end() && ts->first == name && tm.same_shape(ts->second),
                   "teacher/student mismatch at '", name, "'");
    const Mat& sm = ts->second;
    ++ts;
    if (name.rfind("fe.", 0) == 0 || tau == 0.0) {
      tm = sm;
      continue;
    }
    if (tau == 1.0) continue;
    // t + (1-tau)*(s-t) keeps the fixed point exact when t == s.
    const double a = 1.0 - tau;
    for (size_t i = 0; i < tm.size(); ++i) tm.d[i] += a * (sm.d[i] - tm.d[i]);
  }
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.utt_variant = c.gets("train.utt_variant");
  t.loss_mode = c.gets("train.loss_mode");
  t.alpha = c.getd("train.alpha");
  t.lr_peak = c.getd("train.lr");
  t.weight_decay = c.getd("train.weight_decay");
  t.warmup_frac = c.getd("train.warmup_frac");
  t.mask_prob = c.getd("train.mask_prob");
  t.mask_len = int(c.geti("train.mask_len"));
  t.tau_start = c.getd("train.tau_start");
  t.tau_end = c.getd("train.tau_end");
  t.clip_norm = c.getd("train.clip_norm");
  t.beta1 = c.getd("train.beta1");
  t.beta2 = c.getd("train.beta2");
  t.adam_eps = c.getd("train.adam_eps");
  t.epochs = int(c.geti("train.epochs"));
  t.sample_budget = c.geti("train.sample_budget");
  t.update_freq = int(c.geti("train.update_freq"));
  t.seed = uint64_t(c.geti("seed"));
  t.save_every = c.geti("train.save_every");
  t.log_every = c.geti("train.log_every");
  return t;
}

void TrainConfig::validate(const ModelConfig& mc) const {
  if (loss_mode != "both" && loss_mode != "frm_only" && loss_mode != "utt_only")
    throw UsageError(util::str("unknown loss_mode '", loss_mode, "'"));
  if (loss_mode != "frm_only") {
    if (utt_variant == "token" && mc.utt_tokens != 1)
      throw UsageError(util::str("token variant requires model.utt_tokens=1, have ",
                                 mc.utt_tokens));
    if (utt_variant == "chunk" && mc.utt_tokens < 2)
      throw UsageError(util::str("chunk variant requires model.utt_tokens>1, have ",
                                 mc.utt_tokens));
    if (utt_variant == "global" && mc.utt_tokens != 0)
      throw UsageError(util::str("global variant requires model.utt_tokens=0, have ",
                                 mc.utt_tokens));
    if (utt_variant != "token" && utt_variant != "chunk" && utt_variant != "global")
      throw UsageError(util::str("unknown utt_variant '", utt_variant, "'"));
  }
  if (mask_prob < 0.0 || mask_prob > 1.0)
    throw UsageError(util::str("mask_prob must be in [0,1], got ", mask_prob));
  if (mask_len < 1) throw UsageError("mask_len must be >= 1");
  if (alpha < 0.0) throw UsageError("alpha must be >= 0");
  if (!(tau_start >= 0.0 && tau_start <= tau_end && tau_end <= 1.0))
    throw UsageError("need 0 <= tau_start <= tau_end <= 1");
  if (warmup_frac <= 0.0 || warmup_frac >= 1.0)
    throw UsageError("warmup_frac must be in (0,1)");
  if (epochs < 0) throw UsageError("epochs must be >= 0");
  if (sample_budget < 1) throw UsageError("sample_budget must be positive");
  if (update_freq < 1) throw UsageError("update_freq must be >= 1");
  if (clip_norm < 0) throw UsageError("clip_norm must be >= 0");
}

// --- checkpoint container ----------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'S', 'P', 'D', 'C', 'K', 'P', 'T', '\x01'};
constexpr uint32_t kCkptVersion = 1;

class HashWriter {
 public:
  explicit HashWriter(const std::string& path) : out_(path, std::ios::binary) {
    SPD_DATA_CHECK(out_.good(), "cannot write checkpoint: ", path);
  }
  void bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), std::streamsize(n));
    h_ = util::fnv1a(p, n, h_);
  }
  void u32(uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void mat(const Mat& m) {
    u32(uint32_t(m.rows));
    u32(uint32_t(m.cols));
    std::vector<unsigned char> buf(m.size() * 8);
    for (size_t i = 0; i < m.size(); ++i) {
      uint64_t bits;
      std::memcpy(&bits, &m.d[i], 8);
      for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    bytes(buf.data(), buf.size());
  }
  void finish(const std::string& path) {
    const uint64_t h = h_;
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(h >> (8 * i));
    out_.write(reinterpret_cast<char*>(b), 8);
    SPD_DATA_CHECK(out_.good(), "failed while writing checkpoint: ", path);
  }

 private:
  std::ofstream out_;
  uint64_t h_ = 0xcbf29ce484222325ull;
};

class HashReader {
 public:
  explicit HashReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    SPD_DATA_CHECK(in_.good(), "cannot open checkpoint: ", path);
  }
  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), std::streamsize(n));
    SPD_DATA_CHECK(size_t(in_.gcount()) == n, "truncated checkpoint: ", path_);
    h_ = util::fnv1a(p, n, h_);
  }
  uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    SPD_DATA_CHECK(n < (1u << 20), "implausible string length in checkpoint: ", path_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Mat mat() {
    const uint32_t rows = u32();
    const uint32_t cols = u32();
    SPD_DATA_CHECK(uint64_t(rows) * cols < (1ull << 32), "implausible array in checkpoint");
    Mat m;
    m.resize(int(rows), int(cols));
    std::vector<unsigned char> buf(m.size() * 8);
    bytes(buf.data(), buf.size());
    for (size_t i = 0; i < m.size(); ++i) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= uint64_t(buf[i * 8 + b]) << (8 * b);
      std::memcpy(&m.d[i], &bits, 8);
    }
    return m;
  }
  void verify_footer() {
    const uint64_t expect = h_;
    unsigned char b[8];
    in_.read(reinterpret_cast<char*>(b), 8);
    SPD_DATA_CHECK(in_.gcount() == 8, "truncated checkpoint footer: ", path_);
    uint64_t got = 0;
    for (int i = 0; i < 8; ++i) got |= uint64_t(b[i]) << (8 * i);
    SPD_DATA_CHECK(got == expect, "checkpoint checksum mismatch: ", path_);
  }

 private:
  std::ifstream in_;
  std::string path_;
  uint64_t h_ = 0xcbf29ce484222325ull;
};

void write_section(HashWriter& w, const std::string& name, const Parameters& p) {
  w.str(name);
  w.u32(uint32_t(p.size()));
  for (const auto& [tname, m] : p) {
    w.str(tname);
    w.mat(m);
  }
}

Parameters read_section(HashReader& r, const std::string& want) {
  const std::string name = r.str();
  SPD_DATA_CHECK(name == want, "checkpoint section '", name, "' where '", want, "' expected");
  const uint32_t n = r.u32();
  Parameters p;
  for (uint32_t i = 0; i < n; ++i) {
    std::string tname = r.str();
    p.emplace(std::move(tname), r.mat());
  }
  return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const Config& cfg, const TrainerState& st,
                     long long total_opt_steps) {
  HashWriter w(path);
  w.bytes(kCkptMagic, 8);
  w.u32(kCkptVersion);
  w.u64(uint64_t(st.opt_steps));
  w.u64(uint64_t(st.batches_done));
  w.u64(uint64_t(total_opt_steps));
  w.str(cfg.canonical_text());
  w.u32(4);
  write_section(w, "student", st.student);
  write_section(w, "teacher", st.teacher);
  write_section(w, "adam_m", st.adam_m);
  write_section(w, "adam_v", st.adam_v);
  w.finish(path);
}

TrainerState load_checkpoint(const std::string& path, Config& cfg_out,
                             long long& total_opt_steps_out) {
  HashReader r(path);
  char magic[8];
  r.bytes(magic, 8);
  SPD_DATA_CHECK(std::memcmp(magic, kCkptMagic, 8) == 0, "not a checkpoint file: ", path);
  const uint32_t version = r.u32();
  SPD_DATA_CHECK(version == kCkptVersion, "unsupported checkpoint version ", version);
  TrainerState st;
  st.opt_steps = (long long)(r.u64());
  st.batches_done = (long long)(r.u64());
  total_opt_steps_out = (long long)(r.u64());
  const std::string cfg_text = r.str();
  cfg_out = Config::preset("desk");
  size_t pos = 0;
  while (pos < cfg_text.size()) {
    size_t nl = cfg_text.find('\n', pos);
    if (nl == std::string::npos) nl = cfg_text.size();
    const std::string line = cfg_text.substr(pos, nl - pos);
    if (!line.empty()) cfg_out.set_kv(line);
    pos = nl + 1;
  }
  const uint32_t n_sections = r.u32();
  SPD_DATA_CHECK(n_sections == 4, "expected 4 checkpoint sections, got ", n_sections);
  st.student = read_section(r, "student");
  st.teacher = read_section(r, "teacher");
  st.adam_m = read_section(r, "adam_m");
  st.adam_v = read_section(r, "adam_v");
  r.verify_footer();
  return st;
}

// --- trainer ------------------------------------------------------------------

Trainer::Trainer(const Config& cfg, long long total_opt_steps)
    : mcfg_(ModelConfig::from_config(cfg)),
      tcfg_(TrainConfig::from_config(cfg)),
      total_opt_steps_(total_opt_steps) {
  tcfg_.validate(mcfg_);
  state_.student = init_parameters(mcfg_, derive_seed(tcfg_.seed, "init"));
  state_.teacher = state_.student;
  state_.adam_m = zeros_like(state_.student);
  state_.adam_v = zeros_like(state_.student);
}

Trainer::Trainer(const Config& cfg, long long total_opt_steps, TrainerState st)
    : mcfg_(ModelConfig::from_config(cfg)),
      tcfg_(TrainConfig::from_config(cfg)),
      state_(std::move(st)),
      total_opt_steps_(total_opt_steps) {
  tcfg_.validate(mcfg_);
  const Parameters ref = init_parameters(mcfg_, 0);
  SPD_DATA_CHECK(ref.size() == state_.student.size(),
                 "checkpoint parameters do not fit the configured model");
}

double Trainer::current_tau() const {
  return tau_at_step({tcfg_.tau_start, tcfg_.tau_end, total_opt_steps_}, state_.opt_steps);
}

double Trainer::current_lr() const {
  return lr_at_step(state_.opt_steps + 1, total_opt_steps_, tcfg_.lr_peak, tcfg_.warmup_frac);
}

LossBreakdown Trainer::train_step(const Batch& batch, const Manifest& m, CorpusCache& cache,
                                  bool flush) {
  const int B = int(batch.indices.size());
  SPD_DATA_CHECK(B > 0, "empty batch");
  std::vector<const Waveform*> waves(B);
  for (int s = 0; s < B; ++s) waves[s] = &cache.get(batch.indices[s]);

  std::vector<Parameters> ugrads(B);
  std::vector<double> lfs(B, 0.0), lus(B, 0.0);
  std::vector<char> fempty(B, 0), bad(B, 0);
  const uint64_t bidx = uint64_t(state_.batches_done);
  const int d = mcfg_.d_model;

#pragma omp parallel for schedule(dynamic, 1)
  for (int s = 0; s < B; ++s) {
    const Waveform& w = *waves[s];
    const long long nz = fe_out_len(w.n());
    if (nz < 1) {
      bad[s] = 1;
      continue;
    }
    Rng mask_rng(derive_seed(tcfg_.seed, "mask", bidx, uint64_t(s)));
    const MaskSpec mask = sample_mask(int(nz), tcfg_.mask_prob, tcfg_.mask_len, mask_rng);
    const uint64_t noise_seed = derive_seed(tcfg_.seed, "noise", bidx, uint64_t(s));

    StudentTrace tr;
    const StudentOutput out = student_forward(w, mask, state_.student, mcfg_, noise_seed, &tr);
    const Mat yt = encode_teacher(tr.z, state_.teacher, mcfg_, mcfg_.top_k);

    const FrameLoss fl = loss_frame(out.frames, yt, mask);
    Mat us_bar, yt_bar;
    utterance_pool(out, yt, tcfg_.utt_variant, us_bar, yt_bar);
    double lu = loss_utterance(us_bar, yt_bar);
    double lf = fl.value;
    if (tcfg_.loss_mode == "utt_only") lf = 0.0;
    if (tcfg_.loss_mode == "frm_only") lu = 0.0;
    lfs[s] = lf;
    lus[s] = lu;
    fempty[s] = fl.empty;
    if (!std::isfinite(lf) || !std::isfinite(lu)) {
      bad[s] = 2;
      continue;
    }

    const bool use_frm = tcfg_.loss_mode != "utt_only" && !fl.empty;
    const bool use_utt = tcfg_.loss_mode != "frm_only" && tcfg_.alpha != 0.0;
    Mat d_frames, d_utt;
    if (use_frm || (use_utt && tcfg_.utt_variant == "global"))
      d_frames.resize(out.frames.rows, d);
    if (use_utt && tcfg_.utt_variant != "global") d_utt.resize(out.utt.rows, d);

    if (use_frm) {
      const double c = 2.0 / (double(mask.m()) * d * B);
      for (int i : mask.indices)
        for (int j = 0; j < d; ++j) d_frames(i, j) += c * (out.frames(i, j) - yt(i, j));
    }
    if (use_utt) {
      const double c = tcfg_.alpha * 2.0 / (double(d) * B);
      if (tcfg_.utt_variant == "global") {
        const double cr = c / out.frames.rows;
        for (int i = 0; i < out.frames.rows; ++i)
          for (int j = 0; j < d; ++j) d_frames(i, j) += cr * (us_bar(0, j) - yt_bar(0, j));
      } else {
        const double cr = c / out.utt.rows;
        for (int i = 0; i < out.utt.rows; ++i)
          for (int j = 0; j < d; ++j) d_utt(i, j) += cr * (us_bar(0, j) - yt_bar(0, j));
      }
    }
    if (d_frames.rows > 0 || d_utt.rows > 0)
      student_backward(tr, state_.student, mcfg_, d_utt, d_frames, ugrads[s]);
  }

  for (int s = 0; s < B; ++s) {
    if (!bad[s]) continue;
    const std::string& id = m.utterances[batch.indices[s]].id;
    if (bad[s] == 1)
      throw DataError(util::str("utterance '", id, "' too short for the extractor"));
    throw NumericError(util::str("non-finite loss at utterance '", id, "'"));
  }

  for (int s = 0; s < B; ++s) accumulate(pending_grads_, ugrads[s]);
  ++accum_batches_;

  double lf_mean = 0.0, lu_mean = 0.0;
  bool all_empty = true;
  for (int s = 0; s < B; ++s) {
    lf_mean += lfs[s];
    lu_mean += lus[s];
    if (!fempty[s]) all_empty = false;
  }
  lf_mean /= B;
  lu_mean /= B;
  LossBreakdown lb = total_loss(lf_mean, lu_mean, tcfg_.alpha);
  lb.empty_mask = all_empty;

  ++state_.batches_done;
  if (accum_batches_ >= tcfg_.update_freq || flush) apply_update();
  return lb;
}

void Trainer::apply_update() {
  if (accum_batches_ == 0) return;
  if (accum_batches_ > 1) {
    const double inv = 1.0 / accum_batches_;
    for (auto& [name, g] : pending_grads_)
      for (size_t i = 0; i < g.size(); ++i) g.d[i] *= inv;
  }
  if (tcfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : pending_grads_)
      for (size_t i = 0; i < g.size(); ++i) sq += g.d[i] * g.d[i];
    const double norm = std::sqrt(sq);
    if (norm > tcfg_.clip_norm) {
      const double sc = tcfg_.clip_norm / norm;
      for (auto& [name, g] : pending_grads_)
        for (size_t i = 0; i < g.size(); ++i) g.d[i] *= sc;
    }
  }

  const double lr = current_lr();
  const double tau = current_tau();
  const long long t = state_.opt_steps + 1;
  const double bc1 = 1.0 - std::pow(tcfg_.beta1, double(t));
  const double bc2 = 1.0 - std::pow(tcfg_.beta2, double(t));

  static const Mat kEmpty;
  for (auto& [name, theta] : state_.student) {
    Mat& am = state_.adam_m.at(name);
    Mat& av = state_.adam_v.at(name);
    auto git = pending_grads_.find(name);
    const Mat& g = git == pending_grads_.end() ? kEmpty : git->second;
    for (size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.size() == theta.size() ? g.d[i] : 0.0;
      am.d[i] = tcfg_.beta1 * am.d[i] + (1.0 - tcfg_.beta1) * gi;
      av.d[i] = tcfg_.beta2 * av.d[i] + (1.0 - tcfg_.beta2) * gi * gi;
      const double mhat = am.d[i] / bc1;
      const double vhat = av.d[i] / bc2;
      theta.d[i] -= lr * (mhat / (std::sqrt(vhat) + tcfg_.adam_eps) +
                          tcfg_.weight_decay * theta.d[i]);
    }
  }
  pending_grads_.clear();
  accum_batches_ = 0;
  ema_update(state_.teacher, state_.student, tau);
  ++state_.opt_steps;
}

std::string pretrain(const Manifest& m, const Config& cfg0, const std::string& out_dir,
                     const std::string& resume_path) {
  namespace fs = std::filesystem;
  Config cfg = cfg0;
  TrainerState st;
  long long ckpt_total_steps = 0;
  const bool resume = !resume_path.empty();
  if (resume) st = load_checkpoint(resume_path, cfg, ckpt_total_steps);

  const TrainConfig tc = TrainConfig::from_config(cfg);
  std::vector<std::vector<Batch>> plan;
  long long total_batches = 0;
  for (int e = 0; e < tc.epochs; ++e) {
    plan.push_back(make_batches(m, tc.sample_budget, tc.seed, e));
    total_batches += (long long)(plan.back().size());
  }
  const long long total_opt_steps =
      tc.update_freq > 0 ? (total_batches + tc.update_freq - 1) / tc.update_freq : 0;
  if (resume)
    SPD_DATA_CHECK(ckpt_total_steps == total_opt_steps,
                   "checkpoint was trained with a different schedule (", ckpt_total_steps,
                   " vs ", total_opt_steps, " steps); manifest or config changed");

  Trainer trainer = resume ? Trainer(cfg, total_opt_steps, std::move(st))
                           : Trainer(cfg, total_opt_steps);
  const long long skip = trainer.state().batches_done;
  SPD_DATA_CHECK(skip <= total_batches, "checkpoint is ahead of this run's schedule");

  fs::create_directories(out_dir);
  const std::string log_path = (fs::path(out_dir) / "loss_log.tsv").string();
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  SPD_DATA_CHECK(log.good(), "cannot write loss log: ", log_path);
  if (!resume) log << "step\tl_frm\tl_utt\ttotal\ttau\tlr\n";

  CorpusCache cache(m);
  long long g = 0;
  for (int e = 0; e < tc.epochs; ++e) {
    for (const Batch& b : plan[e]) {
      if (g < skip) {
        ++g;
        continue;
      }
      const bool last = g == total_batches - 1;
      const double tau = trainer.current_tau();
      const double lr = trainer.current_lr();
      const LossBreakdown lb = trainer.train_step(b, m, cache, last);
      ++g;
      if (tc.log_every > 0 && (g % tc.log_every == 0 || last))
        log << g << '\t' << util::format_g17(lb.l_frm) << '\t' << util::format_g17(lb.l_utt)
            << '\t' << util::format_g17(lb.total) << '\t' << util::format_g17(tau) << '\t'
            << util::format_g17(lr) << '\n';
      if (tc.save_every > 0 && g % tc.save_every == 0 && trainer.at_update_boundary() && !last)
        save_checkpoint((fs::path(out_dir) / util::str("ckpt_", g, ".ckpt")).string(), cfg,
                        trainer.state(), total_opt_steps);
    }
  }
  log.flush();
  const std::string final_path = (fs::path(out_dir) / "checkpoint_final.ckpt").string();
  save_checkpoint(final_path, cfg, trainer.state(), total_opt_steps);
  return final_path;
}

}  // namespace spd
