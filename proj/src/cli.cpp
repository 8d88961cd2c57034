// src/cli.cpp

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

#include "spd/cli.hpp"

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "spd/common.hpp"
#include "spd/corpus.hpp"
#include "spd/distill.hpp"
#include "spd/manifest.hpp"
#include "spd/model.hpp"
#include "spd/probe.hpp"
#include "spd/rng.hpp"

namespace spd {

namespace fs = std::filesystem;

Config build_config(const std::string& preset, const std::string& config_path,
                    const std::vector<std::string>& sets) {
  Config c = Config::preset(preset.empty() ? "desk" : preset);
  if (!config_path.empty()) c.load_file(config_path);
  for (const std::string& kv : sets) c.set_kv(kv);
  return c;
}

std::string make_run_dir(const std::string& base, const Config& cfg) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string hash = util::hex64(cfg.hash()).substr(0, 8);
  std::string dir = (fs::path(base) / util::str(stamp, "-", hash)).string();
  for (int i = 1; fs::exists(dir); ++i)
    dir = (fs::path(base) / util::str(stamp, "-", hash, "-", i)).string();
  fs::create_directories(dir);
  return dir;
}

namespace {

// One key=value per line: the command, its inputs, the seed fanout, and the
// complete effective config.
void write_run_log(const std::string& dir, const std::string& command, const Config& cfg,
                   const std::vector<std::pair<std::string, std::string>>& inputs) {
  const std::string path = (fs::path(dir) / "run.log").string();
  std::ofstream out(path, std::ios::trunc);
  SPD_DATA_CHECK(out.good(), "cannot write run log: ", path);
  out << "command=" << command << '\n';
  out << "config_hash=" << util::hex64(cfg.hash()) << '\n';
  for (const auto& [k, v] : inputs) out << "input." << k << '=' << v << '\n';
  const uint64_t master = uint64_t(cfg.geti("seed"));
  out << "seed.master=" << master << '\n';
  out << "seed.data=" << derive_seed(master, "data") << '\n';
  out << "seed.init=" << derive_seed(master, "init") << '\n';
  out << "seed.mask=" << derive_seed(master, "mask")
      << "  # root; per-utterance seeds also hash the batch and slot\n";
  out << "seed.noise=" << derive_seed(master, "noise")
      << "  # root; per-utterance seeds also hash the batch and slot\n";
  out << "seed.split=" << derive_seed(master, "split") << '\n';
  out << "seed.probe=" << derive_seed(master, "probe")
      << "  # root; head training also hashes the fold and epoch\n";
  std::istringstream cfg_lines(cfg.canonical_text());
  std::string line;
  while (std::getline(cfg_lines, line)) out << "config." << line << '\n';
  SPD_DATA_CHECK(out.good(), "failed while writing run log: ", path);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  SPD_DATA_CHECK(out.good(), "cannot write: ", path);
  out << content;
  SPD_DATA_CHECK(out.good(), "failed while writing: ", path);
}

SynthSpec synth_spec_from(const Config& cfg) {
  SynthSpec s;
  s.n_utts = int(cfg.geti("synth.n_utts"));
  s.n_classes = int(cfg.geti("synth.n_classes"));
  s.n_speakers = int(cfg.geti("synth.n_speakers"));
  s.n_sessions = int(cfg.geti("synth.n_sessions"));
  s.min_dur = cfg.getd("synth.min_dur");
  s.max_dur = cfg.getd("synth.max_dur");
  s.noise_std = cfg.getd("synth.noise_std");
  s.seed = derive_seed(uint64_t(cfg.geti("seed")), "data");
  return s;
}

int cmd_synth(const Config& cfg, const std::string& out_base) {
  const std::string dir = make_run_dir(out_base, cfg);
  write_run_log(dir, "synth", cfg, {});
  synthesize_corpus(synth_spec_from(cfg), dir);
  std::cout << "manifest=" << (fs::path(dir) / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_pretrain(Config cfg, const std::string& out_base, const std::string& manifest_path,
                 const std::string& resume) {
  const Manifest man = load_manifest(manifest_path);
  if (!resume.empty()) {
    long long total = 0;
    load_checkpoint(resume, cfg, total);  // the echoed config must be the effective one
  }
  const std::string dir = make_run_dir(out_base, cfg);
  write_run_log(dir, "pretrain", cfg,
                {{"manifest", manifest_path}, {"resume", resume.empty() ? "-" : resume}});
  const std::string ckpt = pretrain(man, cfg, dir, resume);
  std::cout << "checkpoint=" << ckpt << '\n';
  std::cout << "loss_log=" << (fs::path(dir) / "loss_log.tsv").string() << '\n';
  return 0;
}

int cmd_extract(const Config& cfg, const std::string& out_base, const std::string& ckpt_path,
                const std::string& manifest_path) {
  Config ckpt_cfg;
  long long total = 0;
  const TrainerState st = load_checkpoint(ckpt_path, ckpt_cfg, total);
  const ModelConfig mc = ModelConfig::from_config(ckpt_cfg);
  const Manifest man = load_manifest(manifest_path);
  CorpusCache cache(man);
  const std::string dir = make_run_dir(out_base, cfg);
  write_run_log(dir, "extract", cfg,
                {{"checkpoint", ckpt_path},
                 {"checkpoint_config_hash", util::hex64(ckpt_cfg.hash())},
                 {"manifest", manifest_path}});
  const FeatureDump f =
      extract_frozen_features(st.student, mc, man, cache, cfg.gets("probe.layer_agg"));
  const std::string feat_dir = (fs::path(dir) / "features").string();
  save_features(feat_dir, f);
  std::cout << "features=" << feat_dir << '\n';
  return 0;
}

int cmd_probe(const Config& cfg, const std::string& out_base, const std::string& features_dir,
              const std::string& manifest_path) {
  const Manifest man = load_manifest(manifest_path);
  const FeatureDump f = load_features(features_dir);
  const SplitPlan plan = make_split(man, cfg.gets("probe.split"), int(cfg.geti("probe.folds")),
                                    derive_seed(uint64_t(cfg.geti("seed")), "split"));
  const ProbeConfig pc = ProbeConfig::from_config(cfg);
  const std::string dir = make_run_dir(out_base, cfg);
  write_run_log(dir, "probe", cfg,
                {{"features", features_dir}, {"manifest", manifest_path}});
  const std::vector<MetricsReport> reports = train_probe(f, man, plan, pc);
  const std::string tsv_path = (fs::path(dir) / "report.tsv").string();
  write_text_file(tsv_path, render_report_tsv(reports));
  write_text_file((fs::path(dir) / "report.txt").string(), render_report_text(reports));
  std::cout << "report=" << tsv_path << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", mean_wa(reports));
  std::cout << "mean_wa=" << buf << '\n';
  return 0;
}

std::vector<MetricsReport> parse_report_tsv(const std::string& path) {
  std::ifstream in(path);
  SPD_DATA_CHECK(in.good(), "cannot open report: ", path);
  std::string line;
  SPD_DATA_CHECK(std::getline(in, line) && line.rfind("fold\t", 0) == 0,
                 "unrecognized report header in ", path);
  std::vector<MetricsReport> rs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) tab = line.size();
      f.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (f[0] == "mean" || f[0] == "std") continue;
    SPD_DATA_CHECK(f.size() == 5, "bad report row in ", path, ": ", line);
    MetricsReport r;
    try {
      r.wa = std::stod(f[1]);
      r.ua = std::stod(f[2]);
      r.wf1 = std::stod(f[3]);
      r.n_test = std::stoll(f[4]);
    } catch (const std::exception&) {
      throw DataError(util::str("bad report row in ", path, ": ", line));
    }
    rs.push_back(r);
  }
  SPD_DATA_CHECK(!rs.empty(), "report has no fold rows: ", path);
  return rs;
}

struct RunSummary {
  std::string name;
  double wa_mean, wa_std, ua_mean, wf1_mean;
  size_t folds;
};

RunSummary summarize(const std::string& name, const std::vector<MetricsReport>& rs) {
  RunSummary s{name, 0, 0, 0, 0, rs.size()};
  for (const MetricsReport& r : rs) {
    s.wa_mean += r.wa;
    s.ua_mean += r.ua;
    s.wf1_mean += r.wf1;
  }
  s.wa_mean /= double(rs.size());
  s.ua_mean /= double(rs.size());
  s.wf1_mean /= double(rs.size());
  for (const MetricsReport& r : rs) s.wa_std += (r.wa - s.wa_mean) * (r.wa - s.wa_mean);
  s.wa_std = std::sqrt(s.wa_std / double(rs.size()));
  return s;
}

std::string comparison_tsv(const std::vector<RunSummary>& rows) {
  std::string out = "run\tfolds\twa_mean\twa_std\tua_mean\twf1_mean\n";
  for (const RunSummary& s : rows)
    out += util::str(s.name, '\t', s.folds, '\t', util::format_g17(s.wa_mean), '\t',
                     util::format_g17(s.wa_std), '\t', util::format_g17(s.ua_mean), '\t',
                     util::format_g17(s.wf1_mean), '\n');
  return out;
}

std::string comparison_text(const std::vector<RunSummary>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %5s %8s %8s %8s %8s\n", "run", "folds", "WA", "WAstd",
                "UA", "WF1");
  out += line;
  for (const RunSummary& s : rows) {
    std::snprintf(line, sizeof line, "%-16s %5zu %8.2f %8.2f %8.2f %8.2f\n", s.name.c_str(),
                  s.folds, s.wa_mean, s.wa_std, s.ua_mean, s.wf1_mean);
    out += line;
  }
  return out;
}

int cmd_evaluate(const Config& cfg, const std::string& out_base,
                 const std::vector<std::string>& runs) {
  std::vector<RunSummary> rows;
  for (const std::string& spec : runs) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError(util::str("--run wants name=report.tsv, got '", spec, "'"));
    rows.push_back(summarize(spec.substr(0, eq), parse_report_tsv(spec.substr(eq + 1))));
  }
  const std::string dir = make_run_dir(out_base, cfg);
  std::vector<std::pair<std::string, std::string>> inputs;
  for (size_t i = 0; i < runs.size(); ++i) inputs.push_back({util::str("run", i), runs[i]});
  write_run_log(dir, "evaluate", cfg, inputs);
  const std::string tsv_path = (fs::path(dir) / "comparison.tsv").string();
  write_text_file(tsv_path, comparison_tsv(rows));
  write_text_file((fs::path(dir) / "comparison.txt").string(), comparison_text(rows));
  std::cout << "comparison=" << tsv_path << '\n';
  return 0;
}

// One pretrain -> extract -> probe pass; returns the fold reports.
std::vector<MetricsReport> run_arm(const Config& cfg, const Manifest& man,
                                   const std::string& arm_dir) {
  const std::string ckpt = pretrain(man, cfg, arm_dir);
  Config ckpt_cfg;
  long long total = 0;
  const TrainerState st = load_checkpoint(ckpt, ckpt_cfg, total);
  const ModelConfig mc = ModelConfig::from_config(ckpt_cfg);
  CorpusCache cache(man);
  const FeatureDump f =
      extract_frozen_features(st.student, mc, man, cache, cfg.gets("probe.layer_agg"));
  const SplitPlan plan = make_split(man, cfg.gets("probe.split"), int(cfg.geti("probe.folds")),
                                    derive_seed(uint64_t(cfg.geti("seed")), "split"));
  return train_probe(f, man, plan, ProbeConfig::from_config(cfg));
}

std::string sanitize(const std::string& s) {
  std::string r;
  for (char c : s)
    r += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return r;
}

int cmd_ablate(const Config& cfg, const std::string& out_base, const std::string& manifest_path,
               const std::string& axis) {
  std::vector<std::pair<std::string, std::vector<std::string>>> arms;
  if (axis == "loss_combination") {
    arms = {{"utt-only", {"train.loss_mode=utt_only"}},
            {"frm-only", {"train.loss_mode=frm_only"}},
            {"utt+frm", {"train.loss_mode=both"}}};
  } else if (axis == "utt_variant") {
    arms = {{"Token", {"train.utt_variant=token", "model.utt_tokens=1"}},
            {"Chunk", {"train.utt_variant=chunk", "model.utt_tokens=8"}},
            {"Global", {"train.utt_variant=global", "model.utt_tokens=0"}}};
  } else if (axis == "alpha") {
    arms = {{"0", {"train.alpha=0"}},
            {"0.1", {"train.alpha=0.1"}},
            {"1", {"train.alpha=1"}},
            {"10", {"train.alpha=10"}}};
  } else {
    throw UsageError(util::str("unknown ablation axis '", axis,
                               "' (want loss_combination, utt_variant, or alpha)"));
  }

  const Manifest man = load_manifest(manifest_path);
  const std::string dir = make_run_dir(out_base, cfg);
  write_run_log(dir, "ablate", cfg, {{"manifest", manifest_path}, {"axis", axis}});

  std::vector<RunSummary> rows;
  for (const auto& [label, sets] : arms) {
    Config acfg = cfg;
    for (const std::string& kv : sets) acfg.set_kv(kv);
    const std::string arm_dir = (fs::path(dir) / sanitize(label)).string();
    fs::create_directories(arm_dir);
    rows.push_back(summarize(label, run_arm(acfg, man, arm_dir)));
    std::cerr << "arm " << label << ": mean WA " << rows.back().wa_mean << '\n';
  }
  const std::string tsv_path = (fs::path(dir) / util::str("ablation_", axis, ".tsv")).string();
  write_text_file(tsv_path, comparison_tsv(rows));
  write_text_file((fs::path(dir) / util::str("ablation_", axis, ".txt")).string(),
                  comparison_text(rows));
  std::cout << "table=" << tsv_path << '\n';
  return 0;
}

std::string one_line(std::string msg) {
  for (char& c : msg)
    if (c == '\n' || c == '\r') c = ';';
  return msg;
}

}  // namespace

int run_cli(int argc, char** argv) {
  try {
    CLI::App app{"speechdistill: masked online distillation for speech, with frozen-feature "
                 "emotion probes"};
    app.require_subcommand(1);

    struct Common {
      std::string preset = "desk";
      std::string config_path;
      std::vector<std::string> sets;
      std::string out = "runs";
    };
    auto add_common = [](CLI::App* sub, Common& c) {
      sub->add_option("--preset", c.preset, "Config preset: desk, paper-base, tiny")
          ->capture_default_str();
      sub->add_option("--config", c.config_path, "Config file of key=value lines");
      sub->add_option("--set", c.sets, "Override one key=value (repeatable)");
      sub->add_option("--out", c.out, "Directory to create the run directory under")
          ->capture_default_str();
    };

    Common c_synth, c_pre, c_ext, c_probe, c_eval, c_abl;
    std::string manifest_path, resume, ckpt_path, features_dir, axis;
    std::vector<std::string> eval_runs;

    CLI::App* s_synth = app.add_subcommand("synth", "Generate the synthetic labeled corpus");
    add_common(s_synth, c_synth);

    CLI::App* s_pre = app.add_subcommand("pretrain", "Run masked distillation pre-training");
    add_common(s_pre, c_pre);
    s_pre->add_option("--manifest", manifest_path, "Corpus manifest TSV")->required();
    s_pre->add_option("--resume", resume, "Checkpoint to continue from");

    CLI::App* s_ext = app.add_subcommand("extract", "Dump frozen features for a manifest");
    add_common(s_ext, c_ext);
    s_ext->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
    s_ext->add_option("--manifest", manifest_path, "Corpus manifest TSV")->required();

    CLI::App* s_probe = app.add_subcommand("probe", "Train classifier heads on frozen features");
    add_common(s_probe, c_probe);
    s_probe->add_option("--features", features_dir, "Feature dump directory")->required();
    s_probe->add_option("--manifest", manifest_path, "Corpus manifest TSV")->required();

    CLI::App* s_eval = app.add_subcommand("evaluate", "Aggregate probe reports side by side");
    add_common(s_eval, c_eval);
    s_eval->add_option("--run", eval_runs, "name=report.tsv (repeatable)")->required();

    CLI::App* s_abl = app.add_subcommand("ablate", "Pretrain/probe each arm of one axis");
    add_common(s_abl, c_abl);
    s_abl->add_option("--manifest", manifest_path, "Corpus manifest TSV")->required();
    s_abl->add_option("--axis", axis, "loss_combination, utt_variant, or alpha")->required();

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);  // --help
      std::cerr << "spd: usage error: " << one_line(e.what()) << '\n';
      return 2;
    }

    if (app.got_subcommand(s_synth))
      return cmd_synth(build_config(c_synth.preset, c_synth.config_path, c_synth.sets),
                       c_synth.out);
    if (app.got_subcommand(s_pre))
      return cmd_pretrain(build_config(c_pre.preset, c_pre.config_path, c_pre.sets), c_pre.out,
                          manifest_path, resume);
    if (app.got_subcommand(s_ext))
      return cmd_extract(build_config(c_ext.preset, c_ext.config_path, c_ext.sets), c_ext.out,
                         ckpt_path, manifest_path);
    if (app.got_subcommand(s_probe))
      return cmd_probe(build_config(c_probe.preset, c_probe.config_path, c_probe.sets),
                       c_probe.out, features_dir, manifest_path);
    if (app.got_subcommand(s_eval))
      return cmd_evaluate(build_config(c_eval.preset, c_eval.config_path, c_eval.sets),
                          c_eval.out, eval_runs);
    if (app.got_subcommand(s_abl))
      return cmd_ablate(build_config(c_abl.preset, c_abl.config_path, c_abl.sets), c_abl.out,
                        manifest_path, axis);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "spd: usage error: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "spd: numeric error: " << one_line(e.what()) << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "spd: data error: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "spd: data error: " << one_line(e.what()) << '\n';
    return 3;
  }
}

int run_cli(std::vector<std::string> args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("spd");
  for (std::string& a : args) full.push_back(std::move(a));
  std::vector<char*> argv;
  argv.reserve(full.size());
  for (std::string& s : full) argv.push_back(s.data());
  return run_cli(int(argv.size()), argv.data());
}

}  // namespace spd
