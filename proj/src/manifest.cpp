// src/manifest.cpp

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

#include "spd/manifest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "spd/common.hpp"

namespace spd {

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  SPD_DATA_CHECK(in.good(), "cannot open manifest: ", path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();

  Manifest m;
  std::set<std::string> seen_ids;
  std::set<std::string> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    SPD_DATA_CHECK(f.size() == 7, path, ":", lineno, ": expected 7 tab-separated fields, got ",
                   f.size());
    UtteranceRecord r;
    r.id = f[0];
    r.audio = f[1];
    try {
      size_t pos = 0;
      r.n_samples = std::stoll(f[2], &pos);
      SPD_DATA_CHECK(pos == f[2].size(), "");
    } catch (const std::exception&) {
      throw DataError(util::str(path, ":", lineno, ": bad n_samples '", f[2], "'"));
    }
    SPD_DATA_CHECK(r.n_samples > 0, path, ":", lineno, ": n_samples must be positive, got ",
                   r.n_samples);
    r.label = f[3];
    r.speaker = f[4];
    r.session = f[5];
    r.lang = f[6];
    SPD_DATA_CHECK(!r.id.empty(), path, ":", lineno, ": empty utterance id");
    SPD_DATA_CHECK(seen_ids.insert(r.id).second, path, ":", lineno, ": duplicate utterance id '",
                   r.id, "'");
    if (!r.audio.empty() && r.audio[0] != '/' && !dir.empty())
      r.audio = (dir / r.audio).string();
    if (r.labeled()) labels.insert(r.label);
    m.utterances.push_back(std::move(r));
  }
  SPD_DATA_CHECK(!m.utterances.empty(), "manifest has no utterances: ", path);
  m.label_set.assign(labels.begin(), labels.end());
  return m;
}

void save_manifest(const std::string& path, const Manifest& m) {
  std::ofstream out(path);
  SPD_DATA_CHECK(out.good(), "cannot write manifest: ", path);
  for (const auto& r : m.utterances)
    out << r.id << '\t' << r.audio << '\t' << r.n_samples << '\t' << r.label << '\t' << r.speaker
        << '\t' << r.session << '\t' << r.lang << '\n';
  SPD_DATA_CHECK(out.good(), "failed while writing manifest: ", path);
}

}  // namespace spd
