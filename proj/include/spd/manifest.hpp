// include/spd/manifest.hpp

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

#ifndef SPD_MANIFEST_HPP_
#define SPD_MANIFEST_HPP_

#include <string>
#include <vector>

namespace spd {

// One corpus utterance. label == "-" means unlabeled.
struct UtteranceRecord {
  std::string id;
  std::string audio;  // path, relative paths resolve against the manifest dir
  long long n_samples = 0;
  std::string label;
  std::string speaker;
  std::string session;
  std::string lang;

  bool labeled() const { return label != "-"; }
};

struct Manifest {
  std::vector<UtteranceRecord> utterances;
  std::vector<std::string> label_set;  // sorted distinct labels, "-" excluded

  int size() const { return static_cast<int>(utterances.size()); }
};

// Tab-separated, one utterance per line:
//   id  audio  n_samples  label  speaker  session  lang
// Errors carry the line number; duplicate ids are rejected by name.
Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& m);

}  // namespace spd

#endif  // SPD_MANIFEST_HPP_
