// include/spd/config.hpp

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

#ifndef SPD_CONFIG_HPP_
#define SPD_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace spd {

// Flat key=value configuration with a fixed key registry. Unknown keys are
// rejected up front, both from files and from --set overrides. "desk" is
// sized to finish on a laptop CPU; "paper-base" keeps the published model
// sizes; "tiny" is small enough for finite-difference tests.
class Config {
 public:
  static Config preset(const std::string& name);  // desk | paper-base | tiny
  static const std::vector<std::string>& preset_names();

  // Applies "key=value" lines; '#' starts a comment. Unknown key or bad
  // syntax raises UsageError with the line number.
  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  void set_kv(const std::string& assignment);  // "key=value"

  bool has(const std::string& key) const;
  long long geti(const std::string& key) const;
  double getd(const std::string& key) const;
  bool getb(const std::string& key) const;  // true/false/1/0
  const std::string& gets(const std::string& key) const;

  // Sorted "key=value" lines; the run log echoes this and the run directory
  // name embeds its hash.
  std::string canonical_text() const;
  uint64_t hash() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace spd

#endif  // SPD_CONFIG_HPP_
