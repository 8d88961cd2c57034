// include/spd/cli.hpp

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

#ifndef SPD_CLI_HPP_
#define SPD_CLI_HPP_

#include <string>
#include <vector>

#include "spd/config.hpp"

namespace spd {

// Preset, then optional config file, then --set overrides, in that order.
Config build_config(const std::string& preset, const std::string& config_path,
                    const std::vector<std::string>& sets);

// <base>/<UTC timestamp>-<config hash prefix>, suffixed if already taken.
std::string make_run_dir(const std::string& base, const Config& cfg);

// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
int run_cli(int argc, char** argv);
int run_cli(std::vector<std::string> args);  // args without the program name

}  // namespace spd

#endif  // SPD_CLI_HPP_
