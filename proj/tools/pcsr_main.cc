// Copyright 2026 The PCSR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// pcsr <command> [--config FILE] [--key value ...]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
// error, 3 train-source missed --min-clean-acc.

#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcsr/error.h"
#include "pcsr/harness.h"

namespace {

std::string FlagName(std::string key) {
  for (char& ch : key) {
    if (ch == '_') ch = '-';
  }
  return "--" + key;
}

struct Bound {
  CLI::App* app = nullptr;
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
  std::vector<std::string> positional;  // report run directories
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online test-time adaptation of a small ViT by attention recalibration"};
  app.require_subcommand(1);

  std::map<std::string, std::unique_ptr<Bound>> bound;
  for (const auto& command : pcsr::Commands()) {
    auto b = std::make_unique<Bound>();
    b->app = app.add_subcommand(command);
    b->app->add_option("--config", b->config_path, "key=value file; flags override it");
    for (const auto& key : pcsr::KeysFor(command)) {
      std::string help = key.help;
      if (!key.default_value.empty()) help += " [" + key.default_value + "]";
      if (key.is_flag) {
        b->options[key.name] = b->app->add_flag(FlagName(key.name), b->flags[key.name], help);
      } else {
        b->options[key.name] =
            b->app->add_option(FlagName(key.name), b->values[key.name], help);
      }
    }
    if (command == "report") {
      b->app->add_option("runs", b->positional, "run directories");
    }
    bound[command] = std::move(b);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  for (auto& [command, b] : bound) {
    if (!b->app->parsed()) continue;
    try {
      pcsr::RunConfig config(command);
      if (!b->config_path.empty()) config.LoadFile(b->config_path);
      for (const auto& [name, opt] : b->options) {
        if (opt->count() == 0) continue;
        if (b->flags.count(name)) {
          config.Set(name, b->flags[name] ? "true" : "false");
        } else {
          config.Set(name, b->values[name]);
        }
      }
      if (!b->positional.empty()) {
        std::string joined = config.Get("inputs");
        for (const auto& p : b->positional) joined += (joined.empty() ? "" : ",") + p;
        config.Set("inputs", joined);
      }
      return pcsr::RunCommand(config, std::cout);
    } catch (const pcsr::ConfigError& e) {
      std::cerr << "pcsr " << command << ": " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "pcsr " << command << ": error: " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}
