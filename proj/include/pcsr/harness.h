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

// Command implementations behind the `pcsr` tool. Each command reads a
// RunConfig (config file merged with flags, flags win), writes fixed file
// names under `out`, and echoes its effective configuration to config.echo.

#ifndef PCSR_HARNESS_H_
#define PCSR_HARNESS_H_

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcsr/adaptation.h"
#include "pcsr/data.h"
#include "pcsr/optim.h"
#include "pcsr/vit.h"

namespace pcsr {

inline constexpr const char* kConfigEcho = "config.echo";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kLossesCsv = "losses.csv";
inline constexpr const char* kModelCkpt = "model.ckpt";
inline constexpr const char* kPcsrCkpt = "pcsr.ckpt";
inline constexpr const char* kTokensCsv = "tokens.csv";
inline constexpr const char* kReportMd = "report.md";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kStreamManifest = "stream.manifest";

inline constexpr std::uint64_t kDefaultSeeds[] = {2022, 2023, 2024};

struct KeySpec {
  std::string name;           // config key; the flag is --name with '-' for '_'
  std::string default_value;  // empty means "unset"
  std::string help;
  bool is_flag = false;       // boolean switch on the command line
};

// Keys accepted by a command, in echo order. Throws ConfigError for an
// unknown command.
const std::vector<KeySpec>& KeysFor(const std::string& command);
std::vector<std::string> Commands();

class RunConfig {
 public:
  explicit RunConfig(std::string command);

  // Flat `key=value` lines, `#` comments. Unknown keys are rejected.
  void LoadFile(const std::string& path);
  void LoadText(const std::string& text, const std::string& origin);
  // Accepts `key` or the flag spelling `key-with-dashes`.
  void Set(const std::string& key, const std::string& value);

  const std::string& command() const { return command_; }
  bool Has(const std::string& key) const;
  std::string Get(const std::string& key) const;
  std::int64_t GetInt(const std::string& key) const;
  std::uint64_t GetUint(const std::string& key) const;
  double GetDouble(const std::string& key) const;
  bool GetBool(const std::string& key) const;

  // Effective configuration: a comment naming the command, then every key
  // in declaration order. Replaying it through LoadText reproduces the run.
  std::string Echo() const;

 private:
  const KeySpec& Spec(const std::string& key) const;

  std::string command_;
  std::map<std::string, std::string> values_;
};

// --- stream assembly ---------------------------------------------------------

struct DomainRequest {
  CorruptionKind kind = CorruptionKind::kNone;
  int severity = 0;

  std::string Label() const;
};

// "clean", "gaussian_noise:5" or a comma-separated list of those.
std::vector<DomainRequest> ParseDomainList(const std::string& text);

// Each domain draws `samples_per_domain` distinct test indices (all of them
// when 0) in a seeded order; corruption noise is seeded per domain.
StreamManifest MakeStreamManifest(const std::string& split_dir,
                                  std::int64_t split_size,
                                  std::span<const DomainRequest> domains,
                                  std::int64_t samples_per_domain,
                                  int batch_size, bool mixed,
                                  std::uint64_t seed);

AdaptConfig AdaptConfigFrom(const RunConfig& config);

// --- reporting ---------------------------------------------------------------

struct MeanStd {
  double mean = 0;
  double std = 0;  // population
};
MeanStd PopulationMeanStd(std::span<const double> values);

struct RunSummary {
  std::string origin;
  std::string method;
  std::string seed;
  std::vector<std::string> domains;  // stream order
  std::map<std::string, double> accuracy;
};

// Per-domain accuracy, sample-weighted, from metrics.csv text.
RunSummary SummarizeMetrics(const std::string& metrics_csv);
// Reads <dir>/metrics.csv and the method/seed from <dir>/config.echo.
RunSummary LoadRunSummary(const std::string& run_dir);

struct ReportRow {
  std::string method;
  int runs = 0;
  std::vector<MeanStd> cells;  // percent, one per domain
  MeanStd average;             // mean of cells; std over per-run averages
};

struct ReportTable {
  std::vector<std::string> domains;
  std::vector<ReportRow> rows;

  std::string Markdown() const;
  std::string Csv() const;
};

// Errors when runs disagree on their domain sets.
ReportTable BuildReport(std::span<const RunSummary> runs);

// --- gradient check ------------------------------------------------------------

struct GradCheckSetup {
  PcsrConfig pcsr;
  double eps = 1e-4;
  double e0_coeff = 0.9;
  int batch = 4;
  std::uint64_t seed = 0;
  std::int64_t max_coords = 0;  // 0 checks every coordinate
};

// Combined loss gradients of a d=8, N=4, L=2, H=2, C=3 model with respect
// to every recalibration parameter, in double precision. The entropy mask
// is fixed at the unperturbed point.
GradCheckResult RunPcsrGradCheck(const GradCheckSetup& setup);

// --- commands ------------------------------------------------------------------

// Each returns the process exit code; errors propagate as pcsr::Error.
int CmdMakeData(const RunConfig& config, std::ostream& log);
int CmdTrainSource(const RunConfig& config, std::ostream& log);
int CmdAdapt(const RunConfig& config, std::ostream& log);
int CmdReport(const RunConfig& config, std::ostream& log);
int CmdDumpDomainTokens(const RunConfig& config, std::ostream& log);
int CmdGradcheck(const RunConfig& config, std::ostream& log);

int RunCommand(const RunConfig& config, std::ostream& log);

}  // namespace pcsr

#endif  // PCSR_HARNESS_H_
