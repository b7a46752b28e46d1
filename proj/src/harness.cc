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

#include "pcsr/harness.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "pcsr/error.h"
#include "pcsr/random.h"
#include "pcsr/tensor_io.h"

namespace pcsr {
namespace fs = std::filesystem;

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> SplitList(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) {
    part = Trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

std::string Canonical(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::string Fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string Precise(double v) {
  std::ostringstream ss;
  ss << std::setprecision(10) << v;
  return ss.str();
}

void EnsureDir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::string Join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::vector<KeySpec> PcsrKeys() {
  return {
      {"conditioning", "both", "both | class_only | domain_only | mean_token"},
      {"aggregation", "avg", "avg | max"},
      {"sharing", "shared", "shared | independent"},
      {"layer_sharing", "per_layer", "per_layer | across_layers"},
  };
}

std::vector<KeySpec> StreamKeys() {
  return {
      {"model", "", "source checkpoint (model.ckpt)"},
      {"data", "", "dataset directory from make-data"},
      {"stream", "", "explicit stream manifest; replaces data-driven domains"},
      {"out", "", "output directory"},
      {"method", "pcsr", "pcsr | tent_like | source"},
      {"corruption", "gaussian_noise", "corruption used when domains is empty"},
      {"severity", "5", "severity used when domains is empty (0-5)"},
      {"domains", "", "comma list of kind:severity, or clean"},
      {"samples", "0", "test images per domain, 0 for the whole split"},
      {"mixed", "false", "interleave domains batch by batch", true},
      {"reset", "per_domain", "per_domain | continual"},
      {"order", "adapt_then_predict", "adapt_then_predict | predict_then_adapt"},
      {"seed", "2022", "stream and initialization seed"},
      {"batch_size", "64", "batch size B"},
      {"lr_dsn", "0.2", "SGD rate of the domain separation networks"},
      {"lr_fgn", "0.0005", "SGD rate of the factor generator networks"},
      {"lr_norm", "0.001", "SGD rate of LayerNorm affine params (tent_like)"},
      {"e0_coeff", "0.4", "entropy threshold E0 = e0_coeff * ln C"},
      {"pcsr_init", "", "start from this recalibration checkpoint"},
  };
}

std::map<std::string, std::vector<KeySpec>> BuildKeyTables() {
  std::map<std::string, std::vector<KeySpec>> t;
  t["make-data"] = {
      {"out", "", "output directory"},
      {"classes", "8", "number of classes"},
      {"train", "8192", "training images"},
      {"test", "4096", "test images"},
      {"size", "32", "image side in pixels"},
      {"seed", "1", "dataset seed"},
      {"amplitude_min", "0.045", "grating amplitude lower bound"},
      {"amplitude_max", "0.09", "grating amplitude upper bound"},
      {"frequency_min", "0.1", "grating frequency lower bound (cycles/px)"},
      {"frequency_max", "0.16", "grating frequency upper bound (cycles/px)"},
      {"window_radius_min", "20", "window radius lower bound (px)"},
      {"window_radius_max", "24", "window radius upper bound (px)"},
  };
  t["train-source"] = {
      {"data", "", "dataset directory from make-data"},
      {"out", "", "output directory"},
      {"patch_size", "8", "patch side in pixels"},
      {"d_model", "64", "embedding width"},
      {"layers", "4", "transformer blocks"},
      {"heads", "4", "attention heads"},
      {"mlp_ratio", "4", "MLP hidden width / d_model"},
      {"epochs", "6", "training epochs"},
      {"batch_size", "64", "training batch size"},
      {"lr", "0.001", "AdamW peak learning rate"},
      {"weight_decay", "0.01", "AdamW decoupled weight decay"},
      {"label_smoothing", "0.1", "cross-entropy label smoothing"},
      {"seed", "0", "initialization and shuffling seed"},
      {"min_clean_acc", "0", "fail when held-out clean accuracy is lower"},
  };
  auto adapt = StreamKeys();
  for (auto& k : PcsrKeys()) adapt.push_back(k);
  t["adapt"] = adapt;
  auto dump = adapt;
  dump.push_back({"adapt", "true", "update parameters while streaming"});
  t["dump-domain-tokens"] = dump;
  t["report"] = {
      {"inputs", "", "comma list of run directories"},
      {"out", "", "output directory"},
  };
  auto grad = std::vector<KeySpec>{
      {"eps", "0.0001", "central-difference step"},
      {"threshold", "0.0001", "maximum accepted relative error"},
      {"e0_coeff", "0.9", "entropy threshold coefficient"},
      {"batch", "4", "images in the random batch"},
      {"coords", "0", "coordinates to probe, 0 for all"},
      {"seed", "0", "model, batch and sampling seed"},
      {"out", "", "optional output directory for config.echo"},
  };
  for (auto& k : PcsrKeys()) grad.push_back(k);
  t["gradcheck"] = grad;
  return t;
}

const std::map<std::string, std::vector<KeySpec>>& KeyTables() {
  static const auto tables = BuildKeyTables();
  return tables;
}

std::string Require(const RunConfig& config, const std::string& key) {
  const std::string v = config.Get(key);
  if (v.empty()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    throw ConfigError(config.command() + ": missing --" + flag);
  }
  return v;
}

void WriteEcho(const RunConfig& config, const std::string& out) {
  WriteTextFile(Join(out, kConfigEcho), config.Echo());
}

// Accepts the spellings used on the command line ("tent", "per-domain").
std::string EnumValue(std::string v) {
  std::replace(v.begin(), v.end(), '-', '_');
  if (v == "tent") v = "tent_like";
  return v;
}

PcsrConfig PcsrConfigFrom(const RunConfig& c) {
  PcsrConfig p;
  p.conditioning = ParseConditioning(EnumValue(c.Get("conditioning")));
  p.aggregation = ParseAggregation(EnumValue(c.Get("aggregation")));
  p.factor_sharing = ParseFactorSharing(EnumValue(c.Get("sharing")));
  p.layer_sharing = ParseLayerSharing(EnumValue(c.Get("layer_sharing")));
  return p;
}

struct PreparedStream {
  VitParams vit;
  StreamManifest manifest;
  ImageSet split;
};

PreparedStream PrepareStream(const RunConfig& c) {
  PreparedStream p;
  p.vit = LoadVitCheckpoint(Require(c, "model"));
  if (!c.Get("stream").empty()) {
    p.manifest = StreamManifest::ReadFile(c.Get("stream"));
  } else {
    const std::string data = Require(c, "data");
    const SyntheticSpec spec = ReadDatasetSpec(data);
    std::string domains = c.Get("domains");
    if (domains.empty()) domains = c.Get("corruption") + ":" + c.Get("severity");
    const auto requests = ParseDomainList(domains);
    p.manifest = MakeStreamManifest(
        fs::absolute(Join(data, "test")).lexically_normal().string(), spec.n_test, requests, c.GetInt("samples"),
        static_cast<int>(c.GetInt("batch_size")), c.GetBool("mixed"), c.GetUint("seed"));
  }
  p.split = LoadSplit(p.manifest.split_dir);
  const VitConfig& vc = p.vit.config;
  if (p.split.images.dim(2) != vc.image_size) {
    throw ConfigError("checkpoint expects " + std::to_string(vc.image_size) +
                      "px images but the stream has " +
                      std::to_string(p.split.images.dim(2)) + "px");
  }
  for (int label : p.split.labels) {
    if (label >= vc.n_classes) {
      throw ConfigError("stream label " + std::to_string(label) +
                        " exceeds the checkpoint's " + std::to_string(vc.n_classes) +
                        " classes");
    }
  }
  if (p.manifest.batch_size != c.GetInt("batch_size")) {
    throw ConfigError("stream manifest batch_size " +
                      std::to_string(p.manifest.batch_size) +
                      " differs from batch_size " + c.Get("batch_size"));
  }
  return p;
}

PcsrParams InitialPcsr(const RunConfig& c, const AdaptConfig& ac, const VitConfig& vc) {
  if (!c.Get("pcsr_init").empty()) {
    return LoadPcsrCheckpoint(c.Get("pcsr_init"), ac.pcsr, vc.d_model, vc.n_layers);
  }
  return InitPcsr<float>(ac.pcsr, vc.d_model, vc.n_layers, ac.seed);
}

std::map<std::string, std::string> ReadEcho(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream in(ReadTextFile(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[Trim(line.substr(0, eq))] = Trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace

// --- configuration -----------------------------------------------------------

const std::vector<KeySpec>& KeysFor(const std::string& command) {
  const auto it = KeyTables().find(command);
  if (it == KeyTables().end()) throw ConfigError("unknown command '" + command + "'");
  return it->second;
}

std::vector<std::string> Commands() {
  return {"make-data", "train-source", "adapt", "report", "dump-domain-tokens",
          "gradcheck"};
}

RunConfig::RunConfig(std::string command) : command_(std::move(command)) {
  for (const auto& k : KeysFor(command_)) values_[k.name] = k.default_value;
}

const KeySpec& RunConfig::Spec(const std::string& key) const {
  const std::string name = Canonical(key);
  for (const auto& k : KeysFor(command_)) {
    if (k.name == name) return k;
  }
  throw ConfigError(command_ + ": unknown key '" + key + "'");
}

void RunConfig::LoadFile(const std::string& path) {
  LoadText(ReadTextFile(path), path);
}

void RunConfig::LoadText(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    }
    try {
      Set(Trim(line.substr(0, eq)), Trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::Set(const std::string& key, const std::string& value) {
  values_[Spec(key).name] = value;
}

bool RunConfig::Has(const std::string& key) const {
  return !Get(key).empty();
}

std::string RunConfig::Get(const std::string& key) const {
  return values_.at(Spec(key).name);
}

std::int64_t RunConfig::GetInt(const std::string& key) const {
  const std::string v = Get(key);
  try {
    size_t used = 0;
    const long long r = std::stoll(v, &used);
    if (used == v.size()) return r;
  } catch (const std::exception&) {
  }
  throw ConfigError(command_ + ": " + key + " expects an integer, got '" + v + "'");
}

std::uint64_t RunConfig::GetUint(const std::string& key) const {
  const std::string v = Get(key);
  try {
    size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const unsigned long long r = std::stoull(v, &used);
      if (used == v.size()) return r;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(command_ + ": " + key + " expects a non-negative integer, got '" +
                    v + "'");
}

double RunConfig::GetDouble(const std::string& key) const {
  const std::string v = Get(key);
  try {
    size_t used = 0;
    const double r = std::stod(v, &used);
    if (used == v.size() && std::isfinite(r)) return r;
  } catch (const std::exception&) {
  }
  throw ConfigError(command_ + ": " + key + " expects a number, got '" + v + "'");
}

bool RunConfig::GetBool(const std::string& key) const {
  const std::string v = Get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(command_ + ": " + key + " expects true or false, got '" + v + "'");
}

std::string RunConfig::Echo() const {
  std::ostringstream ss;
  ss << "# pcsr " << command_ << '\n';
  for (const auto& k : KeysFor(command_)) ss << k.name << '=' << values_.at(k.name) << '\n';
  return ss.str();
}

// --- stream assembly ---------------------------------------------------------

std::string DomainRequest::Label() const {
  if (kind == CorruptionKind::kNone || severity == 0) return "clean";
  return ToString(kind) + ":" + std::to_string(severity);
}

std::vector<DomainRequest> ParseDomainList(const std::string& text) {
  std::vector<DomainRequest> out;
  for (const auto& item : SplitList(text)) {
    DomainRequest r;
    if (item == "clean") {
      out.push_back(r);
      continue;
    }
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("domain '" + item + "' must be kind:severity or clean");
    }
    r.kind = ParseCorruptionKind(Trim(item.substr(0, colon)));
    const std::string sev = Trim(item.substr(colon + 1));
    if (sev.size() != 1 || sev[0] < '0' || sev[0] > '5') {
      throw ConfigError("domain '" + item + "': severity must be 0-5");
    }
    r.severity = sev[0] - '0';
    out.push_back(r);
  }
  if (out.empty()) throw ConfigError("no domains requested");
  std::set<std::string> labels;
  for (const auto& r : out) {
    if (!labels.insert(r.Label()).second) {
      throw ConfigError("domain '" + r.Label() + "' requested twice");
    }
  }
  return out;
}

StreamManifest MakeStreamManifest(const std::string& split_dir,
                                  std::int64_t split_size,
                                  std::span<const DomainRequest> domains,
                                  std::int64_t samples_per_domain, int batch_size,
                                  bool mixed, std::uint64_t seed) {
  if (samples_per_domain < 0 || samples_per_domain > split_size) {
    throw ConfigError("samples must be in [0, " + std::to_string(split_size) + "]");
  }
  const std::int64_t n = samples_per_domain == 0 ? split_size : samples_per_domain;
  StreamManifest m;
  m.split_dir = split_dir;
  m.batch_size = batch_size;
  m.mixed = mixed;
  for (size_t d = 0; d < domains.size(); ++d) {
    DomainEntry e;
    e.label = domains[d].Label();
    e.corruption = {domains[d].kind, domains[d].severity, MixSeed(seed, 0xc0 + d)};
    std::vector<std::int64_t> order(static_cast<size_t>(split_size));
    for (std::int64_t i = 0; i < split_size; ++i) order[static_cast<size_t>(i)] = i;
    SplitMix64 rng(MixSeed(seed, 0x5e + d));
    Shuffle(order, rng);
    order.resize(static_cast<size_t>(n));
    e.indices = std::move(order);
    m.domains.push_back(std::move(e));
  }
  return m;
}

AdaptConfig AdaptConfigFrom(const RunConfig& c) {
  AdaptConfig a;
  a.method = ParseMethod(EnumValue(c.Get("method")));
  a.pcsr = PcsrConfigFrom(c);
  a.lr_dsn = c.GetDouble("lr_dsn");
  a.lr_fgn = c.GetDouble("lr_fgn");
  a.lr_norm = c.GetDouble("lr_norm");
  a.batch_size = static_cast<int>(c.GetInt("batch_size"));
  a.e0_coeff = c.GetDouble("e0_coeff");
  a.reset = ParseResetPolicy(EnumValue(c.Get("reset")));
  a.order = ParseStepOrder(EnumValue(c.Get("order")));
  a.seed = c.GetUint("seed");
  a.Validate();
  return a;
}

// --- reporting ---------------------------------------------------------------

MeanStd PopulationMeanStd(std::span<const double> values) {
  if (values.empty()) throw ContractError("mean/std of an empty set");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

RunSummary SummarizeMetrics(const std::string& metrics_csv) {
  std::istringstream in(metrics_csv);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics: empty file");
  const auto header = SplitList(line);
  auto column = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int c_domain = column("domain");
  const int c_acc = column("batch_accuracy");
  const int c_size = column("batch_size");
  if (c_domain < 0 || c_acc < 0) {
    throw FormatError("metrics: header lacks domain/batch_accuracy columns");
  }
  RunSummary s;
  std::map<std::string, std::pair<double, double>> sums;  // correct, total
  while (std::getline(in, line)) {
    if (Trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw FormatError("metrics: row has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(header.size()));
    }
    const std::string& domain = cells[static_cast<size_t>(c_domain)];
    const double acc = std::stod(cells[static_cast<size_t>(c_acc)]);
    const double size = c_size >= 0 ? std::stod(cells[static_cast<size_t>(c_size)]) : 1.0;
    if (!sums.count(domain)) s.domains.push_back(domain);
    sums[domain].first += acc * size;
    sums[domain].second += size;
  }
  for (const auto& [domain, cs] : sums) s.accuracy[domain] = cs.first / cs.second;
  return s;
}

RunSummary LoadRunSummary(const std::string& run_dir) {
  RunSummary s = SummarizeMetrics(ReadTextFile(Join(run_dir, kMetricsCsv)));
  const auto echo = ReadEcho(Join(run_dir, kConfigEcho));
  s.origin = run_dir;
  s.method = echo.count("method") ? EnumValue(echo.at("method")) : "unknown";
  s.seed = echo.count("seed") ? echo.at("seed") : "";
  return s;
}

ReportTable BuildReport(std::span<const RunSummary> runs) {
  if (runs.empty()) throw ConfigError("report: no runs given");
  ReportTable table;
  table.domains = runs[0].domains;
  const std::set<std::string> expected(table.domains.begin(), table.domains.end());
  for (const auto& r : runs) {
    const std::set<std::string> got(r.domains.begin(), r.domains.end());
    if (got == expected) continue;
    std::string missing, extra;
    for (const auto& d : expected) {
      if (!got.count(d)) missing += (missing.empty() ? "" : ", ") + d;
    }
    for (const auto& d : got) {
      if (!expected.count(d)) extra += (extra.empty() ? "" : ", ") + d;
    }
    throw FormatError("report: domain set of '" + r.origin + "' differs from '" +
                      runs[0].origin + "' (missing: " +
                      (missing.empty() ? "none" : missing) +
                      "; extra: " + (extra.empty() ? "none" : extra) + ")");
  }

  std::vector<std::string> methods;
  for (const char* m : {"source", "tent_like", "pcsr"}) {
    for (const auto& r : runs) {
      if (r.method == m) {
        methods.push_back(m);
        break;
      }
    }
  }
  for (const auto& r : runs) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
      methods.push_back(r.method);
    }
  }

  for (const auto& method : methods) {
    ReportRow row;
    row.method = method;
    std::vector<std::vector<double>> per_domain(table.domains.size());
    std::vector<double> averages;
    for (const auto& r : runs) {
      if (r.method != method) continue;
      ++row.runs;
      double avg = 0;
      for (size_t d = 0; d < table.domains.size(); ++d) {
        const double pct = 100.0 * r.accuracy.at(table.domains[d]);
        per_domain[d].push_back(pct);
        avg += pct;
      }
      averages.push_back(avg / static_cast<double>(table.domains.size()));
    }
    double avg_of_cells = 0;
    for (const auto& values : per_domain) {
      row.cells.push_back(PopulationMeanStd(values));
      avg_of_cells += row.cells.back().mean;
    }
    row.average.mean = avg_of_cells / static_cast<double>(row.cells.size());
    row.average.std = PopulationMeanStd(averages).std;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string ReportTable::Markdown() const {
  std::ostringstream ss;
  ss << "# Online accuracy (%)\n\n"
     << "Cells are mean ± std over runs; std is the population standard "
        "deviation (divide by n). Avg. is the mean of the domain cells.\n\n";
  ss << "| method | runs |";
  for (const auto& d : domains) ss << ' ' << d << " |";
  ss << " Avg. |\n|---|---|";
  for (size_t i = 0; i <= domains.size(); ++i) ss << "---|";
  ss << '\n';
  for (const auto& r : rows) {
    ss << "| " << r.method << " | " << r.runs << " |";
    for (const auto& c : r.cells) ss << ' ' << Fixed(c.mean, 1) << " ± " << Fixed(c.std, 1) << " |";
    ss << ' ' << Fixed(r.average.mean, 1) << " ± " << Fixed(r.average.std, 1) << " |\n";
  }
  return ss.str();
}

std::string ReportTable::Csv() const {
  std::ostringstream ss;
  ss << "method,runs";
  for (const auto& d : domains) ss << ',' << d << "_mean," << d << "_std";
  ss << ",avg_mean,avg_std\n";
  for (const auto& r : rows) {
    ss << r.method << ',' << r.runs;
    for (const auto& c : r.cells) ss << ',' << Fixed(c.mean, 6) << ',' << Fixed(c.std, 6);
    ss << ',' << Fixed(r.average.mean, 6) << ',' << Fixed(r.average.std, 6) << '\n';
  }
  return ss.str();
}

// --- gradient check ------------------------------------------------------------

GradCheckResult RunPcsrGradCheck(const GradCheckSetup& setup) {
  VitConfig vc;
  vc.image_size = 16;
  vc.patch_size = 8;
  vc.d_model = 8;
  vc.n_layers = 2;
  vc.n_heads = 2;
  vc.mlp_ratio = 2;
  vc.n_classes = 3;
  vc.Validate();

  // Randomize well away from identity so every path carries gradient.
  SplitMix64 rng(MixSeed(setup.seed, 0x9c));
  auto vit = InitVit<double>(vc, setup.seed);
  for (auto& [name, p] : vit.Named()) {
    for (double& v : p->value.data()) v += 0.5 * rng.Normal();
  }
  vit.SetTrainable(false);
  auto pcsr = InitPcsr<double>(setup.pcsr, vc.d_model, vc.n_layers, setup.seed);
  for (auto& [name, p] : pcsr.Named()) {
    for (double& v : p->value.data()) v += 0.3 * rng.Normal();
  }
  pcsr.SetTrainable(true);

  BasicTensor<double> images({setup.batch, 3, vc.image_size, vc.image_size});
  for (double& v : images.data()) v = rng.Normal();

  const double e0 = setup.e0_coeff * std::log(static_cast<double>(vc.n_classes));
  std::vector<std::uint8_t> mask;
  double lambda = 0;
  {
    Tape<double> tape(GradMode::kDisabled);
    const auto out = Forward(tape, images, vit, &pcsr);
    const auto loss = BuildAdaptLoss(out, e0, true);
    mask = loss.breakdown.mask;
    lambda = loss.breakdown.lambda;
  }

  const std::function<Var<double>(Tape<double>&)> loss_fn = [&](Tape<double>& tape) {
    const auto out = Forward(tape, images, vit, &pcsr);
    Var<double> le = ad::MaskedMean(ad::EntropyFromLogits(out.logits),
                                    std::span<const std::uint8_t>(mask));
    Var<double> ls = SimilarityLoss<double>(out.similarity);
    return ad::Add(le, ad::MulScalar(ls, lambda));
  };
  GradCheckOptions opts;
  opts.eps = setup.eps;
  opts.max_coords = setup.max_coords;
  opts.seed = setup.seed;
  return GradCheck<double>(loss_fn, pcsr.Named(), opts);
}

// --- commands ------------------------------------------------------------------

int CmdMakeData(const RunConfig& c, std::ostream& log) {
  const std::string out = Require(c, "out");
  SyntheticSpec spec;
  spec.n_classes = static_cast<int>(c.GetInt("classes"));
  spec.n_train = static_cast<int>(c.GetInt("train"));
  spec.n_test = static_cast<int>(c.GetInt("test"));
  spec.image_size = static_cast<int>(c.GetInt("size"));
  spec.seed = c.GetUint("seed");
  spec.amplitude_min = c.GetDouble("amplitude_min");
  spec.amplitude_max = c.GetDouble("amplitude_max");
  spec.frequency_min = c.GetDouble("frequency_min");
  spec.frequency_max = c.GetDouble("frequency_max");
  spec.window_radius_min = c.GetDouble("window_radius_min");
  spec.window_radius_max = c.GetDouble("window_radius_max");
  spec.Validate();
  EnsureDir(out);
  MakeDataset(spec, out);
  WriteEcho(c, out);
  log << "wrote " << spec.n_train << " train and " << spec.n_test
      << " test images to " << out << '\n';
  return 0;
}

int CmdTrainSource(const RunConfig& c, std::ostream& log) {
  const std::string data = Require(c, "data");
  const std::string out = Require(c, "out");
  const SyntheticSpec spec = ReadDatasetSpec(data);
  const ImageSet train = LoadSplit(Join(data, "train"));
  const ImageSet test = LoadSplit(Join(data, "test"));

  VitConfig vc;
  vc.image_size = static_cast<int>(train.images.dim(2));
  vc.patch_size = static_cast<int>(c.GetInt("patch_size"));
  vc.d_model = static_cast<int>(c.GetInt("d_model"));
  vc.n_layers = static_cast<int>(c.GetInt("layers"));
  vc.n_heads = static_cast<int>(c.GetInt("heads"));
  vc.mlp_ratio = c.GetDouble("mlp_ratio");
  vc.n_classes = spec.n_classes;
  vc.Validate();

  TrainOptions opt;
  opt.epochs = static_cast<int>(c.GetInt("epochs"));
  opt.batch_size = static_cast<int>(c.GetInt("batch_size"));
  opt.lr = c.GetDouble("lr");
  opt.weight_decay = c.GetDouble("weight_decay");
  opt.label_smoothing = c.GetDouble("label_smoothing");
  opt.seed = c.GetUint("seed");
  opt.min_clean_accuracy = c.GetDouble("min_clean_acc");

  TrainResult r = TrainSource(vc, Normalize(train.images), train.labels,
                                    Normalize(test.images), test.labels, opt);
  EnsureDir(out);
  SaveVitCheckpoint(r.params, Join(out, kModelCkpt));
  std::ostringstream losses;
  losses << "epoch,train_loss\n";
  for (size_t e = 0; e < r.epoch_loss.size(); ++e) {
    losses << e + 1 << ',' << Precise(r.epoch_loss[e]) << '\n';
  }
  WriteTextFile(Join(out, kLossesCsv), losses.str());
  std::ostringstream metrics;
  metrics << "metric,value\n"
          << "clean_accuracy," << Precise(r.clean_accuracy) << '\n'
          << "eval_samples," << test.size() << '\n'
          << "train_samples," << train.size() << '\n'
          << "epochs," << opt.epochs << '\n'
          << "parameters," << r.params.NumParameters() << '\n';
  WriteTextFile(Join(out, kMetricsCsv), metrics.str());
  WriteEcho(c, out);
  log << "clean accuracy " << Fixed(100.0 * r.clean_accuracy, 2) << "% on "
      << test.size() << " held-out images\n";
  if (!r.reached_target) {
    log << "error: clean accuracy " << Fixed(r.clean_accuracy, 4)
        << " is below min_clean_acc " << c.Get("min_clean_acc") << '\n';
    return 3;
  }
  return 0;
}

int CmdAdapt(const RunConfig& c, std::ostream& log) {
  const std::string out = Require(c, "out");
  const AdaptConfig ac = AdaptConfigFrom(c);
  PreparedStream ps = PrepareStream(c);
  const PcsrParams init = InitialPcsr(c, ac, ps.vit.config);

  EnsureDir(out);
  WriteEcho(c, out);
  ps.manifest.WriteFile(Join(out, kStreamManifest));

  Stream stream(ps.manifest, std::move(ps.split));
  Adapter adapter(ps.vit, ac, init);
  const StreamMetrics m = RunStream(stream, adapter);

  WriteTextFile(Join(out, kMetricsCsv), MetricsCsv(m));
  WriteTextFile(Join(out, kLossesCsv), LossesCsv(m));
  if (ac.method == Method::kPcsr) {
    SavePcsrCheckpoint(adapter.pcsr(), Join(out, kPcsrCkpt));
  } else if (ac.method == Method::kTentLike) {
    SaveVitCheckpoint(adapter.vit(), Join(out, kModelCkpt));
  }
  for (const auto& d : m.diagnostics) log << "warning: " << d << '\n';
  log << ToString(ac.method) << ": " << m.total << " samples in " << m.steps.size()
      << " batches, cumulative accuracy " << Fixed(100.0 * m.cumulative_accuracy(), 2)
      << "%\n";
  for (const auto& d : m.domain_order) {
    log << "  " << d << ": " << Fixed(100.0 * m.per_domain.at(d).accuracy(), 2) << "%\n";
  }
  return 0;
}

int CmdReport(const RunConfig& c, std::ostream& log) {
  const std::string out = Require(c, "out");
  const auto inputs = SplitList(c.Get("inputs"));
  if (inputs.empty()) throw ConfigError("report: no input run directories");
  std::vector<RunSummary> runs;
  for (const auto& dir : inputs) runs.push_back(LoadRunSummary(dir));
  const ReportTable table = BuildReport(runs);
  EnsureDir(out);
  WriteTextFile(Join(out, kReportMd), table.Markdown());
  WriteTextFile(Join(out, kReportCsv), table.Csv());
  WriteEcho(c, out);
  log << table.Markdown();
  return 0;
}

int CmdDumpDomainTokens(const RunConfig& c, std::ostream& log) {
  const std::string out = Require(c, "out");
  AdaptConfig ac = AdaptConfigFrom(c);
  if (ac.method != Method::kPcsr) {
    throw ConfigError("dump-domain-tokens: method must be pcsr, got " +
                      ToString(ac.method));
  }
  if (!c.GetBool("adapt")) {
    ac.lr_dsn = 0;
    ac.lr_fgn = 0;
  }
  PreparedStream ps = PrepareStream(c);
  const PcsrParams init = InitialPcsr(c, ac, ps.vit.config);
  EnsureDir(out);
  WriteEcho(c, out);
  ps.manifest.WriteFile(Join(out, kStreamManifest));

  const int d = ps.vit.config.d_model;
  std::ostringstream csv;
  csv << "step,sample_id,domain";
  for (int j = 0; j < d; ++j) csv << ",d" << j;
  csv << '\n';
  std::int64_t rows = 0;
  Stream stream(ps.manifest, std::move(ps.split));
  Adapter adapter(ps.vit, ac, init);
  const StreamMetrics m =
      RunStream(stream, adapter, [&](const StepRecord& rec, const StepResult& r) {
        for (size_t i = 0; i < rec.sample_ids.size(); ++i) {
          csv << rec.step << ',' << rec.sample_ids[i] << ',' << rec.domain;
          for (int j = 0; j < d; ++j) {
            csv << ',' << Precise(r.domain_tokens.data()[i * static_cast<size_t>(d) + static_cast<size_t>(j)]);
          }
          csv << '\n';
          ++rows;
        }
      });
  WriteTextFile(Join(out, kTokensCsv), csv.str());
  WriteTextFile(Join(out, kMetricsCsv), MetricsCsv(m));
  log << "wrote " << rows << " domain tokens of width " << d << " to "
      << Join(out, kTokensCsv) << '\n';
  return 0;
}

int CmdGradcheck(const RunConfig& c, std::ostream& log) {
  GradCheckSetup s;
  s.pcsr = PcsrConfigFrom(c);
  s.eps = c.GetDouble("eps");
  s.e0_coeff = c.GetDouble("e0_coeff");
  s.batch = static_cast<int>(c.GetInt("batch"));
  s.seed = c.GetUint("seed");
  s.max_coords = c.GetInt("coords");
  const double threshold = c.GetDouble("threshold");
  if (!c.Get("out").empty()) {
    EnsureDir(c.Get("out"));
    WriteEcho(c, c.Get("out"));
  }
  const GradCheckResult r = RunPcsrGradCheck(s);
  std::ostringstream ss;
  ss << std::setprecision(6);
  ss << "coordinates checked: " << r.coords_checked << '\n'
     << "max relative error: " << r.max_rel_error << '\n'
     << "worst coordinate: " << r.worst_param << '[' << r.worst_index
     << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric << '\n';
  const bool pass = r.max_rel_error < threshold;
  ss << (pass ? "PASS" : "FAIL") << ": max relative error "
     << (pass ? "< " : ">= ") << threshold << " (eps " << s.eps << ")\n";
  log << ss.str();
  return pass ? 0 : 1;
}

int RunCommand(const RunConfig& config, std::ostream& log) {
  const std::string& cmd = config.command();
  if (cmd == "make-data") return CmdMakeData(config, log);
  if (cmd == "train-source") return CmdTrainSource(config, log);
  if (cmd == "adapt") return CmdAdapt(config, log);
  if (cmd == "report") return CmdReport(config, log);
  if (cmd == "dump-domain-tokens") return CmdDumpDomainTokens(config, log);
  if (cmd == "gradcheck") return CmdGradcheck(config, log);
  throw ConfigError("unknown command '" + cmd + "'");
}

}  // namespace pcsr
