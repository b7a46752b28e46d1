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

#include "pcsr/data.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "pcsr/error.h"
#include "pcsr/random.h"
#include "pcsr/tensor_io.h"

namespace pcsr {
namespace fs = std::filesystem;

namespace {

constexpr const char* kImagesFile = "images.pcsr-tensor";
constexpr const char* kLabelsFile = "labels.csv";
constexpr const char* kManifestFile = "manifest.txt";
constexpr const char* kManifestFormat = "pcsr-stream-1";

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::int64_t ParseInt(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + value +
                      "'");
  }
}

std::uint64_t ParseUint(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" +
                      value + "'");
  }
}

double ParseDouble(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
  }
}

std::string FormatDouble(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// Key/value pairs in file order, comments and blank lines removed.
std::vector<std::pair<std::string, std::string>> ParseKeyValues(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
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
      throw FormatError("line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(Trim(line.substr(0, eq)), Trim(line.substr(eq + 1)));
  }
  return out;
}

void Clamp01(float& v) { v = std::clamp(v, 0.0f, 1.0f); }

std::uint64_t SplitTag(Split split) { return split == Split::kTrain ? 0x7a1 : 0x7e5; }

// Disk kernel weights for radius r: each tap is the fraction of its pixel
// cell covered by the disk, estimated on an 8x8 sub-grid.
std::vector<double> DiskKernel(double radius, int* half) {
  const int h = static_cast<int>(std::ceil(radius));
  *half = h;
  const int w = 2 * h + 1;
  constexpr int kSub = 8;
  std::vector<double> k(static_cast<size_t>(w * w), 0.0);
  double total = 0;
  for (int dy = -h; dy <= h; ++dy) {
    for (int dx = -h; dx <= h; ++dx) {
      int inside = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double y = dy - 0.5 + (sy + 0.5) / kSub;
          const double x = dx - 0.5 + (sx + 0.5) / kSub;
          if (x * x + y * y <= radius * radius) ++inside;
        }
      }
      const double v = static_cast<double>(inside) / (kSub * kSub);
      k[static_cast<size_t>((dy + h) * w + (dx + h))] = v;
      total += v;
    }
  }
  for (double& v : k) v /= total;
  return k;
}

int Reflect(int i, int n) {
  // Mirror without repeating the edge pixel: -1 -> 1, n -> n - 2.
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

// --- synthetic data --------------------------------------------------------

void SyntheticSpec::Validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (n_train < 0 || n_test < 0) throw ConfigError("split sizes must be >= 0");
  if (image_size < 4) throw ConfigError("image_size must be >= 4");
  if (!(amplitude_min > 0 && amplitude_max >= amplitude_min)) {
    throw ConfigError("amplitude range must satisfy 0 < min <= max");
  }
  if (!(frequency_min > 0 && frequency_max >= frequency_min)) {
    throw ConfigError("frequency range must satisfy 0 < min <= max");
  }
  if (!(window_radius_min > 0 && window_radius_max >= window_radius_min)) {
    throw ConfigError("window radius range must satisfy 0 < min <= max");
  }
}

ImageSet GenerateSplit(const SyntheticSpec& spec, Split split) {
  spec.Validate();
  const std::uint64_t split_seed = MixSeed(spec.seed, SplitTag(split));
  const int n = split == Split::kTrain ? spec.n_train : spec.n_test;
  const int s = spec.image_size;

  ImageSet set;
  set.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) set.labels[static_cast<size_t>(i)] = i % spec.n_classes;
  SplitMix64 order_rng(MixSeed(split_seed, 0));
  Shuffle(set.labels, order_rng);

  set.images = Tensor({n, 3, s, s});
  float* out = set.images.raw();
  const double pi = std::numbers::pi;
  const double jitter = 0.2 * pi / spec.n_classes;
  for (int i = 0; i < n; ++i) {
    SplitMix64 rng(MixSeed(split_seed, static_cast<std::uint64_t>(i) + 1));
    const int label = set.labels[static_cast<size_t>(i)];
    std::array<double, 3> base{}, tint{};
    for (auto& b : base) b = rng.Uniform(0.3, 0.7);
    for (auto& t : tint) t = rng.Uniform(0.6, 1.0);
    const double gx = rng.Uniform(-0.15, 0.15);
    const double gy = rng.Uniform(-0.15, 0.15);
    const double theta = label * pi / spec.n_classes + rng.Uniform(-jitter, jitter);
    const double freq = rng.Uniform(spec.frequency_min, spec.frequency_max);
    const double phase = rng.Uniform(0, 2 * pi);
    const double amp = rng.Uniform(spec.amplitude_min, spec.amplitude_max);
    const double radius = rng.Uniform(spec.window_radius_min, spec.window_radius_max);
    const double margin = std::min(radius + 1.0, s / 2.0);
    const double cx = rng.Uniform(margin, s - margin);
    const double cy = rng.Uniform(margin, s - margin);
    const double ct = std::cos(theta), st = std::sin(theta);

    float* img = out + static_cast<std::int64_t>(i) * 3 * s * s;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double dist = std::hypot(px - cx, py - cy);
        const double window = 1.0 / (1.0 + std::exp((dist - radius) / 1.5));
        const double wave =
            std::sin(2 * pi * freq * (px * ct + py * st) + phase) * window * amp;
        const double ramp = gx * (px / s - 0.5) + gy * (py / s - 0.5);
        for (int c = 0; c < 3; ++c) {
          float v = static_cast<float>(base[static_cast<size_t>(c)] + ramp +
                                       tint[static_cast<size_t>(c)] * wave);
          Clamp01(v);
          img[(c * s + y) * s + x] = v;
        }
      }
    }
  }
  return set;
}

void WriteLabelsCsv(const std::string& path, std::span<const int> labels) {
  std::ostringstream ss;
  ss << "index,label\n";
  for (size_t i = 0; i < labels.size(); ++i) ss << i << ',' << labels[i] << '\n';
  WriteTextFile(path, ss.str());
}

std::vector<int> ReadLabelsCsv(const std::string& path) {
  std::istringstream in(ReadTextFile(path));
  std::string line;
  if (!std::getline(in, line) || Trim(line) != "index,label") {
    throw FormatError(path + ": expected header 'index,label'");
  }
  std::vector<int> labels;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = Trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected index,label");
    }
    std::int64_t index, label;
    try {
      index = ParseInt("index", line.substr(0, comma));
      label = ParseInt("label", line.substr(comma + 1));
    } catch (const ConfigError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (index != static_cast<std::int64_t>(labels.size())) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": index " +
                        std::to_string(index) + " out of order");
    }
    if (label < 0) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": negative label");
    }
    labels.push_back(static_cast<int>(label));
  }
  return labels;
}

void SaveSplit(const ImageSet& set, const std::string& split_dir) {
  std::error_code ec;
  fs::create_directories(split_dir, ec);
  if (ec) throw IoError("cannot create directory '" + split_dir + "': " + ec.message());
  WriteTensorFile((fs::path(split_dir) / kImagesFile).string(), set.images);
  WriteLabelsCsv((fs::path(split_dir) / kLabelsFile).string(), set.labels);
}

ImageSet LoadSplit(const std::string& split_dir) {
  const std::string images_path = (fs::path(split_dir) / kImagesFile).string();
  const std::string labels_path = (fs::path(split_dir) / kLabelsFile).string();
  ImageSet set;
  set.images = ReadTensorFile(images_path);
  set.labels = ReadLabelsCsv(labels_path);
  if (set.images.rank() != 4 || set.images.dim(1) != 3 ||
      set.images.dim(2) != set.images.dim(3)) {
    throw FormatError(images_path + ": expected [n, 3, S, S], got " +
                      ShapeToString(set.images.dims()));
  }
  if (set.images.dim(0) != set.size()) {
    throw FormatError(labels_path + ": " + std::to_string(set.size()) +
                      " labels for " + std::to_string(set.images.dim(0)) + " images");
  }
  return set;
}

void MakeDataset(const SyntheticSpec& spec, const std::string& dir) {
  spec.Validate();
  SaveSplit(GenerateSplit(spec, Split::kTrain), (fs::path(dir) / "train").string());
  SaveSplit(GenerateSplit(spec, Split::kTest), (fs::path(dir) / "test").string());

  std::ostringstream ss;
  ss << "dataset.classes=" << spec.n_classes << '\n'
     << "dataset.train=" << spec.n_train << '\n'
     << "dataset.test=" << spec.n_test << '\n'
     << "dataset.image_size=" << spec.image_size << '\n'
     << "dataset.seed=" << spec.seed << '\n'
     << "dataset.amplitude_min=" << FormatDouble(spec.amplitude_min) << '\n'
     << "dataset.amplitude_max=" << FormatDouble(spec.amplitude_max) << '\n'
     << "dataset.frequency_min=" << FormatDouble(spec.frequency_min) << '\n'
     << "dataset.frequency_max=" << FormatDouble(spec.frequency_max) << '\n'
     << "dataset.window_radius_min=" << FormatDouble(spec.window_radius_min) << '\n'
     << "dataset.window_radius_max=" << FormatDouble(spec.window_radius_max) << '\n';

  StreamManifest clean;
  clean.split_dir = "test";
  DomainEntry entry;
  entry.label = "clean";
  for (int i = 0; i < spec.n_test; ++i) entry.indices.push_back(i);
  clean.domains.push_back(std::move(entry));
  WriteTextFile((fs::path(dir) / kManifestFile).string(), ss.str() + clean.Serialize());
}

SyntheticSpec ReadDatasetSpec(const std::string& dir) {
  const std::string path = (fs::path(dir) / kManifestFile).string();
  SyntheticSpec spec;
  const std::map<std::string, std::function<void(const std::string&, const std::string&)>>
      setters = {
          {"dataset.classes", [&](auto& k, auto& v) { spec.n_classes = static_cast<int>(ParseInt(k, v)); }},
          {"dataset.train", [&](auto& k, auto& v) { spec.n_train = static_cast<int>(ParseInt(k, v)); }},
          {"dataset.test", [&](auto& k, auto& v) { spec.n_test = static_cast<int>(ParseInt(k, v)); }},
          {"dataset.image_size", [&](auto& k, auto& v) { spec.image_size = static_cast<int>(ParseInt(k, v)); }},
          {"dataset.seed", [&](auto& k, auto& v) { spec.seed = ParseUint(k, v); }},
          {"dataset.amplitude_min", [&](auto& k, auto& v) { spec.amplitude_min = ParseDouble(k, v); }},
          {"dataset.amplitude_max", [&](auto& k, auto& v) { spec.amplitude_max = ParseDouble(k, v); }},
          {"dataset.frequency_min", [&](auto& k, auto& v) { spec.frequency_min = ParseDouble(k, v); }},
          {"dataset.frequency_max", [&](auto& k, auto& v) { spec.frequency_max = ParseDouble(k, v); }},
          {"dataset.window_radius_min", [&](auto& k, auto& v) { spec.window_radius_min = ParseDouble(k, v); }},
          {"dataset.window_radius_max", [&](auto& k, auto& v) { spec.window_radius_max = ParseDouble(k, v); }},
      };
  try {
    for (const auto& [key, value] : ParseKeyValues(ReadTextFile(path))) {
      const auto it = setters.find(key);
      if (it != setters.end()) it->second(key, value);
    }
    spec.Validate();
  } catch (const Error& e) {
    if (dynamic_cast<const IoError*>(&e)) throw;
    throw FormatError(path + ": " + e.what());
  }
  return spec;
}

// --- corruptions -----------------------------------------------------------

std::string ToString(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::kNone: return "none";
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kShotNoise: return "shot_noise";
    case CorruptionKind::kImpulseNoise: return "impulse_noise";
    case CorruptionKind::kDefocusBlur: return "defocus_blur";
    case CorruptionKind::kContrast: return "contrast";
    case CorruptionKind::kBrightness: return "brightness";
  }
  throw ConfigError("unknown corruption kind");
}

std::vector<CorruptionKind> AllCorruptions() {
  return {CorruptionKind::kGaussianNoise, CorruptionKind::kShotNoise,
          CorruptionKind::kImpulseNoise,  CorruptionKind::kDefocusBlur,
          CorruptionKind::kContrast,      CorruptionKind::kBrightness};
}

CorruptionKind ParseCorruptionKind(const std::string& s) {
  if (s == "none") return CorruptionKind::kNone;
  for (CorruptionKind k : AllCorruptions()) {
    if (ToString(k) == s) return k;
  }
  throw ConfigError("unknown corruption '" + s +
                    "' (expected none, gaussian_noise, shot_noise, impulse_noise, "
                    "defocus_blur, contrast or brightness)");
}

double CorruptionParameter(CorruptionKind kind, int severity) {
  if (severity < 0 || severity > 5) {
    throw ConfigError("severity must be in 0..5, got " + std::to_string(severity));
  }
  static const std::map<CorruptionKind, std::array<double, 6>> kLadders = {
      {CorruptionKind::kNone, {0, 0, 0, 0, 0, 0}},
      {CorruptionKind::kGaussianNoise, {0, 0.04, 0.06, 0.09, 0.13, 0.19}},
      {CorruptionKind::kShotNoise, {0, 240, 100, 48, 20, 12}},
      {CorruptionKind::kImpulseNoise, {0, 0.015, 0.03, 0.045, 0.085, 0.135}},
      {CorruptionKind::kDefocusBlur, {0, 0.6, 0.9, 1.2, 1.6, 2.0}},
      {CorruptionKind::kContrast, {1, 0.7, 0.65, 0.6, 0.55, 0.525}},
      {CorruptionKind::kBrightness, {0, 0.05, 0.1, 0.15, 0.2, 0.25}},
  };
  return kLadders.at(kind)[static_cast<size_t>(severity)];
}

void CorruptInPlace(std::span<float> image, int size, const CorruptionSpec& spec,
                    std::uint64_t sample_key) {
  const size_t plane = static_cast<size_t>(size) * static_cast<size_t>(size);
  if (image.size() != 3 * plane) {
    throw ShapeError("corrupt: expected 3*" + std::to_string(size) + "^2 values, got " +
                     std::to_string(image.size()));
  }
  const double p = CorruptionParameter(spec.kind, spec.severity);
  if (spec.severity == 0 || spec.kind == CorruptionKind::kNone) return;
  SplitMix64 rng(MixSeed(
      MixSeed(spec.seed, static_cast<std::uint64_t>(spec.kind) * 16 +
                             static_cast<std::uint64_t>(spec.severity)),
      sample_key));

  switch (spec.kind) {
    case CorruptionKind::kNone:
      return;
    case CorruptionKind::kGaussianNoise:
      for (float& v : image) v = static_cast<float>(v + p * rng.Normal());
      break;
    case CorruptionKind::kShotNoise:
      for (float& v : image) {
        v = static_cast<float>(rng.Poisson(std::max(0.0f, v) * p) / p);
      }
      break;
    case CorruptionKind::kImpulseNoise:
      for (float& v : image) {
        if (rng.Uniform() < p) v = rng.Uniform() < 0.5 ? 0.0f : 1.0f;
      }
      break;
    case CorruptionKind::kDefocusBlur: {
      int h = 0;
      const std::vector<double> k = DiskKernel(p, &h);
      const int w = 2 * h + 1;
      std::vector<float> src(image.begin(), image.end());
      for (int c = 0; c < 3; ++c) {
        const float* in = src.data() + c * plane;
        float* out = image.data() + c * plane;
        for (int y = 0; y < size; ++y) {
          for (int x = 0; x < size; ++x) {
            double acc = 0;
            for (int dy = -h; dy <= h; ++dy) {
              const int yy = Reflect(y + dy, size);
              for (int dx = -h; dx <= h; ++dx) {
                const double kv = k[static_cast<size_t>((dy + h) * w + (dx + h))];
                if (kv == 0) continue;
                acc += kv * in[yy * size + Reflect(x + dx, size)];
              }
            }
            out[y * size + x] = static_cast<float>(acc);
          }
        }
      }
      break;
    }
    case CorruptionKind::kContrast:
      for (int c = 0; c < 3; ++c) {
        std::span<float> ch = image.subspan(c * plane, plane);
        double mean = 0;
        for (float v : ch) mean += v;
        mean /= static_cast<double>(plane);
        for (float& v : ch) v = static_cast<float>((v - mean) * p + mean);
      }
      break;
    case CorruptionKind::kBrightness:
      for (float& v : image) v = static_cast<float>(v + p);
      break;
  }
  for (float& v : image) Clamp01(v);
}

Tensor Corrupt(const Tensor& image, const CorruptionSpec& spec,
               std::uint64_t sample_key) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("corrupt: expected [3, S, S], got " + ShapeToString(image.dims()));
  }
  Tensor out = image;
  CorruptInPlace(out.data(), static_cast<int>(image.dim(1)), spec, sample_key);
  return out;
}

Tensor Normalize(const Tensor& images) {
  Tensor out = images;
  for (float& v : out.data()) v = (v - 0.5f) / 0.5f;
  return out;
}

// --- streams ---------------------------------------------------------------

std::int64_t StreamManifest::num_samples() const {
  std::int64_t n = 0;
  for (const auto& d : domains) n += static_cast<std::int64_t>(d.indices.size());
  return n;
}

std::string StreamManifest::Serialize() const {
  std::ostringstream ss;
  ss << "format=" << kManifestFormat << '\n'
     << "split=" << split_dir << '\n'
     << "batch_size=" << batch_size << '\n'
     << "mode=" << (mixed ? "mixed" : "sequential") << '\n';
  for (const auto& d : domains) {
    ss << '\n'
       << "domain=" << d.label << '\n'
       << "corruption=" << ToString(d.corruption.kind) << '\n'
       << "severity=" << d.corruption.severity << '\n'
       << "seed=" << d.corruption.seed << '\n';
    bool contiguous = !d.indices.empty();
    for (size_t i = 1; i < d.indices.size() && contiguous; ++i) {
      contiguous = d.indices[i] == d.indices[i - 1] + 1;
    }
    ss << "indices=";
    if (contiguous) {
      ss << d.indices.front() << ':' << d.indices.back() + 1;
    } else {
      for (size_t i = 0; i < d.indices.size(); ++i) ss << (i ? "," : "") << d.indices[i];
    }
    ss << '\n';
  }
  return ss.str();
}

StreamManifest StreamManifest::Parse(const std::string& text) {
  StreamManifest m;
  std::set<std::string> seen_header;
  std::set<std::string> seen_entry;
  bool has_indices = false;
  auto close_entry = [&] {
    if (!m.domains.empty() && !has_indices) {
      throw FormatError("domain '" + m.domains.back().label + "' has no indices");
    }
  };
  for (const auto& [key, value] : ParseKeyValues(text)) {
    if (key.rfind("dataset.", 0) == 0) continue;  // dataset metadata
    if (key == "format" || key == "split" || key == "batch_size" || key == "mode") {
      if (!m.domains.empty()) {
        throw FormatError("key '" + key + "' must precede the first domain");
      }
      if (!seen_header.insert(key).second) {
        throw FormatError("duplicate key '" + key + "'");
      }
      if (key == "format" && value != kManifestFormat) {
        throw FormatError("unsupported manifest format '" + value + "'");
      } else if (key == "split") {
        m.split_dir = value;
      } else if (key == "batch_size") {
        const auto b = ParseInt(key, value);
        if (b < 1) throw ConfigError("batch_size must be >= 1");
        m.batch_size = static_cast<int>(b);
      } else if (key == "mode") {
        if (value != "sequential" && value != "mixed") {
          throw ConfigError("mode must be sequential or mixed, got '" + value + "'");
        }
        m.mixed = value == "mixed";
      }
      continue;
    }
    if (key == "domain") {
      close_entry();
      if (value.empty()) throw FormatError("empty domain label");
      m.domains.push_back(DomainEntry{value, {}, {}});
      seen_entry.clear();
      has_indices = false;
      continue;
    }
    if (key != "corruption" && key != "severity" && key != "seed" && key != "indices") {
      throw FormatError("unknown manifest key '" + key + "'");
    }
    if (m.domains.empty()) {
      throw FormatError("key '" + key + "' appears before any domain");
    }
    if (!seen_entry.insert(key).second) {
      throw FormatError("duplicate key '" + key + "' in domain '" +
                        m.domains.back().label + "'");
    }
    DomainEntry& d = m.domains.back();
    if (key == "corruption") {
      d.corruption.kind = ParseCorruptionKind(value);
    } else if (key == "severity") {
      d.corruption.severity = static_cast<int>(ParseInt(key, value));
      CorruptionParameter(d.corruption.kind, d.corruption.severity);
    } else if (key == "seed") {
      d.corruption.seed = ParseUint(key, value);
    } else {
      has_indices = true;
      const auto colon = value.find(':');
      if (colon != std::string::npos) {
        const auto a = ParseInt(key, Trim(value.substr(0, colon)));
        const auto b = ParseInt(key, Trim(value.substr(colon + 1)));
        if (a < 0 || b < a) throw FormatError("bad index range '" + value + "'");
        for (auto i = a; i < b; ++i) d.indices.push_back(i);
      } else {
        std::istringstream parts(value);
        std::string part;
        while (std::getline(parts, part, ',')) {
          const auto i = ParseInt(key, Trim(part));
          if (i < 0) throw FormatError("negative index in '" + value + "'");
          d.indices.push_back(i);
        }
      }
    }
  }
  close_entry();
  if (m.split_dir.empty()) throw FormatError("manifest is missing 'split'");
  if (m.domains.empty()) throw FormatError("manifest has no domains");
  return m;
}

StreamManifest StreamManifest::ReadFile(const std::string& path) {
  StreamManifest m;
  try {
    m = Parse(ReadTextFile(path));
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what());
  }
  const fs::path split(m.split_dir);
  if (split.is_relative()) {
    m.split_dir = (fs::path(path).parent_path() / split).lexically_normal().string();
  }
  return m;
}

void StreamManifest::WriteFile(const std::string& path) const {
  WriteTextFile(path, Serialize());
}

Stream::Stream(StreamManifest manifest, ImageSet data)
    : manifest_(std::move(manifest)), data_(std::move(data)) {
  if (manifest_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::vector<PlannedBatch>> per_domain(manifest_.domains.size());
  for (size_t d = 0; d < manifest_.domains.size(); ++d) {
    const auto& entry = manifest_.domains[d];
    std::set<std::int64_t> seen;
    for (auto i : entry.indices) {
      if (i < 0 || i >= data_.size()) {
        throw ConfigError("domain '" + entry.label + "': index " + std::to_string(i) +
                          " outside split of " + std::to_string(data_.size()));
      }
      if (!seen.insert(i).second) {
        throw ConfigError("domain '" + entry.label + "': index " + std::to_string(i) +
                          " listed twice");
      }
    }
    const size_t b = static_cast<size_t>(manifest_.batch_size);
    for (size_t begin = 0; begin < entry.indices.size(); begin += b) {
      per_domain[d].push_back({d, begin, std::min(begin + b, entry.indices.size())});
    }
  }
  if (manifest_.mixed) {
    for (size_t round = 0;; ++round) {
      bool any = false;
      for (const auto& batches : per_domain) {
        if (round < batches.size()) {
          plan_.push_back(batches[round]);
          any = true;
        }
      }
      if (!any) break;
    }
  } else {
    for (const auto& batches : per_domain) {
      plan_.insert(plan_.end(), batches.begin(), batches.end());
    }
  }
}

Stream Stream::Open(const StreamManifest& manifest) {
  return Stream(manifest, LoadSplit(manifest.split_dir));
}

std::optional<Batch> Stream::Next() {
  if (cursor_ >= plan_.size()) return std::nullopt;
  const PlannedBatch& pb = plan_[cursor_];
  const DomainEntry& entry = manifest_.domains[pb.domain];
  const std::int64_t s = data_.images.dim(2);
  const std::int64_t per_image = 3 * s * s;
  const auto n = static_cast<std::int64_t>(pb.end - pb.begin);

  Batch batch;
  batch.step = static_cast<std::int64_t>(cursor_);
  batch.domain = entry.label;
  batch.images = Tensor({n, 3, s, s});
  for (std::int64_t j = 0; j < n; ++j) {
    const std::int64_t idx = entry.indices[pb.begin + static_cast<size_t>(j)];
    std::span<float> dst = batch.images.data().subspan(
        static_cast<size_t>(j * per_image), static_cast<size_t>(per_image));
    std::copy_n(data_.images.raw() + idx * per_image, per_image, dst.begin());
    CorruptInPlace(dst, static_cast<int>(s), entry.corruption,
                   static_cast<std::uint64_t>(idx));
    for (float& v : dst) v = (v - 0.5f) / 0.5f;
    batch.sample_ids.push_back(idx);
    batch.labels.values_.push_back(data_.labels[static_cast<size_t>(idx)]);
  }
  ++cursor_;
  return batch;
}

std::int64_t StreamScorer::CountCorrect(const Batch& batch,
                                        std::span<const int> predictions) {
  if (predictions.size() != batch.labels.values_.size()) {
    throw ShapeError("score: " + std::to_string(predictions.size()) +
                     " predictions for a batch of " +
                     std::to_string(batch.labels.values_.size()));
  }
  std::int64_t correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    correct += predictions[i] == batch.labels.values_[i] ? 1 : 0;
  }
  return correct;
}

}  // namespace pcsr
