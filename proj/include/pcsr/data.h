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

// Synthetic image classification data, corruptions and test streams.
//
// Dataset directory layout:
//   <dir>/manifest.txt               dataset keys + a clean test stream
//   <dir>/train/images.pcsr-tensor   [n, 3, S, S] floats in [0, 1]
//   <dir>/train/labels.csv           "index,label" header, one row per image
//   <dir>/test/...                   same as train
//
// Manifest grammar: one `key=value` per line, `#` starts a comment, blank
// lines are ignored. Order matters: each `domain=` line opens a new domain
// entry and the `corruption`, `severity`, `seed` and `indices` keys that
// follow belong to it. `indices` is either a half-open range `a:b` or a
// comma-separated list. See StreamManifest::Serialize for the exact keys.

#ifndef PCSR_DATA_H_
#define PCSR_DATA_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcsr/tensor.h"

namespace pcsr {

// --- synthetic data --------------------------------------------------------

// Each class is an oriented sinusoidal grating (orientation k * pi / C)
// inside a soft circular window, drawn over a random smooth background.
struct SyntheticSpec {
  int n_classes = 8;
  int n_train = 8192;
  int n_test = 4096;
  int image_size = 32;
  std::uint64_t seed = 1;
  double amplitude_min = 0.045;
  double amplitude_max = 0.09;
  // Cycles per pixel.
  double frequency_min = 0.10;
  double frequency_max = 0.16;
  double window_radius_min = 20.0;
  double window_radius_max = 24.0;

  void Validate() const;
};

enum class Split { kTrain, kTest };

struct ImageSet {
  Tensor images;            // [n, 3, S, S] in [0, 1]
  std::vector<int> labels;  // n entries

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

// Deterministic in (spec, split); train and test draw from disjoint seed
// streams.
ImageSet GenerateSplit(const SyntheticSpec& spec, Split split);

void MakeDataset(const SyntheticSpec& spec, const std::string& dir);
ImageSet LoadSplit(const std::string& split_dir);
void SaveSplit(const ImageSet& set, const std::string& split_dir);
SyntheticSpec ReadDatasetSpec(const std::string& dir);

void WriteLabelsCsv(const std::string& path, std::span<const int> labels);
std::vector<int> ReadLabelsCsv(const std::string& path);

// --- corruptions -----------------------------------------------------------

enum class CorruptionKind {
  kNone,
  kGaussianNoise,
  kShotNoise,
  kImpulseNoise,
  kDefocusBlur,
  kContrast,
  kBrightness,
};

std::string ToString(CorruptionKind kind);
CorruptionKind ParseCorruptionKind(const std::string& s);
std::vector<CorruptionKind> AllCorruptions();

// Severity 0 is the identity; 1..5 follow the ladders below.
//   gaussian_noise  sigma             0.04 0.06 0.09 0.13 0.19
//   shot_noise      photons per unit  240  100  48   20   12
//   impulse_noise   flipped fraction  .015 .03  .045 .085 .135
//   defocus_blur    disk radius (px)  0.6  0.9  1.2  1.6  2.0
//   contrast        kept contrast     0.7  0.65 0.6  0.55 0.525
//   brightness      added offset      0.05 0.10 0.15 0.20 0.25
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kNone;
  int severity = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

double CorruptionParameter(CorruptionKind kind, int severity);

// Corrupts one [3, S, S] image in place. `sample_key` decorrelates the
// noise of different images under the same spec. Output is clamped to
// [0, 1].
void CorruptInPlace(std::span<float> image, int size, const CorruptionSpec& spec,
                    std::uint64_t sample_key);
Tensor Corrupt(const Tensor& image, const CorruptionSpec& spec,
               std::uint64_t sample_key = 0);

// (x - 0.5) / 0.5 per channel.
Tensor Normalize(const Tensor& images);

// --- streams ---------------------------------------------------------------

struct DomainEntry {
  std::string label;
  CorruptionSpec corruption;
  std::vector<std::int64_t> indices;

  friend bool operator==(const DomainEntry&, const DomainEntry&) = default;
};

struct StreamManifest {
  std::string split_dir;  // directory with images.pcsr-tensor + labels.csv
  int batch_size = 64;
  bool mixed = false;     // interleave domains batch by batch
  std::vector<DomainEntry> domains;

  std::int64_t num_samples() const;
  std::string Serialize() const;
  static StreamManifest Parse(const std::string& text);
  static StreamManifest ReadFile(const std::string& path);
  void WriteFile(const std::string& path) const;

  friend bool operator==(const StreamManifest&, const StreamManifest&) = default;
};

class StreamScorer;
class Stream;

// Ground-truth labels of a batch. Only StreamScorer can read them, which
// keeps labels out of every adaptation code path.
class HiddenLabels {
 public:
  size_t size() const { return values_.size(); }

 private:
  friend class StreamScorer;
  friend class Stream;
  std::vector<int> values_;
};

struct Batch {
  std::int64_t step = 0;
  std::string domain;
  Tensor images;  // normalized [b, 3, S, S]
  std::vector<std::int64_t> sample_ids;
  HiddenLabels labels;
};

// Yields batches in manifest order. Each domain is cut into consecutive
// batches (last one may be partial); mixed manifests alternate domains.
class Stream {
 public:
  Stream(StreamManifest manifest, ImageSet data);
  // Loads the split named in the manifest.
  static Stream Open(const StreamManifest& manifest);

  std::optional<Batch> Next();
  std::int64_t num_batches() const {
    return static_cast<std::int64_t>(plan_.size());
  }
  std::int64_t num_samples() const { return manifest_.num_samples(); }
  const StreamManifest& manifest() const { return manifest_; }

 private:
  struct PlannedBatch {
    size_t domain;
    size_t begin, end;  // into domains[domain].indices
  };

  StreamManifest manifest_;
  ImageSet data_;
  std::vector<PlannedBatch> plan_;
  size_t cursor_ = 0;
};

// Reads hidden labels to score predictions.
class StreamScorer {
 public:
  static std::int64_t CountCorrect(const Batch& batch,
                                   std::span<const int> predictions);
};

}  // namespace pcsr

#endif  // PCSR_DATA_H_
