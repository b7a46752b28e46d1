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

#ifndef PCSR_TESTS_TEST_UTIL_H_
#define PCSR_TESTS_TEST_UTIL_H_

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "pcsr/random.h"
#include "pcsr/recalibration.h"
#include "pcsr/tensor.h"
#include "pcsr/vit.h"

namespace pcsr::testing {

template <typename T = float>
BasicTensor<T> RandomTensor(Shape dims, SplitMix64& rng, double scale = 1.0) {
  BasicTensor<T> t(std::move(dims));
  for (T& v : t.data()) v = static_cast<T>(scale * rng.Normal());
  return t;
}

// d=8, N=4, L=2, H=2, C=3 on 16x16 images.
inline VitConfig TinyConfig() {
  VitConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.n_classes = 3;
  return c;
}

// Default init plus noise so nothing sits at a symmetric point.
template <typename T = float>
BasicVitParams<T> RandomVit(const VitConfig& config, std::uint64_t seed,
                            double noise = 0.3) {
  auto vit = InitVit<T>(config, seed);
  SplitMix64 rng(MixSeed(seed, 77));
  for (auto& [name, p] : vit.Named()) {
    for (T& v : p->value.data()) v += static_cast<T>(noise * rng.Normal());
  }
  return vit;
}

template <typename T = float>
BasicPcsrParams<T> RandomPcsr(const PcsrConfig& config, int d, int layers,
                              std::uint64_t seed, double noise = 0.3) {
  auto p = InitPcsr<T>(config, d, layers);
  SplitMix64 rng(MixSeed(seed, 78));
  for (auto& [name, q] : p.Named()) {
    for (T& v : q->value.data()) v += static_cast<T>(noise * rng.Normal());
  }
  return p;
}

inline double RelErr(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-30});
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("pcsr_test_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++) + "_" + std::to_string(tick));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string path() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace pcsr::testing

#endif  // PCSR_TESTS_TEST_UTIL_H_
