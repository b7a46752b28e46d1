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

// Reference implementations with explicit loops in double precision. They
// share no code with the library beyond the tensor container.

#ifndef PCSR_TESTS_ORACLES_H_
#define PCSR_TESTS_ORACLES_H_

#include <algorithm>
#include <cmath>
#include <vector>

#include "pcsr/tensor.h"

namespace pcsr::testing {

using DTensor = BasicTensor<double>;

// Plain-loop cosine similarity, written without the tape.
inline std::vector<double> NaiveCosine(const DTensor& f) {
  const auto b = f.dim(0), n = f.dim(1), d = f.dim(2);
  std::vector<double> m(static_cast<size_t>(b * n * n));
  for (std::int64_t s = 0; s < b; ++s) {
    for (std::int64_t j = 0; j < n; ++j) {
      for (std::int64_t k = 0; k < n; ++k) {
        double dot = 0, nj = 0, nk = 0;
        for (std::int64_t c = 0; c < d; ++c) {
          const double x = f.at({s, j, c}), y = f.at({s, k, c});
          dot += x * y;
          nj += x * x;
          nk += y * y;
        }
        m[static_cast<size_t>((s * n + j) * n + k)] = dot / std::sqrt(nj * nk);
      }
    }
  }
  return m;
}

// -(1/L) sum_l (1/N^2) sum_jk M_jk, averaged over the batch.
inline double NaiveSimilarityLoss(const std::vector<DTensor>& features) {
  const auto b = features[0].dim(0), n = features[0].dim(1);
  double total = 0;
  for (const auto& f : features) {
    const auto m = NaiveCosine(f);
    for (std::int64_t s = 0; s < b; ++s) {
      double acc = 0;
      for (std::int64_t jk = 0; jk < n * n; ++jk) acc += m[static_cast<size_t>(s * n * n + jk)];
      total += acc / static_cast<double>(n * n);
    }
  }
  return -total / static_cast<double>(features.size()) / static_cast<double>(b);
}

// Per-head softmax(q k^T / sqrt(dh)) v with explicit loops.
inline DTensor NaiveAttention(const DTensor& q, const DTensor& k, const DTensor& v, int heads) {
  const auto b = q.dim(0), t = q.dim(1), d = q.dim(2), dh = d / heads;
  DTensor out({b, t, d});
  for (std::int64_t s = 0; s < b; ++s) {
    for (int h = 0; h < heads; ++h) {
      for (std::int64_t i = 0; i < t; ++i) {
        std::vector<double> score(static_cast<size_t>(t));
        double mx = -1e300;
        for (std::int64_t j = 0; j < t; ++j) {
          double dot = 0;
          for (std::int64_t c = 0; c < dh; ++c) {
            dot += q.at({s, i, h * dh + c}) * k.at({s, j, h * dh + c});
          }
          score[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[static_cast<size_t>(j)]);
        }
        double z = 0;
        for (auto& e : score) z += (e = std::exp(e - mx));
        for (std::int64_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::int64_t j = 0; j < t; ++j) {
            acc += score[static_cast<size_t>(j)] / z * v.at({s, j, h * dh + c});
          }
          out.at({s, i, h * dh + c}) = acc;
        }
      }
    }
  }
  return out;
}

// -sum p ln p per row of probabilities [B, C].
inline std::vector<double> NaiveEntropy(const std::vector<double>& probs, int classes) {
  std::vector<double> out(probs.size() / static_cast<size_t>(classes), 0.0);
  for (size_t i = 0; i < out.size(); ++i) {
    for (int c = 0; c < classes; ++c) {
      const double p = probs[i * static_cast<size_t>(classes) + static_cast<size_t>(c)];
      if (p > 0) out[i] -= p * std::log(p);
    }
  }
  return out;
}

// gamma * x + beta with per-sample factors [B, d] over tokens of x [B, T, d].
inline DTensor NaiveAffine(const DTensor& x, const DTensor& gamma, const DTensor& beta) {
  DTensor out(x.dims());
  for (std::int64_t s = 0; s < x.dim(0); ++s) {
    for (std::int64_t t = 0; t < x.dim(1); ++t) {
      for (std::int64_t c = 0; c < x.dim(2); ++c) {
        out.at({s, t, c}) = gamma.at({s, c}) * x.at({s, t, c}) + beta.at({s, c});
      }
    }
  }
  return out;
}

}  // namespace pcsr::testing

#endif  // PCSR_TESTS_ORACLES_H_
