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

// Per-sample scale and shift of the attention inputs, driven by a pooled
// domain token.
//
// For every transformer layer l two small linear networks are adapted at
// test time:
//
//   domain separation  f_j = P_j * W_dsn + b_dsn          (per patch token)
//                      D   = avg_j f_j   (or max_j)       (domain token)
//                      M_jk = cos(f_j, f_k)
//   factor generator   [gamma, beta] = cond * W_fgn + b_fgn
//                      cond = D + C   (C = class token; see Conditioning)
//
// gamma/beta rescale and shift the query, key and value features before the
// attention softmax. The similarity loss
//
//   L_s = -(1/L) sum_l mean_{b,j,k} M^l_bjk
//
// pulls the per-patch domain features together so that the pooled token is a
// central summary of the shift shared by all patches.
//
// Weights are stored [in, out]. With W_fgn = 0 and b_fgn = (1..1, 0..0) the
// generated factors are the identity for any input, so a freshly initialized
// model reproduces the source network exactly.

#ifndef PCSR_RECALIBRATION_H_
#define PCSR_RECALIBRATION_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcsr/autodiff.h"
#include "pcsr/optim.h"
#include "pcsr/tensor.h"
#include "pcsr/tensor_io.h"

namespace pcsr {

// Input of the factor generator.
enum class Conditioning {
  kBoth,        // D + C
  kClassOnly,   // C
  kDomainOnly,  // D
  kMeanToken,   // mean of the raw patch tokens, no domain separation
};

enum class Aggregation { kAvg, kMax };

// kShared: one (gamma, beta) for Q, K and V. kIndependent: a pair each.
enum class FactorSharing { kShared, kIndependent };

// kPerLayer: one network pair per transformer layer. kAcrossLayers: a single
// pair reused by every layer.
enum class LayerSharing { kPerLayer, kAcrossLayers };

struct PcsrConfig {
  Conditioning conditioning = Conditioning::kBoth;
  Aggregation aggregation = Aggregation::kAvg;
  FactorSharing factor_sharing = FactorSharing::kShared;
  LayerSharing layer_sharing = LayerSharing::kPerLayer;

  friend bool operator==(const PcsrConfig&, const PcsrConfig&) = default;
};

std::string ToString(Conditioning v);
std::string ToString(Aggregation v);
std::string ToString(FactorSharing v);
std::string ToString(LayerSharing v);
// Inverse of ToString; unknown names raise ConfigError.
Conditioning ParseConditioning(const std::string& s);
Aggregation ParseAggregation(const std::string& s);
FactorSharing ParseFactorSharing(const std::string& s);
LayerSharing ParseLayerSharing(const std::string& s);

template <typename T>
struct PcsrLayerParams {
  BasicParam<T> dsn_weight;  // [d, d]
  BasicParam<T> dsn_bias;    // [d]
  BasicParam<T> fgn_weight;  // [d, 2d] shared, [d, 6d] independent
  BasicParam<T> fgn_bias;
};

template <typename T>
struct BasicPcsrParams {
  PcsrConfig config;
  int d_model = 0;
  int n_layers = 0;
  std::vector<PcsrLayerParams<T>> layers;

  PcsrLayerParams<T>& ForLayer(int layer);

  // Names follow "dsn.{l}.weight", "dsn.{l}.bias", "fgn.{l}.weight",
  // "fgn.{l}.bias" in layer order.
  NamedParamRefs<T> Named();
  std::vector<BasicParam<T>*> DsnParams();
  std::vector<BasicParam<T>*> FgnParams();
  void SetTrainable(bool trainable);
  std::int64_t NumParameters() const;

  template <typename U>
  BasicPcsrParams<U> Cast() const {
    BasicPcsrParams<U> out;
    out.config = config;
    out.d_model = d_model;
    out.n_layers = n_layers;
    for (const auto& l : layers) {
      out.layers.push_back({l.dsn_weight.template Cast<U>(),
                            l.dsn_bias.template Cast<U>(),
                            l.fgn_weight.template Cast<U>(),
                            l.fgn_bias.template Cast<U>()});
    }
    return out;
  }
};

using PcsrParams = BasicPcsrParams<float>;

// Identity domain separation (W = I, b = 0) and identity factor generation.
// No randomness is involved; `seed` is accepted for interface symmetry.
template <typename T = float>
BasicPcsrParams<T> InitPcsr(const PcsrConfig& config, int d_model,
                            int n_layers, std::uint64_t seed = 0);

// Number of network pairs stored for a config.
int PcsrStoredLayers(const PcsrConfig& config, int n_layers);

NamedTensors PcsrToNamed(const PcsrParams& params);
// Rebuilds params for the given layout; names must match exactly.
PcsrParams PcsrFromNamed(const NamedTensors& entries, const PcsrConfig& config,
                         int d_model, int n_layers);
void SavePcsrCheckpoint(const PcsrParams& params, const std::string& path);
PcsrParams LoadPcsrCheckpoint(const std::string& path, const PcsrConfig& config,
                              int d_model, int n_layers);

// --- ops -------------------------------------------------------------------

// patches [B, N, d] (class token excluded) -> per-patch domain features.
template <typename T>
Var<T> DsnFeatures(const Var<T>& patches, PcsrLayerParams<T>& layer);

// features [B, N, d] -> [B, d]
template <typename T>
Var<T> DomainToken(const Var<T>& features, Aggregation aggregation);

// features [B, N, d] -> [B, N, N] cosine similarities.
template <typename T>
Var<T> SimilarityMatrix(const Var<T>& features,
                        std::int64_t* degenerate = nullptr);

// Scalar in [-1, 1]; averaged over layers and the batch.
template <typename T>
Var<T> SimilarityLoss(std::span<const Var<T>> matrices);

template <typename T>
Var<T> ConditioningInput(Conditioning mode, const Var<T>& domain,
                         const Var<T>& cls, const Var<T>& patches);

// Per-sample factors, each [B, d]. In shared mode the k/v fields alias q.
template <typename T>
struct Factors {
  Var<T> gamma_q, beta_q, gamma_k, beta_k, gamma_v, beta_v;
};

template <typename T>
Factors<T> GenerateFactors(const Var<T>& condition, PcsrLayerParams<T>& layer,
                           FactorSharing sharing);

template <typename T>
struct Qkv {
  Var<T> q, k, v;
};

// Q' = gamma_q * Q + beta_q (likewise K, V), broadcast over tokens.
template <typename T>
Qkv<T> RecalibrateQkv(const Qkv<T>& qkv, const Factors<T>& factors);

// Multi-head softmax(Q K^T / sqrt(d_head)) V over [B, T, d] inputs, heads
// concatenated back to [B, T, d]. When `probs` is given it receives the
// attention weights [B * H, T, T].
template <typename T>
Var<T> RecalibratedAttention(const Qkv<T>& qkv, int n_heads,
                             Var<T>* probs = nullptr);

}  // namespace pcsr

#endif  // PCSR_RECALIBRATION_H_
