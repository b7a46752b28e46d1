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

#include "pcsr/recalibration.h"

#include <cmath>
#include <map>
#include <set>

#include "pcsr/error.h"

namespace pcsr {

std::string ToString(Conditioning v) {
  switch (v) {
    case Conditioning::kBoth: return "both";
    case Conditioning::kClassOnly: return "class_only";
    case Conditioning::kDomainOnly: return "domain_only";
    case Conditioning::kMeanToken: return "mean_token";
  }
  return "?";
}

std::string ToString(Aggregation v) {
  return v == Aggregation::kAvg ? "avg" : "max";
}

std::string ToString(FactorSharing v) {
  return v == FactorSharing::kShared ? "shared" : "independent";
}

std::string ToString(LayerSharing v) {
  return v == LayerSharing::kPerLayer ? "per_layer" : "across_layers";
}

Conditioning ParseConditioning(const std::string& s) {
  if (s == "both") return Conditioning::kBoth;
  if (s == "class_only") return Conditioning::kClassOnly;
  if (s == "domain_only") return Conditioning::kDomainOnly;
  if (s == "mean_token") return Conditioning::kMeanToken;
  throw ConfigError("unknown conditioning '" + s +
                    "' (expected both|class_only|domain_only|mean_token)");
}

Aggregation ParseAggregation(const std::string& s) {
  if (s == "avg") return Aggregation::kAvg;
  if (s == "max") return Aggregation::kMax;
  throw ConfigError("unknown aggregation '" + s + "' (expected avg|max)");
}

FactorSharing ParseFactorSharing(const std::string& s) {
  if (s == "shared") return FactorSharing::kShared;
  if (s == "independent") return FactorSharing::kIndependent;
  throw ConfigError("unknown sharing '" + s + "' (expected shared|independent)");
}

LayerSharing ParseLayerSharing(const std::string& s) {
  if (s == "per_layer") return LayerSharing::kPerLayer;
  if (s == "across_layers") return LayerSharing::kAcrossLayers;
  throw ConfigError("unknown layer sharing '" + s +
                    "' (expected per_layer|across_layers)");
}

int PcsrStoredLayers(const PcsrConfig& config, int n_layers) {
  return config.layer_sharing == LayerSharing::kAcrossLayers ? 1 : n_layers;
}

namespace {

int FactorWidth(FactorSharing sharing, int d) {
  return sharing == FactorSharing::kShared ? 2 * d : 6 * d;
}

}  // namespace

template <typename T>
PcsrLayerParams<T>& BasicPcsrParams<T>::ForLayer(int layer) {
  if (layer < 0 || layer >= n_layers) {
    throw ContractError("pcsr: layer index " + std::to_string(layer) +
                        " out of range");
  }
  return config.layer_sharing == LayerSharing::kAcrossLayers
             ? layers.at(0)
             : layers.at(static_cast<size_t>(layer));
}

template <typename T>
NamedParamRefs<T> BasicPcsrParams<T>::Named() {
  NamedParamRefs<T> out;
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string i = std::to_string(l);
    out.emplace_back("dsn." + i + ".weight", &layers[l].dsn_weight);
    out.emplace_back("dsn." + i + ".bias", &layers[l].dsn_bias);
    out.emplace_back("fgn." + i + ".weight", &layers[l].fgn_weight);
    out.emplace_back("fgn." + i + ".bias", &layers[l].fgn_bias);
  }
  return out;
}

template <typename T>
std::vector<BasicParam<T>*> BasicPcsrParams<T>::DsnParams() {
  std::vector<BasicParam<T>*> out;
  for (auto& l : layers) {
    out.push_back(&l.dsn_weight);
    out.push_back(&l.dsn_bias);
  }
  return out;
}

template <typename T>
std::vector<BasicParam<T>*> BasicPcsrParams<T>::FgnParams() {
  std::vector<BasicParam<T>*> out;
  for (auto& l : layers) {
    out.push_back(&l.fgn_weight);
    out.push_back(&l.fgn_bias);
  }
  return out;
}

template <typename T>
void BasicPcsrParams<T>::SetTrainable(bool trainable) {
  for (auto& [name, p] : Named()) p->requires_grad = trainable;
}

template <typename T>
std::int64_t BasicPcsrParams<T>::NumParameters() const {
  std::int64_t n = 0;
  for (const auto& l : layers) {
    n += l.dsn_weight.value.numel() + l.dsn_bias.value.numel() +
         l.fgn_weight.value.numel() + l.fgn_bias.value.numel();
  }
  return n;
}

template <typename T>
BasicPcsrParams<T> InitPcsr(const PcsrConfig& config, int d_model,
                            int n_layers, std::uint64_t /*seed*/) {
  if (d_model <= 0 || n_layers <= 0) {
    throw ConfigError("pcsr: d_model and n_layers must be positive");
  }
  BasicPcsrParams<T> p;
  p.config = config;
  p.d_model = d_model;
  p.n_layers = n_layers;
  const std::int64_t d = d_model;
  const int width = FactorWidth(config.factor_sharing, d_model);
  for (int l = 0; l < PcsrStoredLayers(config, n_layers); ++l) {
    PcsrLayerParams<T> layer;
    BasicTensor<T> eye({d, d});
    for (std::int64_t i = 0; i < d; ++i) eye.at({i, i}) = T(1);
    layer.dsn_weight = BasicParam<T>(std::move(eye), true);
    layer.dsn_bias = BasicParam<T>(BasicTensor<T>({d}), true);
    layer.fgn_weight = BasicParam<T>(BasicTensor<T>({d, width}), true);
    BasicTensor<T> bias({width});
    // Layout [gamma | beta] repeated once (shared) or for q, k, v.
    for (std::int64_t block = 0; block < width / (2 * d); ++block) {
      for (std::int64_t i = 0; i < d; ++i) bias[block * 2 * d + i] = T(1);
    }
    layer.fgn_bias = BasicParam<T>(std::move(bias), true);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

NamedTensors PcsrToNamed(const PcsrParams& params) {
  NamedTensors out;
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const std::string i = std::to_string(l);
    const auto& layer = params.layers[l];
    out.emplace_back("dsn." + i + ".weight", layer.dsn_weight.value);
    out.emplace_back("dsn." + i + ".bias", layer.dsn_bias.value);
    out.emplace_back("fgn." + i + ".weight", layer.fgn_weight.value);
    out.emplace_back("fgn." + i + ".bias", layer.fgn_bias.value);
  }
  return out;
}

PcsrParams PcsrFromNamed(const NamedTensors& entries, const PcsrConfig& config,
                         int d_model, int n_layers) {
  PcsrParams p = InitPcsr<float>(config, d_model, n_layers);
  auto expected = p.Named();
  std::map<std::string, BasicParam<float>*> by_name;
  std::string expected_list;
  for (auto& [name, param] : expected) {
    by_name[name] = param;
    expected_list += (expected_list.empty() ? "" : ", ") + name;
  }
  std::set<std::string> seen;
  for (const auto& [name, tensor] : entries) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("pcsr checkpoint: unknown tensor '" + name +
                        "'; expected names: " + expected_list);
    }
    if (!seen.insert(name).second) {
      throw FormatError("pcsr checkpoint: duplicate tensor '" + name + "'");
    }
    if (tensor.dims() != it->second->value.dims()) {
      throw FormatError("pcsr checkpoint: tensor '" + name + "' has dims " +
                        ShapeToString(tensor.dims()) + ", expected " +
                        ShapeToString(it->second->value.dims()));
    }
    it->second->value = tensor;
  }
  if (seen.size() != by_name.size()) {
    for (const auto& [name, param] : by_name) {
      if (!seen.count(name)) {
        throw FormatError("pcsr checkpoint: missing tensor '" + name +
                          "'; expected names: " + expected_list);
      }
    }
  }
  return p;
}

void SavePcsrCheckpoint(const PcsrParams& params, const std::string& path) {
  WriteCheckpointFile(path, PcsrToNamed(params));
}

PcsrParams LoadPcsrCheckpoint(const std::string& path, const PcsrConfig& config,
                              int d_model, int n_layers) {
  return PcsrFromNamed(ReadCheckpointFile(path), config, d_model, n_layers);
}

// --- ops -------------------------------------------------------------------

template <typename T>
Var<T> DsnFeatures(const Var<T>& patches, PcsrLayerParams<T>& layer) {
  if (patches.value().rank() != 3) {
    throw ShapeError("dsn_features: expected [B, N, d] patches, got " +
                     ShapeToString(patches.dims()));
  }
  auto& tape = *patches.tape();
  return ad::Linear(patches, tape.Parameter(layer.dsn_weight),
                    tape.Parameter(layer.dsn_bias));
}

template <typename T>
Var<T> DomainToken(const Var<T>& features, Aggregation aggregation) {
  if (!features.valid() || features.value().rank() != 3) {
    throw ContractError("domain_token: expected [B, N, d] features with N >= 1");
  }
  return aggregation == Aggregation::kAvg ? ad::MeanAxis(features, 1)
                                          : ad::MaxAxis(features, 1);
}

template <typename T>
Var<T> SimilarityMatrix(const Var<T>& features, std::int64_t* degenerate) {
  return ad::CosineSimilarity(features, degenerate);
}

template <typename T>
Var<T> SimilarityLoss(std::span<const Var<T>> matrices) {
  if (matrices.empty()) throw ContractError("similarity_loss: no layers");
  Var<T> total;
  for (const auto& m : matrices) {
    if (m.value().rank() != 3 || m.dim(1) != m.dim(2)) {
      throw ShapeError("similarity_loss: expected [B, N, N], got " +
                       ShapeToString(m.dims()));
    }
    auto layer_mean = ad::Mean(m);
    total = total.valid() ? ad::Add(total, layer_mean) : layer_mean;
  }
  return ad::MulScalar(total, static_cast<T>(-1.0 / static_cast<double>(matrices.size())));
}

template <typename T>
Var<T> ConditioningInput(Conditioning mode, const Var<T>& domain,
                         const Var<T>& cls, const Var<T>& patches) {
  switch (mode) {
    case Conditioning::kBoth:
      return ad::Add(domain, cls);
    case Conditioning::kClassOnly:
      return cls;
    case Conditioning::kDomainOnly:
      return domain;
    case Conditioning::kMeanToken:
      return ad::MeanAxis(patches, 1);
  }
  throw ConfigError("conditioning: unknown mode");
}

template <typename T>
Factors<T> GenerateFactors(const Var<T>& condition, PcsrLayerParams<T>& layer,
                           FactorSharing sharing) {
  if (condition.value().rank() != 2) {
    throw ShapeError("generate_factors: expected [B, d] condition, got " +
                     ShapeToString(condition.dims()));
  }
  const auto d = condition.dim(1);
  const auto width = FactorWidth(sharing, static_cast<int>(d));
  if (layer.fgn_weight.value.dims() != Shape{d, width}) {
    throw ShapeError("generate_factors: factor generator weight " +
                     ShapeToString(layer.fgn_weight.value.dims()) +
                     " does not match condition width " + std::to_string(d) +
                     " and sharing '" + ToString(sharing) + "'");
  }
  auto& tape = *condition.tape();
  auto out = ad::Linear(condition, tape.Parameter(layer.fgn_weight),
                        tape.Parameter(layer.fgn_bias));
  Factors<T> f;
  f.gamma_q = ad::Slice(out, 1, 0, d);
  f.beta_q = ad::Slice(out, 1, d, d);
  if (sharing == FactorSharing::kShared) {
    f.gamma_k = f.gamma_v = f.gamma_q;
    f.beta_k = f.beta_v = f.beta_q;
  } else {
    f.gamma_k = ad::Slice(out, 1, 2 * d, d);
    f.beta_k = ad::Slice(out, 1, 3 * d, d);
    f.gamma_v = ad::Slice(out, 1, 4 * d, d);
    f.beta_v = ad::Slice(out, 1, 5 * d, d);
  }
  return f;
}

template <typename T>
Qkv<T> RecalibrateQkv(const Qkv<T>& qkv, const Factors<T>& f) {
  return {ad::ScaleShift(qkv.q, f.gamma_q, f.beta_q),
          ad::ScaleShift(qkv.k, f.gamma_k, f.beta_k),
          ad::ScaleShift(qkv.v, f.gamma_v, f.beta_v)};
}

template <typename T>
Var<T> RecalibratedAttention(const Qkv<T>& qkv, int n_heads, Var<T>* probs) {
  const auto& dims = qkv.q.dims();
  if (dims.size() != 3) {
    throw ShapeError("attention: expected [B, T, d], got " + ShapeToString(dims));
  }
  CheckSameShape(qkv.k.dims(), dims, "attention key");
  CheckSameShape(qkv.v.dims(), dims, "attention value");
  const auto B = dims[0], Tn = dims[1], d = dims[2];
  if (n_heads <= 0 || d % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::int64_t dh = d / n_heads;
  auto split = [&](const Var<T>& x) {
    return ad::Reshape(ad::Permute0213(ad::Reshape(x, {B, Tn, n_heads, dh})),
                       {B * n_heads, Tn, dh});
  };
  auto q = split(qkv.q), k = split(qkv.k), v = split(qkv.v);
  auto scores = ad::MulScalar(ad::BatchMatMul(q, k, /*transpose_b=*/true),
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto weights = ad::Softmax(scores, -1);
  if (probs) *probs = weights;
  auto out = ad::BatchMatMul(weights, v);
  return ad::Reshape(ad::Permute0213(ad::Reshape(out, {B, n_heads, Tn, dh})),
                     {B, Tn, d});
}

#define PCSR_INSTANTIATE(T)                                                    \
  template struct BasicPcsrParams<T>;                                          \
  template BasicPcsrParams<T> InitPcsr<T>(const PcsrConfig&, int, int,         \
                                          std::uint64_t);                      \
  template Var<T> DsnFeatures(const Var<T>&, PcsrLayerParams<T>&);             \
  template Var<T> DomainToken(const Var<T>&, Aggregation);                     \
  template Var<T> SimilarityMatrix(const Var<T>&, std::int64_t*);              \
  template Var<T> SimilarityLoss(std::span<const Var<T>>);                     \
  template Var<T> ConditioningInput(Conditioning, const Var<T>&,               \
                                    const Var<T>&, const Var<T>&);             \
  template Factors<T> GenerateFactors(const Var<T>&, PcsrLayerParams<T>&,      \
                                      FactorSharing);                          \
  template Qkv<T> RecalibrateQkv(const Qkv<T>&, const Factors<T>&);            \
  template Var<T> RecalibratedAttention(const Qkv<T>&, int, Var<T>*);

PCSR_INSTANTIATE(float)
PCSR_INSTANTIATE(double)

#undef PCSR_INSTANTIATE

}  // namespace pcsr
