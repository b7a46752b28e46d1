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

#include "pcsr/vit.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "pcsr/error.h"
#include "pcsr/random.h"

namespace pcsr {

void VitConfig::Validate() const {
  if (image_size <= 0 || patch_size <= 0 || d_model <= 0 || n_layers <= 0 ||
      n_heads <= 0 || n_classes <= 0 || !(mlp_ratio > 0)) {
    throw ConfigError("vit config: all sizes must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("vit config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (mlp_hidden() <= 0) throw ConfigError("vit config: mlp hidden width is 0");
}

int VitConfig::mlp_hidden() const {
  return static_cast<int>(std::lround(mlp_ratio * d_model));
}

// --- parameters ------------------------------------------------------------

template <typename T>
NamedParamRefs<T> BasicVitParams<T>::Named() {
  NamedParamRefs<T> out = {{"patch_embed.weight", &patch_weight},
                           {"patch_embed.bias", &patch_bias},
                           {"cls_token", &cls_token},
                           {"pos_embed", &pos_embed}};
  for (size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    auto& b = blocks[l];
    out.emplace_back(p + "ln1.weight", &b.ln1_weight);
    out.emplace_back(p + "ln1.bias", &b.ln1_bias);
    out.emplace_back(p + "attn.qkv.weight", &b.qkv_weight);
    out.emplace_back(p + "attn.qkv.bias", &b.qkv_bias);
    out.emplace_back(p + "attn.proj.weight", &b.proj_weight);
    out.emplace_back(p + "attn.proj.bias", &b.proj_bias);
    out.emplace_back(p + "ln2.weight", &b.ln2_weight);
    out.emplace_back(p + "ln2.bias", &b.ln2_bias);
    out.emplace_back(p + "mlp.fc1.weight", &b.fc1_weight);
    out.emplace_back(p + "mlp.fc1.bias", &b.fc1_bias);
    out.emplace_back(p + "mlp.fc2.weight", &b.fc2_weight);
    out.emplace_back(p + "mlp.fc2.bias", &b.fc2_bias);
  }
  out.emplace_back("norm.weight", &norm_weight);
  out.emplace_back("norm.bias", &norm_bias);
  out.emplace_back("head.weight", &head_weight);
  out.emplace_back("head.bias", &head_bias);
  return out;
}

template <typename T>
std::vector<BasicParam<T>*> BasicVitParams<T>::NormParams() {
  std::vector<BasicParam<T>*> out;
  for (auto& b : blocks) {
    out.insert(out.end(), {&b.ln1_weight, &b.ln1_bias, &b.ln2_weight, &b.ln2_bias});
  }
  out.insert(out.end(), {&norm_weight, &norm_bias});
  return out;
}

template <typename T>
void BasicVitParams<T>::SetTrainable(bool trainable) {
  for (auto& [name, p] : Named()) p->requires_grad = trainable;
}

template <typename T>
std::int64_t BasicVitParams<T>::NumParameters() {
  std::int64_t n = 0;
  for (auto& [name, p] : Named()) n += p->value.numel();
  return n;
}

template <typename T>
template <typename U>
BasicVitParams<U> BasicVitParams<T>::Cast() const {
  BasicVitParams<U> out;
  out.config = config;
  auto& src = const_cast<BasicVitParams<T>&>(*this);
  const auto from = src.Named();
  out.blocks.resize(blocks.size());
  const auto to = out.Named();
  for (size_t i = 0; i < from.size(); ++i) {
    *to[i].second = from[i].second->template Cast<U>();
  }
  return out;
}

template <typename T>
BasicVitParams<T> InitVit(const VitConfig& config, std::uint64_t seed) {
  config.Validate();
  const std::int64_t d = config.d_model;
  const std::int64_t hidden = config.mlp_hidden();
  SplitMix64 rng(seed);
  auto trunc_normal = [&](Shape dims) {
    BasicTensor<T> t(std::move(dims));
    for (auto& v : t.data()) {
      double x;
      do {
        x = rng.Normal();
      } while (std::abs(x) > 2.0);
      v = static_cast<T>(0.02 * x);
    }
    return BasicParam<T>(std::move(t));
  };
  auto zeros = [](Shape dims) { return BasicParam<T>(BasicTensor<T>(std::move(dims))); };
  auto ones = [](Shape dims) {
    return BasicParam<T>(BasicTensor<T>::Full(std::move(dims), T(1)));
  };

  BasicVitParams<T> p;
  p.config = config;
  p.patch_weight = trunc_normal({config.patch_dim(), d});
  p.patch_bias = zeros({d});
  p.cls_token = trunc_normal({d});
  p.pos_embed = trunc_normal({config.num_tokens(), d});
  for (int l = 0; l < config.n_layers; ++l) {
    VitBlockParams<T> b;
    b.ln1_weight = ones({d});
    b.ln1_bias = zeros({d});
    b.qkv_weight = trunc_normal({d, 3 * d});
    b.qkv_bias = zeros({3 * d});
    b.proj_weight = trunc_normal({d, d});
    b.proj_bias = zeros({d});
    b.ln2_weight = ones({d});
    b.ln2_bias = zeros({d});
    b.fc1_weight = trunc_normal({d, hidden});
    b.fc1_bias = zeros({hidden});
    b.fc2_weight = trunc_normal({hidden, d});
    b.fc2_bias = zeros({d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_weight = ones({d});
  p.norm_bias = zeros({d});
  p.head_weight = trunc_normal({d, config.n_classes});
  p.head_bias = zeros({config.n_classes});
  return p;
}

namespace {

constexpr const char* kConfigEntry = "config";

Tensor ConfigTensor(const VitConfig& c) {
  return Tensor({7}, {static_cast<float>(c.image_size), static_cast<float>(c.patch_size),
                      static_cast<float>(c.d_model), static_cast<float>(c.n_layers),
                      static_cast<float>(c.n_heads), static_cast<float>(c.mlp_ratio),
                      static_cast<float>(c.n_classes)});
}

VitConfig ConfigFromTensor(const Tensor& t) {
  if (t.dims() != Shape{7}) {
    throw FormatError("vit checkpoint: 'config' entry must have dims [7], got " +
                      ShapeToString(t.dims()));
  }
  VitConfig c;
  c.image_size = static_cast<int>(t[0]);
  c.patch_size = static_cast<int>(t[1]);
  c.d_model = static_cast<int>(t[2]);
  c.n_layers = static_cast<int>(t[3]);
  c.n_heads = static_cast<int>(t[4]);
  c.mlp_ratio = t[5];
  c.n_classes = static_cast<int>(t[6]);
  try {
    c.Validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("vit checkpoint: invalid config entry: ") + e.what());
  }
  return c;
}

}  // namespace

NamedTensors VitToNamed(const VitParams& params) {
  NamedTensors out;
  out.emplace_back(kConfigEntry, ConfigTensor(params.config));
  auto& src = const_cast<VitParams&>(params);
  for (auto& [name, p] : src.Named()) out.emplace_back(name, p->value);
  return out;
}

VitParams VitFromNamed(const NamedTensors& entries) {
  const Tensor* config = nullptr;
  for (const auto& [name, t] : entries) {
    if (name == kConfigEntry) config = &t;
  }
  if (!config) throw FormatError("vit checkpoint: missing 'config' entry");
  VitParams p = InitVit<float>(ConfigFromTensor(*config), 0);
  std::map<std::string, Param*> by_name;
  std::string expected = kConfigEntry;
  for (auto& [name, param] : p.Named()) {
    by_name[name] = param;
    expected += ", " + name;
  }
  std::set<std::string> seen;
  for (const auto& [name, t] : entries) {
    if (name == kConfigEntry) continue;
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("vit checkpoint: unknown tensor '" + name +
                        "'; expected names: " + expected);
    }
    if (!seen.insert(name).second) {
      throw FormatError("vit checkpoint: duplicate tensor '" + name + "'");
    }
    if (t.dims() != it->second->value.dims()) {
      throw FormatError("vit checkpoint: tensor '" + name + "' has dims " +
                        ShapeToString(t.dims()) + ", expected " +
                        ShapeToString(it->second->value.dims()));
    }
    it->second->value = t;
  }
  for (const auto& [name, param] : by_name) {
    if (!seen.count(name)) {
      throw FormatError("vit checkpoint: missing tensor '" + name +
                        "'; expected names: " + expected);
    }
  }
  return p;
}

void SaveVitCheckpoint(const VitParams& params, const std::string& path) {
  WriteCheckpointFile(path, VitToNamed(params));
}

VitParams LoadVitCheckpoint(const std::string& path) {
  return VitFromNamed(ReadCheckpointFile(path));
}

// --- forward ---------------------------------------------------------------

template <typename T>
BasicTensor<T> Patchify(const BasicTensor<T>& images, const VitConfig& config) {
  const std::int64_t S = config.image_size, P = config.patch_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != S ||
      images.dim(3) != S) {
    throw ShapeError("patch_embed: expected images [B, 3, " + std::to_string(S) +
                     ", " + std::to_string(S) + "], got " +
                     ShapeToString(images.dims()));
  }
  const std::int64_t B = images.dim(0), G = S / P, N = G * G, D = 3 * P * P;
  BasicTensor<T> out({B, N, D});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t gy = 0; gy < G; ++gy)
      for (std::int64_t gx = 0; gx < G; ++gx) {
        T* dst = out.raw() + (b * N + gy * G + gx) * D;
        for (std::int64_t c = 0; c < 3; ++c)
          for (std::int64_t y = 0; y < P; ++y)
            for (std::int64_t x = 0; x < P; ++x)
              *dst++ = images.raw()[((b * 3 + c) * S + gy * P + y) * S + gx * P + x];
      }
  return out;
}

namespace {

template <typename T>
Var<T> EmbedPatchVectors(Tape<T>& tape, const BasicTensor<T>& patch_vectors,
                         BasicVitParams<T>& vit) {
  const auto& c = vit.config;
  if (patch_vectors.rank() != 3 || patch_vectors.dim(1) != c.num_patches() ||
      patch_vectors.dim(2) != c.patch_dim()) {
    throw ShapeError("patch_embed: patch vectors " +
                     ShapeToString(patch_vectors.dims()) + " do not match config");
  }
  auto x = ad::Linear(tape.Constant(patch_vectors), tape.Parameter(vit.patch_weight),
                      tape.Parameter(vit.patch_bias));
  x = ad::PrependToken(x, tape.Parameter(vit.cls_token));
  return ad::AddBroadcast(x, tape.Parameter(vit.pos_embed));
}

template <typename T>
ForwardOutput<T> RunBlocks(Tape<T>& tape, Var<T> x, BasicVitParams<T>& vit,
                           BasicPcsrParams<T>* pcsr) {
  const auto& c = vit.config;
  c.Validate();
  if (pcsr) {
    if (pcsr->d_model != c.d_model || pcsr->n_layers != c.n_layers) {
      throw ConfigError("forward: recalibration params built for d=" +
                        std::to_string(pcsr->d_model) + ", L=" +
                        std::to_string(pcsr->n_layers) + " but model has d=" +
                        std::to_string(c.d_model) + ", L=" +
                        std::to_string(c.n_layers));
    }
  }
  const std::int64_t B = x.dim(0), N = c.num_patches(), d = c.d_model;
  const T eps = static_cast<T>(kLayerNormEps);
  ForwardOutput<T> out;
  for (int l = 0; l < c.n_layers; ++l) {
    auto& blk = vit.blocks[static_cast<size_t>(l)];
    LayerTokens<T> tokens{ad::Reshape(ad::Slice(x, 1, 0, 1), {B, d}),
                          ad::Slice(x, 1, 1, N)};
    out.tokens.push_back(tokens);

    auto h = ad::LayerNorm(x, tape.Parameter(blk.ln1_weight),
                           tape.Parameter(blk.ln1_bias), eps);
    auto qkv = ad::Linear(h, tape.Parameter(blk.qkv_weight),
                          tape.Parameter(blk.qkv_bias));
    Qkv<T> parts{ad::Slice(qkv, -1, 0, d), ad::Slice(qkv, -1, d, d),
                 ad::Slice(qkv, -1, 2 * d, d)};
    if (pcsr) {
      auto& layer = pcsr->ForLayer(l);
      auto features = DsnFeatures(tokens.patches, layer);
      out.similarity.push_back(SimilarityMatrix(features, &out.degenerate_features));
      auto domain = DomainToken(features, pcsr->config.aggregation);
      out.domain_tokens.push_back(domain);
      auto cond = ConditioningInput(pcsr->config.conditioning, domain, tokens.cls,
                                    tokens.patches);
      parts = RecalibrateQkv(parts, GenerateFactors(cond, layer,
                                                    pcsr->config.factor_sharing));
    }
    Var<T> probs;
    auto attn = RecalibratedAttention(parts, c.n_heads, &probs);
    out.attention.push_back(probs);
    x = ad::Add(x, ad::Linear(attn, tape.Parameter(blk.proj_weight),
                              tape.Parameter(blk.proj_bias)));

    auto h2 = ad::LayerNorm(x, tape.Parameter(blk.ln2_weight),
                            tape.Parameter(blk.ln2_bias), eps);
    auto m = ad::Gelu(ad::Linear(h2, tape.Parameter(blk.fc1_weight),
                                 tape.Parameter(blk.fc1_bias)));
    x = ad::Add(x, ad::Linear(m, tape.Parameter(blk.fc2_weight),
                              tape.Parameter(blk.fc2_bias)));
  }
  auto cls = ad::Reshape(ad::Slice(x, 1, 0, 1), {B, d});
  cls = ad::LayerNorm(cls, tape.Parameter(vit.norm_weight),
                      tape.Parameter(vit.norm_bias), eps);
  out.logits = ad::Linear(cls, tape.Parameter(vit.head_weight),
                          tape.Parameter(vit.head_bias));
  return out;
}

}  // namespace

template <typename T>
Var<T> PatchEmbed(Tape<T>& tape, const BasicTensor<T>& images,
                  BasicVitParams<T>& vit) {
  return EmbedPatchVectors(tape, Patchify(images, vit.config), vit);
}

template <typename T>
ForwardOutput<T> Forward(Tape<T>& tape, const BasicTensor<T>& images,
                         BasicVitParams<T>& vit, BasicPcsrParams<T>* pcsr) {
  return RunBlocks(tape, PatchEmbed(tape, images, vit), vit, pcsr);
}

template <typename T>
ForwardOutput<T> ForwardPatches(Tape<T>& tape,
                                const BasicTensor<T>& patch_vectors,
                                BasicVitParams<T>& vit,
                                BasicPcsrParams<T>* pcsr) {
  return RunBlocks(tape, EmbedPatchVectors(tape, patch_vectors, vit), vit, pcsr);
}

std::vector<int> Argmax(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("argmax: expected [B, C], got " + ShapeToString(logits.dims()));
  }
  const auto B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    const float* row = logits.raw() + b * C;
    out[static_cast<size_t>(b)] =
        static_cast<int>(std::max_element(row, row + C) - row);
  }
  return out;
}

namespace {

Tensor SliceBatch(const Tensor& images, std::int64_t start, std::int64_t count) {
  Shape dims = images.dims();
  const std::int64_t per = images.numel() / dims[0];
  dims[0] = count;
  std::vector<float> data(images.raw() + start * per,
                          images.raw() + (start + count) * per);
  return Tensor(std::move(dims), std::move(data));
}

Tensor GatherBatch(const Tensor& images, std::span<const std::int64_t> rows) {
  Shape dims = images.dims();
  const std::int64_t per = images.numel() / dims[0];
  dims[0] = static_cast<std::int64_t>(rows.size());
  Tensor out(dims);
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(images.raw() + rows[i] * per, per,
                out.raw() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

}  // namespace

std::vector<int> Predict(VitParams& vit, const Tensor& images, int batch_size) {
  std::vector<int> out;
  const auto n = images.dim(0);
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const auto count = std::min<std::int64_t>(batch_size, n - start);
    Tape<float> tape(GradMode::kDisabled);
    auto fwd = Forward(tape, SliceBatch(images, start, count), vit,
                       static_cast<PcsrParams*>(nullptr));
    auto preds = Argmax(fwd.logits.value());
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

double Accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw ContractError("accuracy: prediction/label count mismatch");
  }
  if (labels.empty()) return 0.0;
  std::int64_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

TrainResult TrainSource(const VitConfig& config, const Tensor& train_images,
                        std::span<const int> train_labels,
                        const Tensor& eval_images,
                        std::span<const int> eval_labels,
                        const TrainOptions& options) {
  config.Validate();
  if (train_images.dim(0) != static_cast<std::int64_t>(train_labels.size())) {
    throw ContractError("train_source: image/label count mismatch");
  }
  if (options.epochs < 0 || options.batch_size <= 0) {
    throw ConfigError("train_source: epochs must be >= 0 and batch_size > 0");
  }
  TrainResult result;
  result.params = InitVit<float>(config, options.seed);
  auto& params = result.params;
  params.SetTrainable(true);
  auto named = params.Named();

  // AdamW state.
  std::vector<std::vector<float>> m1, m2;
  for (auto& [name, p] : named) {
    m1.emplace_back(static_cast<size_t>(p->value.numel()), 0.0f);
    m2.emplace_back(static_cast<size_t>(p->value.numel()), 0.0f);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  const auto n = train_images.dim(0);
  const std::int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  const std::int64_t total_steps = steps_per_epoch * options.epochs;
  const std::int64_t warmup = std::min<std::int64_t>(steps_per_epoch, total_steps / 10);
  std::int64_t step = 0;
  SplitMix64 shuffle_rng(options.seed ^ 0x5eedf00dULL);
  std::vector<std::int64_t> order(static_cast<size_t>(n));

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Shuffle(order, shuffle_rng);
    double epoch_loss = 0;
    for (std::int64_t start = 0; start < n; start += options.batch_size) {
      const auto count = std::min<std::int64_t>(options.batch_size, n - start);
      std::span<const std::int64_t> rows(order.data() + start, static_cast<size_t>(count));
      std::vector<int> labels;
      for (auto r : rows) labels.push_back(train_labels[static_cast<size_t>(r)]);
      Tape<float> tape;
      auto fwd = Forward(tape, GatherBatch(train_images, rows), params,
                         static_cast<PcsrParams*>(nullptr));
      auto loss = ad::CrossEntropy(fwd.logits, std::span<const int>(labels),
                                   options.label_smoothing);
      epoch_loss += loss.value().item() * static_cast<double>(count);
      tape.Backward(loss);

      ++step;
      double lr = options.lr;
      if (step <= warmup) {
        lr *= static_cast<double>(step) / static_cast<double>(warmup);
      } else {
        const double progress = static_cast<double>(step - warmup) /
                                static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      }
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (size_t k = 0; k < named.size(); ++k) {
        auto& p = *named[k].second;
        const bool decay = p.value.rank() == 2 && named[k].first != "pos_embed";
        auto v = p.value.data();
        auto g = p.grad->data();
        for (size_t i = 0; i < v.size(); ++i) {
          m1[k][i] = static_cast<float>(kBeta1 * m1[k][i] + (1 - kBeta1) * g[i]);
          m2[k][i] = static_cast<float>(kBeta2 * m2[k][i] + (1 - kBeta2) * g[i] * g[i]);
          const double update = (m1[k][i] / bc1) / (std::sqrt(m2[k][i] / bc2) + kAdamEps);
          double nv = v[i] - lr * update;
          if (decay) nv -= lr * options.weight_decay * v[i];
          v[i] = static_cast<float>(nv);
        }
        p.grad.reset();
      }
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(n));
  }
  params.SetTrainable(false);
  if (eval_images.numel() > 0 && !eval_labels.empty()) {
    const auto preds = Predict(params, eval_images);
    result.clean_accuracy = Accuracy(preds, eval_labels);
  }
  result.reached_target = result.clean_accuracy >= options.min_clean_accuracy;
  return result;
}

template struct BasicVitParams<float>;
template struct BasicVitParams<double>;
template BasicVitParams<double> BasicVitParams<float>::Cast<double>() const;
template BasicVitParams<float> BasicVitParams<double>::Cast<float>() const;
template BasicVitParams<float> InitVit<float>(const VitConfig&, std::uint64_t);
template BasicVitParams<double> InitVit<double>(const VitConfig&, std::uint64_t);
template Tensor Patchify(const Tensor&, const VitConfig&);
template BasicTensor<double> Patchify(const BasicTensor<double>&, const VitConfig&);
template Var<float> PatchEmbed(Tape<float>&, const Tensor&, VitParams&);
template Var<double> PatchEmbed(Tape<double>&, const BasicTensor<double>&,
                                BasicVitParams<double>&);
template ForwardOutput<float> Forward(Tape<float>&, const Tensor&, VitParams&,
                                      PcsrParams*);
template ForwardOutput<double> Forward(Tape<double>&, const BasicTensor<double>&,
                                       BasicVitParams<double>&,
                                       BasicPcsrParams<double>*);
template ForwardOutput<float> ForwardPatches(Tape<float>&, const Tensor&,
                                             VitParams&, PcsrParams*);
template ForwardOutput<double> ForwardPatches(Tape<double>&,
                                              const BasicTensor<double>&,
                                              BasicVitParams<double>&,
                                              BasicPcsrParams<double>*);

}  // namespace pcsr
