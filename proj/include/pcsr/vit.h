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

// Small pre-LN Vision Transformer with optional attention recalibration.
//
// Checkpoint tensor names (weights stored [in, out]):
//   config                      [7] image_size, patch_size, d_model, n_layers,
//                                   n_heads, mlp_ratio, n_classes
//   patch_embed.weight          [3 * P * P, d]
//   patch_embed.bias            [d]
//   cls_token                   [d]
//   pos_embed                   [N + 1, d]
//   blocks.{l}.ln1.weight/bias  [d]
//   blocks.{l}.attn.qkv.weight  [d, 3d]    (columns: q | k | v)
//   blocks.{l}.attn.qkv.bias    [3d]
//   blocks.{l}.attn.proj.weight [d, d]
//   blocks.{l}.attn.proj.bias   [d]
//   blocks.{l}.ln2.weight/bias  [d]
//   blocks.{l}.mlp.fc1.weight   [d, hidden]
//   blocks.{l}.mlp.fc1.bias     [hidden]
//   blocks.{l}.mlp.fc2.weight   [hidden, d]
//   blocks.{l}.mlp.fc2.bias     [d]
//   norm.weight/bias            [d]
//   head.weight                 [d, C]
//   head.bias                   [C]
//
// Patch vectors are laid out channel-major within a patch (c, y, x), and
// patches in row-major grid order.

#ifndef PCSR_VIT_H_
#define PCSR_VIT_H_

#include <cstdint>
#include <string>
#include <vector>

#include "pcsr/autodiff.h"
#include "pcsr/optim.h"
#include "pcsr/recalibration.h"
#include "pcsr/tensor.h"
#include "pcsr/tensor_io.h"

namespace pcsr {

struct VitConfig {
  int image_size = 32;
  int patch_size = 8;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  double mlp_ratio = 4.0;
  int n_classes = 8;

  void Validate() const;
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int num_tokens() const { return num_patches() + 1; }
  int head_dim() const { return d_model / n_heads; }
  int mlp_hidden() const;
  int patch_dim() const { return 3 * patch_size * patch_size; }

  friend bool operator==(const VitConfig&, const VitConfig&) = default;
};

inline constexpr float kLayerNormEps = 1e-6f;

template <typename T>
struct VitBlockParams {
  BasicParam<T> ln1_weight, ln1_bias;
  BasicParam<T> qkv_weight, qkv_bias;
  BasicParam<T> proj_weight, proj_bias;
  BasicParam<T> ln2_weight, ln2_bias;
  BasicParam<T> fc1_weight, fc1_bias;
  BasicParam<T> fc2_weight, fc2_bias;
};

template <typename T>
struct BasicVitParams {
  VitConfig config;
  BasicParam<T> patch_weight, patch_bias;
  BasicParam<T> cls_token, pos_embed;
  std::vector<VitBlockParams<T>> blocks;
  BasicParam<T> norm_weight, norm_bias;
  BasicParam<T> head_weight, head_bias;

  NamedParamRefs<T> Named();
  // Affine parameters of every LayerNorm, final norm included.
  std::vector<BasicParam<T>*> NormParams();
  void SetTrainable(bool trainable);
  std::int64_t NumParameters();

  template <typename U>
  BasicVitParams<U> Cast() const;
};

using VitParams = BasicVitParams<float>;

// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm scales.
template <typename T = float>
BasicVitParams<T> InitVit(const VitConfig& config, std::uint64_t seed);

NamedTensors VitToNamed(const VitParams& params);
VitParams VitFromNamed(const NamedTensors& entries);
void SaveVitCheckpoint(const VitParams& params, const std::string& path);
VitParams LoadVitCheckpoint(const std::string& path);

// Tokens entering layer l, before its first LayerNorm.
template <typename T>
struct LayerTokens {
  Var<T> cls;      // [B, d]
  Var<T> patches;  // [B, N, d]
};

template <typename T>
struct ForwardOutput {
  Var<T> logits;                          // [B, C]
  std::vector<LayerTokens<T>> tokens;     // per layer
  std::vector<Var<T>> attention;          // per layer, [B * H, T, T]
  // Present only when recalibration is active.
  std::vector<Var<T>> domain_tokens;      // per layer, [B, d]
  std::vector<Var<T>> similarity;         // per layer, [B, N, N]
  std::int64_t degenerate_features = 0;
};

// images [B, 3, S, S] -> patch vectors [B, N, 3 * P * P].
template <typename T>
BasicTensor<T> Patchify(const BasicTensor<T>& images, const VitConfig& config);

// images -> tokens [B, N + 1, d] with class token and positions added.
template <typename T>
Var<T> PatchEmbed(Tape<T>& tape, const BasicTensor<T>& images,
                  BasicVitParams<T>& vit);

// Full forward. With `pcsr` null this is the plain source model.
template <typename T>
ForwardOutput<T> Forward(Tape<T>& tape, const BasicTensor<T>& images,
                         BasicVitParams<T>& vit, BasicPcsrParams<T>* pcsr);

// Forward from already-extracted patch vectors [B, N, 3 * P * P].
template <typename T>
ForwardOutput<T> ForwardPatches(Tape<T>& tape,
                                const BasicTensor<T>& patch_vectors,
                                BasicVitParams<T>& vit,
                                BasicPcsrParams<T>* pcsr);

// Row-wise argmax, first index on ties.
std::vector<int> Argmax(const Tensor& logits);

// Source-model predictions, evaluated in batches without gradients.
std::vector<int> Predict(VitParams& vit, const Tensor& images,
                         int batch_size = 256);
double Accuracy(std::span<const int> predictions, std::span<const int> labels);

struct TrainOptions {
  int epochs = 12;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  // Reported as reached_target = false when the held-out accuracy is lower.
  double min_clean_accuracy = 0.0;
};

struct TrainResult {
  VitParams params;
  double clean_accuracy = 0;
  bool reached_target = false;
  std::vector<double> epoch_loss;
};

// Cross-entropy training on normalized images with AdamW and a cosine
// schedule, deterministic in `options.seed`.
TrainResult TrainSource(const VitConfig& config, const Tensor& train_images,
                        std::span<const int> train_labels,
                        const Tensor& eval_images,
                        std::span<const int> eval_labels,
                        const TrainOptions& options);

extern template struct BasicVitParams<float>;
extern template struct BasicVitParams<double>;

}  // namespace pcsr

#endif  // PCSR_VIT_H_
