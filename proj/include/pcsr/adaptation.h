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

// Online test-time adaptation over a stream of unlabeled batches.
//
// Per batch, the pcsr method minimizes
//   L = L_e + lambda * L_s
//   L_e    = (1/B) sum_i I_i * E_i,   I_i = [E_i < E0],  E0 = e0_coeff * ln C
//   lambda = (sum_i I_i) / B
// where E_i is the prediction entropy and L_s the similarity loss of the
// recalibration modules. Only the recalibration parameters move: one SGD
// step with separate rates for the token networks and the factor networks.
// tent_like runs the same loop on the LayerNorm affine parameters with
// L = L_e, and source never updates.

#ifndef PCSR_ADAPTATION_H_
#define PCSR_ADAPTATION_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcsr/autodiff.h"
#include "pcsr/data.h"
#include "pcsr/recalibration.h"
#include "pcsr/tensor.h"
#include "pcsr/vit.h"

namespace pcsr {

enum class Method { kPcsr, kTentLike, kSource };
enum class ResetPolicy { kPerDomain, kContinual };
enum class StepOrder { kAdaptThenPredict, kPredictThenAdapt };

std::string ToString(Method m);
std::string ToString(ResetPolicy r);
std::string ToString(StepOrder o);
Method ParseMethod(const std::string& s);
ResetPolicy ParseResetPolicy(const std::string& s);
StepOrder ParseStepOrder(const std::string& s);

struct AdaptConfig {
  Method method = Method::kPcsr;
  PcsrConfig pcsr;
  double lr_dsn = 0.2;
  double lr_fgn = 0.0005;
  // LayerNorm affine rate for tent_like.
  double lr_norm = 0.001;
  int batch_size = 64;
  double e0_coeff = 0.4;
  ResetPolicy reset = ResetPolicy::kPerDomain;
  StepOrder order = StepOrder::kAdaptThenPredict;
  std::uint64_t seed = 2022;

  void Validate() const;
  double EntropyThreshold(int n_classes) const;
};

struct LossBreakdown {
  double entropy_loss = 0;     // L_e
  double similarity_loss = 0;  // L_s
  double lambda = 0;
  std::vector<std::uint8_t> mask;
  double total = 0;            // L
  double entropy_mean = 0;     // unmasked batch mean of E_i

  std::int64_t batch_size() const { return static_cast<std::int64_t>(mask.size()); }
  std::int64_t reliable() const;
  // Share of the batch excluded by the entropy filter, 1 - lambda.
  double masked_fraction() const;
};

// Entropy in nats of each row of probs [B, C]. Rows must sum to 1 within
// 1e-4 (ContractError otherwise); 0 * ln 0 is taken as 0.
std::vector<double> Entropy(const Tensor& probs);
std::vector<double> Entropy(std::span<const double> probs, int n_classes);

// Row-wise softmax in double precision.
std::vector<double> SoftmaxRows(const Tensor& logits);

// Mask and L_e from per-sample entropies.
LossBreakdown ReliableEntropyLoss(std::span<const double> entropies, double e0);

// Fills lambda and total from the mask and L_s.
LossBreakdown CombinedLoss(LossBreakdown entropy_part, double similarity_loss);

template <typename T>
struct AdaptLoss {
  Var<T> total;
  LossBreakdown breakdown;
};

// Builds L on the tape from a forward pass. The mask is computed from the
// forward values and enters as a constant. Without recalibration outputs
// (tent_like) L_s is 0 and L = L_e.
template <typename T>
AdaptLoss<T> BuildAdaptLoss(const ForwardOutput<T>& out, double e0,
                            bool use_similarity);

struct StepResult {
  std::vector<int> predictions;
  LossBreakdown loss;
  bool skipped = false;
  std::string diagnostic;
  std::int64_t degenerate_features = 0;
  // Last-layer domain tokens [b, d] from the forward that produced the
  // predictions; empty unless the method is pcsr.
  Tensor domain_tokens;
};

// Owns working copies of the backbone and recalibration parameters.
class Adapter {
 public:
  Adapter(const VitParams& source, const AdaptConfig& config);
  // Starts from (and resets to) the given recalibration parameters.
  Adapter(const VitParams& source, const AdaptConfig& config,
          const PcsrParams& initial);

  // images: normalized [b, 3, S, S] with b <= batch_size.
  StepResult Step(const Tensor& images);
  void Reset();

  const AdaptConfig& config() const { return config_; }
  const VitParams& vit() const { return vit_; }
  const PcsrParams& pcsr() const { return pcsr_; }
  PcsrParams& mutable_pcsr() { return pcsr_; }
  VitParams& mutable_vit() { return vit_; }
  std::int64_t skipped_steps() const { return skipped_; }
  std::int64_t resets() const { return resets_; }

 private:
  void PredictCurrent(const Tensor& images, StepResult& result);
  static void TakeOutputs(const ForwardOutput<float>& out, StepResult& result);

  AdaptConfig config_;
  VitParams source_;
  VitParams vit_;
  PcsrParams initial_pcsr_;
  PcsrParams pcsr_;
  double e0_;
  std::int64_t skipped_ = 0;
  std::int64_t resets_ = 0;
};

struct StepRecord {
  std::int64_t step = 0;
  std::string domain;
  std::int64_t batch_size = 0;
  std::vector<std::int64_t> sample_ids;
  std::int64_t correct = 0;
  double batch_accuracy = 0;
  double cumulative_accuracy = 0;
  LossBreakdown loss;
  bool skipped = false;
};

struct DomainTally {
  std::int64_t correct = 0;
  std::int64_t total = 0;
  double accuracy() const {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
};

struct StreamMetrics {
  std::vector<StepRecord> steps;
  std::int64_t correct = 0;
  std::int64_t total = 0;
  std::vector<std::string> domain_order;
  std::map<std::string, DomainTally> per_domain;
  std::int64_t skipped_steps = 0;
  std::int64_t degenerate_features = 0;
  std::vector<std::string> diagnostics;

  double cumulative_accuracy() const {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
};

// Processes the stream once, in order. Under kPerDomain the adapter is
// reset whenever the batch domain differs from the previous batch.
using StepCallback =
    std::function<void(const StepRecord&, const StepResult&)>;
StreamMetrics RunStream(Stream& stream, Adapter& adapter,
                        const StepCallback& on_step = {});

// metrics.csv: step, domain, batch_accuracy, cumulative_accuracy, L_e, L_s,
// lambda, masked_fraction, L, batch_size.
std::string MetricsCsv(const StreamMetrics& metrics);
// losses.csv: step, domain, batch_size, reliable, entropy_mean, L_e, L_s,
// lambda, L, skipped.
std::string LossesCsv(const StreamMetrics& metrics);

}  // namespace pcsr

#endif  // PCSR_ADAPTATION_H_
