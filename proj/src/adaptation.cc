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

#include "pcsr/adaptation.h"

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>

#include "pcsr/error.h"
#include "pcsr/optim.h"

namespace pcsr {

std::string ToString(Method m) {
  switch (m) {
    case Method::kPcsr: return "pcsr";
    case Method::kTentLike: return "tent_like";
    case Method::kSource: return "source";
  }
  throw ConfigError("unknown method");
}

std::string ToString(ResetPolicy r) {
  return r == ResetPolicy::kPerDomain ? "per_domain" : "continual";
}

std::string ToString(StepOrder o) {
  return o == StepOrder::kAdaptThenPredict ? "adapt_then_predict"
                                           : "predict_then_adapt";
}

Method ParseMethod(const std::string& s) {
  if (s == "pcsr") return Method::kPcsr;
  if (s == "tent_like") return Method::kTentLike;
  if (s == "source") return Method::kSource;
  throw ConfigError("unknown method '" + s + "' (expected pcsr, tent_like or source)");
}

ResetPolicy ParseResetPolicy(const std::string& s) {
  if (s == "per_domain") return ResetPolicy::kPerDomain;
  if (s == "continual") return ResetPolicy::kContinual;
  throw ConfigError("unknown reset policy '" + s +
                    "' (expected per_domain or continual)");
}

StepOrder ParseStepOrder(const std::string& s) {
  if (s == "adapt_then_predict") return StepOrder::kAdaptThenPredict;
  if (s == "predict_then_adapt") return StepOrder::kPredictThenAdapt;
  throw ConfigError("unknown step order '" + s +
                    "' (expected adapt_then_predict or predict_then_adapt)");
}

void AdaptConfig::Validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(e0_coeff > 0) || !std::isfinite(e0_coeff)) {
    throw ConfigError("e0_coeff must be > 0");
  }
  for (auto [name, lr] : {std::pair{"lr_dsn", lr_dsn}, std::pair{"lr_fgn", lr_fgn},
                          std::pair{"lr_norm", lr_norm}}) {
    if (!(lr >= 0) || !std::isfinite(lr)) {
      throw ConfigError(std::string(name) + " must be a finite value >= 0");
    }
  }
}

double AdaptConfig::EntropyThreshold(int n_classes) const {
  if (n_classes < 2) throw ConfigError("need at least two classes");
  return e0_coeff * std::log(static_cast<double>(n_classes));
}

std::int64_t LossBreakdown::reliable() const {
  std::int64_t n = 0;
  for (auto m : mask) n += m;
  return n;
}

double LossBreakdown::masked_fraction() const {
  if (mask.empty()) return 0.0;
  return static_cast<double>(batch_size() - reliable()) /
         static_cast<double>(batch_size());
}

std::vector<double> Entropy(std::span<const double> probs, int n_classes) {
  if (n_classes < 1 || probs.size() % static_cast<size_t>(n_classes) != 0) {
    throw ShapeError("entropy: " + std::to_string(probs.size()) +
                     " values do not form rows of " + std::to_string(n_classes));
  }
  const size_t rows = probs.size() / static_cast<size_t>(n_classes);
  std::vector<double> out(rows, 0.0);
  for (size_t i = 0; i < rows; ++i) {
    double sum = 0, e = 0;
    for (int c = 0; c < n_classes; ++c) {
      const double p = probs[i * static_cast<size_t>(n_classes) + static_cast<size_t>(c)];
      if (!(p >= 0)) {
        throw ContractError("entropy: row " + std::to_string(i) +
                            " has a negative or NaN probability");
      }
      sum += p;
      if (p > 0) e -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-4) {
      std::ostringstream ss;
      ss << "entropy: row " << i << " sums to " << sum << ", not 1";
      throw ContractError(ss.str());
    }
    out[i] = e;
  }
  return out;
}

std::vector<double> Entropy(const Tensor& probs) {
  if (probs.rank() != 2) {
    throw ShapeError("entropy: expected [B, C], got " + ShapeToString(probs.dims()));
  }
  std::vector<double> p(probs.data().begin(), probs.data().end());
  return Entropy(p, static_cast<int>(probs.dim(1)));
}

std::vector<double> SoftmaxRows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax: expected [B, C], got " + ShapeToString(logits.dims()));
  }
  const auto rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i) {
    const float* row = logits.raw() + i * cols;
    double mx = row[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      z += out[static_cast<size_t>(i * cols + c)] = std::exp(row[c] - mx);
    }
    for (std::int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(i * cols + c)] /= z;
  }
  return out;
}

LossBreakdown ReliableEntropyLoss(std::span<const double> entropies, double e0) {
  if (!(e0 > 0)) throw ConfigError("entropy threshold must be > 0");
  LossBreakdown out;
  out.mask.resize(entropies.size());
  double sum = 0, all = 0;
  for (size_t i = 0; i < entropies.size(); ++i) {
    out.mask[i] = entropies[i] < e0 ? 1 : 0;
    if (out.mask[i]) sum += entropies[i];
    all += entropies[i];
  }
  const double n = static_cast<double>(entropies.size());
  out.entropy_loss = entropies.empty() ? 0.0 : sum / n;
  out.entropy_mean = entropies.empty() ? 0.0 : all / n;
  out.total = out.entropy_loss;
  return out;
}

LossBreakdown CombinedLoss(LossBreakdown part, double similarity_loss) {
  part.similarity_loss = similarity_loss;
  part.lambda = part.mask.empty() ? 0.0
                                  : static_cast<double>(part.reliable()) /
                                        static_cast<double>(part.batch_size());
  part.total = part.entropy_loss + part.lambda * similarity_loss;
  return part;
}

template <typename T>
AdaptLoss<T> BuildAdaptLoss(const ForwardOutput<T>& out, double e0,
                            bool use_similarity) {
  Var<T> entropy = ad::EntropyFromLogits(out.logits);
  const auto& ev = entropy.value();
  std::vector<double> e(ev.data().begin(), ev.data().end());
  LossBreakdown part = ReliableEntropyLoss(e, e0);
  Var<T> le = ad::MaskedMean(entropy, std::span<const std::uint8_t>(part.mask));

  AdaptLoss<T> result;
  if (use_similarity) {
    if (out.similarity.empty()) {
      throw ContractError("similarity loss requested without recalibration outputs");
    }
    Var<T> ls = SimilarityLoss<T>(out.similarity);
    result.breakdown = CombinedLoss(std::move(part), static_cast<double>(ls.value().item()));
    result.total = ad::Add(le, ad::MulScalar(ls, static_cast<T>(result.breakdown.lambda)));
  } else {
    result.breakdown = CombinedLoss(std::move(part), 0.0);
    result.total = le;
  }
  // L_e and L_s come from the tape; L is recombined from them in double.
  result.breakdown.entropy_loss = static_cast<double>(le.value().item());
  result.breakdown.total =
      result.breakdown.entropy_loss +
      result.breakdown.lambda * result.breakdown.similarity_loss;
  return result;
}

template AdaptLoss<float> BuildAdaptLoss(const ForwardOutput<float>&, double, bool);
template AdaptLoss<double> BuildAdaptLoss(const ForwardOutput<double>&, double, bool);

Adapter::Adapter(const VitParams& source, const AdaptConfig& config)
    : Adapter(source, config,
              InitPcsr<float>(config.pcsr, source.config.d_model,
                              source.config.n_layers, config.seed)) {}

Adapter::Adapter(const VitParams& source, const AdaptConfig& config,
                 const PcsrParams& initial)
    : config_(config), source_(source), initial_pcsr_(initial) {
  config_.Validate();
  if (initial.d_model != source.config.d_model ||
      initial.n_layers != source.config.n_layers) {
    throw ConfigError("recalibration parameters do not match the backbone");
  }
  if (initial.config != config_.pcsr) {
    throw ConfigError("recalibration parameters were built for a different "
                      "conditioning/sharing configuration");
  }
  e0_ = config_.EntropyThreshold(source.config.n_classes);
  Reset();
  resets_ = 0;
}

void Adapter::Reset() {
  vit_ = source_;
  pcsr_ = initial_pcsr_;
  vit_.SetTrainable(false);
  pcsr_.SetTrainable(false);
  if (config_.method == Method::kPcsr) {
    pcsr_.SetTrainable(true);
  } else if (config_.method == Method::kTentLike) {
    for (auto* p : vit_.NormParams()) p->requires_grad = true;
  }
  ++resets_;
}

void Adapter::TakeOutputs(const ForwardOutput<float>& out, StepResult& result) {
  result.predictions = Argmax(out.logits.value());
  if (!out.domain_tokens.empty()) result.domain_tokens = out.domain_tokens.back().value();
}

void Adapter::PredictCurrent(const Tensor& images, StepResult& result) {
  Tape<float> tape(GradMode::kDisabled);
  PcsrParams* pcsr = config_.method == Method::kPcsr ? &pcsr_ : nullptr;
  TakeOutputs(Forward(tape, images, vit_, pcsr), result);
}

StepResult Adapter::Step(const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) < 1) {
    throw ShapeError("adapt: expected a non-empty [b, 3, S, S] batch, got " +
                     ShapeToString(images.dims()));
  }
  if (images.dim(0) > config_.batch_size) {
    throw ConfigError("adapt: batch of " + std::to_string(images.dim(0)) +
                      " exceeds batch_size " + std::to_string(config_.batch_size));
  }
  StepResult result;
  if (config_.method == Method::kSource) {
    Tape<float> tape(GradMode::kDisabled);
    const auto out = Forward(tape, images, vit_, static_cast<PcsrParams*>(nullptr));
    const auto probs = SoftmaxRows(out.logits.value());
    const auto e = Entropy(probs, static_cast<int>(out.logits.value().dim(1)));
    result.loss = CombinedLoss(ReliableEntropyLoss(e, e0_), 0.0);
    result.predictions = Argmax(out.logits.value());
    return result;
  }

  const bool is_pcsr = config_.method == Method::kPcsr;
  std::vector<ParamGroup<float>> groups;
  if (is_pcsr) {
    groups.push_back({"dsn", static_cast<float>(config_.lr_dsn), pcsr_.DsnParams()});
    groups.push_back({"fgn", static_cast<float>(config_.lr_fgn), pcsr_.FgnParams()});
  } else {
    groups.push_back({"norm", static_cast<float>(config_.lr_norm), vit_.NormParams()});
  }

  Tape<float> tape;
  std::optional<ForwardOutput<float>> out;
  try {
    out = Forward(tape, images, vit_, is_pcsr ? &pcsr_ : nullptr);
  } catch (const NumericError& e) {
    // The current state cannot produce logits at all; leave it untouched
    // and answer with the unadapted backbone for this batch.
    result.skipped = true;
    result.diagnostic = e.what();
    ++skipped_;
    Tape<float> fallback(GradMode::kDisabled);
    result.predictions = Argmax(
        Forward(fallback, images, source_, static_cast<PcsrParams*>(nullptr)).logits.value());
    return result;
  }
  result.degenerate_features = out->degenerate_features;
  if (config_.order == StepOrder::kPredictThenAdapt) TakeOutputs(*out, result);
  const AdaptLoss<float> loss = BuildAdaptLoss(*out, e0_, is_pcsr);
  result.loss = loss.breakdown;

  if (!std::isfinite(loss.breakdown.total)) {
    result.skipped = true;
    result.diagnostic = "non-finite loss";
  } else {
    tape.Backward(loss.total);
    if (!GradientsFinite<float>(groups)) {
      result.skipped = true;
      result.diagnostic = "non-finite gradient";
    }
  }
  if (result.skipped) {
    ZeroGrad<float>(groups);
    ++skipped_;
  } else {
    SgdStep<float>(groups);
  }

  if (config_.order == StepOrder::kAdaptThenPredict) {
    if (result.skipped) {
      TakeOutputs(*out, result);
    } else {
      PredictCurrent(images, result);
    }
  }
  return result;
}

StreamMetrics RunStream(Stream& stream, Adapter& adapter,
                        const StepCallback& on_step) {
  StreamMetrics m;
  std::optional<std::string> previous_domain;
  while (auto batch = stream.Next()) {
    if (adapter.config().reset == ResetPolicy::kPerDomain && previous_domain &&
        *previous_domain != batch->domain) {
      adapter.Reset();
    }
    previous_domain = batch->domain;

    const StepResult r = adapter.Step(batch->images);
    StepRecord rec;
    rec.step = batch->step;
    rec.domain = batch->domain;
    rec.batch_size = batch->images.dim(0);
    rec.sample_ids = batch->sample_ids;
    rec.correct = StreamScorer::CountCorrect(*batch, r.predictions);
    rec.loss = r.loss;
    rec.skipped = r.skipped;

    m.correct += rec.correct;
    m.total += rec.batch_size;
    rec.batch_accuracy =
        static_cast<double>(rec.correct) / static_cast<double>(rec.batch_size);
    rec.cumulative_accuracy = m.cumulative_accuracy();
    if (!m.per_domain.count(rec.domain)) m.domain_order.push_back(rec.domain);
    auto& tally = m.per_domain[rec.domain];
    tally.correct += rec.correct;
    tally.total += rec.batch_size;
    if (r.skipped) {
      ++m.skipped_steps;
      m.diagnostics.push_back("step " + std::to_string(rec.step) + ": skipped, " +
                              r.diagnostic);
    }
    m.degenerate_features += r.degenerate_features;
    if (on_step) on_step(rec, r);
    m.steps.push_back(std::move(rec));
  }
  return m;
}

namespace {

std::string Fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(9) << v;
  return ss.str();
}

}  // namespace

std::string MetricsCsv(const StreamMetrics& metrics) {
  std::ostringstream ss;
  ss << "step,domain,batch_accuracy,cumulative_accuracy,L_e,L_s,lambda,"
        "masked_fraction,L,batch_size\n";
  for (const auto& s : metrics.steps) {
    ss << s.step << ',' << s.domain << ',' << Fmt(s.batch_accuracy) << ','
       << Fmt(s.cumulative_accuracy) << ',' << Fmt(s.loss.entropy_loss) << ','
       << Fmt(s.loss.similarity_loss) << ',' << Fmt(s.loss.lambda) << ','
       << Fmt(s.loss.masked_fraction()) << ',' << Fmt(s.loss.total) << ','
       << s.batch_size << '\n';
  }
  return ss.str();
}

std::string LossesCsv(const StreamMetrics& metrics) {
  std::ostringstream ss;
  ss << "step,domain,batch_size,reliable,entropy_mean,L_e,L_s,lambda,L,skipped\n";
  for (const auto& s : metrics.steps) {
    ss << s.step << ',' << s.domain << ',' << s.batch_size << ','
       << s.loss.reliable() << ',' << Fmt(s.loss.entropy_mean) << ','
       << Fmt(s.loss.entropy_loss) << ','
       << Fmt(s.loss.similarity_loss) << ',' << Fmt(s.loss.lambda) << ','
       << Fmt(s.loss.total) << ',' << (s.skipped ? 1 : 0) << '\n';
  }
  return ss.str();
}

}  // namespace pcsr
