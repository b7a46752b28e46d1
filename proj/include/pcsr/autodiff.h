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

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every op of one forward pass in creation order. Backward()
// walks the records in reverse and deposits gradient into the BasicParam
// leaves that were registered with requires_grad set. Nodes whose inputs are
// all frozen keep no backward closure, so frozen subgraphs cost nothing and
// receive no gradient.
//
// Tapes are meant to be built once per batch and thrown away.

#ifndef PCSR_AUTODIFF_H_
#define PCSR_AUTODIFF_H_

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pcsr/tensor.h"

namespace pcsr {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& dims() const { return value().dims(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  // Gradient accumulated by Backward(); null when none reached this node.
  const BasicTensor<T>* grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

enum class GradMode { kEnabled, kDisabled };

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(GradMode mode = GradMode::kEnabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> Constant(BasicTensor<T> value);
  // Registers a model tensor. Under GradMode::kDisabled, or when the param is
  // frozen, the leaf behaves like a constant.
  Var<T> Parameter(BasicParam<T>& param);

  // Accumulates d(loss)/d(param) into every trainable param leaf on this
  // tape. Trainable leaves the loss does not depend on get a zero gradient.
  void Backward(const Var<T>& loss);

  GradMode mode() const { return mode_; }
  size_t size() const { return nodes_.size(); }
  const BasicTensor<T>& value(int id) const { return node(id).value; }
  bool requires_grad(int id) const { return node(id).requires_grad; }
  const BasicTensor<T>* grad(int id) const {
    const auto& g = node(id).grad;
    return g ? &*g : nullptr;
  }

  // Op authoring interface. `fn` is dropped when no input requires grad.
  Var<T> Record(BasicTensor<T> value, std::vector<int> inputs, BackwardFn fn);
  // Gradient accumulator for `id`, zero-initialized on first use.
  BasicTensor<T>& GradFor(int id);

 private:
  struct Node {
    BasicTensor<T> value;
    std::optional<BasicTensor<T>> grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    BasicParam<T>* param = nullptr;
  };

  const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
  Node& node(int id) { return nodes_.at(static_cast<size_t>(id)); }

  std::vector<Node> nodes_;
  GradMode mode_;
  bool backward_done_ = false;
};

// Differentiable ops. Every op rejects mismatched dims with ShapeError; the
// only broadcasting is the documented batched matmul and trailing-dim forms.
namespace ad {

// a [..., m, k] x b [k, n] -> [..., m, n]; leading dims of `a` are batch.
template <typename T>
Var<T> MatMul(const Var<T>& a, const Var<T>& b);

// a [B, m, k] x b [B, k, n] -> [B, m, n]. With transpose_b, b is [B, n, k]
// and each batch computes a * b^T.
template <typename T>
Var<T> BatchMatMul(const Var<T>& a, const Var<T>& b, bool transpose_b = false);

// x [..., in] * w [in, out] + bias [out]. `bias` may be invalid (no bias).
template <typename T>
Var<T> Linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> Add(const Var<T>& a, const Var<T>& b);

// x + y where y's dims equal the trailing dims of x.
template <typename T>
Var<T> AddBroadcast(const Var<T>& x, const Var<T>& y);

template <typename T>
Var<T> MulScalar(const Var<T>& x, T s);

// x [B, T, d], gamma/beta [B, d]: y[b,t,:] = gamma[b,:] * x[b,t,:] + beta[b,:]
template <typename T>
Var<T> ScaleShift(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

// Max-subtracted softmax along `axis`. Non-finite input is a NumericError.
template <typename T>
Var<T> Softmax(const Var<T>& x, int axis = -1);

// Normalizes the last dim, then applies gamma/beta [last dim]. eps must be
// positive (ConfigError otherwise).
template <typename T>
Var<T> LayerNorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 T eps);

// Exact (erf) GELU.
template <typename T>
Var<T> Gelu(const Var<T>& x);

template <typename T>
Var<T> Reshape(const Var<T>& x, Shape dims);

// [A, B, C, D] -> [A, C, B, D]
template <typename T>
Var<T> Permute0213(const Var<T>& x);

// Contiguous range [start, start + length) along `axis`.
template <typename T>
Var<T> Slice(const Var<T>& x, int axis, std::int64_t start,
             std::int64_t length);

// x [B, N, d], token [d] -> [B, N + 1, d] with token at position 0.
template <typename T>
Var<T> PrependToken(const Var<T>& x, const Var<T>& token);

// Reductions along one axis; the axis is removed from the result.
template <typename T>
Var<T> MeanAxis(const Var<T>& x, int axis);
// Gradient routes to the first maximal element.
template <typename T>
Var<T> MaxAxis(const Var<T>& x, int axis);

// Scalar reductions over all elements.
template <typename T>
Var<T> Sum(const Var<T>& x);
template <typename T>
Var<T> Mean(const Var<T>& x);

// f [B, N, d] -> M [B, N, N] with M_jk = cos(f_j, f_k). A zero-norm feature
// has similarity 0 with everything (itself included) and increments
// *degenerate when provided. Non-degenerate diagonals are exactly 1.
template <typename T>
Var<T> CosineSimilarity(const Var<T>& f, std::int64_t* degenerate = nullptr);

// Shannon entropy in nats of softmax(logits) per row: [B, C] -> [B].
template <typename T>
Var<T> EntropyFromLogits(const Var<T>& logits);

// (1/B) * sum_i mask_i * x_i for x [B]. The mask is a constant.
template <typename T>
Var<T> MaskedMean(const Var<T>& x, std::span<const std::uint8_t> mask);

// Mean softmax cross-entropy of logits [B, C] against integer labels. With
// smoothing s the target is (1 - s) * onehot + s / C.
template <typename T>
Var<T> CrossEntropy(const Var<T>& logits, std::span<const int> labels,
                    double label_smoothing = 0.0);

}  // namespace ad

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace pcsr

#endif  // PCSR_AUTODIFF_H_
