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

#ifndef PCSR_TENSOR_H_
#define PCSR_TENSOR_H_

#include <cstdint>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pcsr {

using Shape = std::vector<std::int64_t>;

// Tensor storage starts on a 64-byte boundary. Vectorized kernels peel
// differently depending on the start address, so without this, sums could
// round differently from one allocation to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

std::string ShapeToString(const Shape& dims);
std::int64_t NumElements(const Shape& dims);

// Dense row-major array. The library runs in float; the double
// instantiation exists for finite-difference checking.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape dims);
  BasicTensor(Shape dims, std::vector<T> data);

  static BasicTensor Full(Shape dims, T value);
  static BasicTensor Scalar(T value);

  const Shape& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  // Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<size_t>(i)];
  }
  T& at(std::initializer_list<std::int64_t> index);
  const T& at(std::initializer_list<std::int64_t> index) const;

  // Scalar value of a one-element tensor.
  T item() const;

  BasicTensor Reshaped(Shape dims) const;
  void Fill(T value);
  bool AllFinite() const;
  // Throws NumericError naming `what` if any element is NaN or Inf.
  void CheckFinite(const std::string& what) const;

  template <typename U>
  BasicTensor<U> Cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  std::int64_t Offset(std::initializer_list<std::int64_t> index) const;

  Shape dims_;
  std::vector<T, AlignedAllocator<T>> data_;
};

using Tensor = BasicTensor<float>;

// A trainable or frozen model tensor. `grad` is absent until a backward
// pass deposits gradient into it.
template <typename T>
struct BasicParam {
  BasicTensor<T> value;
  std::optional<BasicTensor<T>> grad;
  bool requires_grad = false;

  BasicParam() = default;
  explicit BasicParam(BasicTensor<T> v, bool trainable = false)
      : value(std::move(v)), requires_grad(trainable) {}

  void ZeroGrad() { grad.reset(); }

  template <typename U>
  BasicParam<U> Cast() const {
    BasicParam<U> out(value.template Cast<U>(), requires_grad);
    if (grad) out.grad = grad->template Cast<U>();
    return out;
  }
};

using Param = BasicParam<float>;

void CheckSameShape(const Shape& a, const Shape& b, const char* op);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace pcsr

#endif  // PCSR_TENSOR_H_
