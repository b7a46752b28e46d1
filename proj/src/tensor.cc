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

#include "pcsr/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pcsr/error.h"

namespace pcsr {

std::string ShapeToString(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::int64_t NumElements(const Shape& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void CheckSameShape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + ShapeToString(a) +
                     " vs " + ShapeToString(b));
  }
}

namespace {

void ValidateDims(const Shape& dims) {
  for (auto d : dims) {
    if (d <= 0) {
      throw ShapeError("tensor dims must be positive, got " +
                       ShapeToString(dims));
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims) : dims_(std::move(dims)) {
  ValidateDims(dims_);
  data_.assign(static_cast<size_t>(NumElements(dims_)), T(0));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, std::vector<T> data)
    : dims_(std::move(dims)), data_(data.begin(), data.end()) {
  ValidateDims(dims_);
  if (NumElements(dims_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor dims " + ShapeToString(dims_) + " hold " +
                     std::to_string(NumElements(dims_)) +
                     " elements but data has " + std::to_string(data_.size()));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Full(Shape dims, T value) {
  BasicTensor t(std::move(dims));
  t.Fill(value);
  return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     ShapeToString(dims_));
  }
  return dims_[static_cast<size_t>(a)];
}

template <typename T>
std::int64_t BasicTensor<T>::Offset(
    std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) +
                     " does not match tensor " + ShapeToString(dims_));
  }
  std::int64_t off = 0;
  size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= dims_[axis]) {
      throw ShapeError("index out of range for " + ShapeToString(dims_));
    }
    off = off * dims_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) {
  return data_[static_cast<size_t>(Offset(index))];
}

template <typename T>
const T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  return data_[static_cast<size_t>(Offset(index))];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on tensor with dims " + ShapeToString(dims_));
  }
  return data_[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Reshaped(Shape dims) const {
  if (NumElements(dims) != numel()) {
    throw ShapeError("cannot reshape " + ShapeToString(dims_) + " to " +
                     ShapeToString(dims));
  }
  BasicTensor out = *this;
  out.dims_ = std::move(dims);
  return out;
}

template <typename T>
void BasicTensor<T>::Fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool BasicTensor<T>::AllFinite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void BasicTensor<T>::CheckFinite(const std::string& what) const {
  if (!AllFinite()) throw NumericError(what + ": non-finite value");
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace pcsr
