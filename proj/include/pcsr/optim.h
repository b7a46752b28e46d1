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

#ifndef PCSR_OPTIM_H_
#define PCSR_OPTIM_H_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcsr/autodiff.h"
#include "pcsr/tensor.h"

namespace pcsr {

template <typename T>
using NamedParamRefs = std::vector<std::pair<std::string, BasicParam<T>*>>;

// Plain SGD parameter group: every member moves by -lr * grad.
template <typename T>
struct ParamGroup {
  std::string name;
  T lr = 0;
  std::vector<BasicParam<T>*> params;
};

// Applies p <- p - lr * grad for each group, then clears the gradients.
// A member without a gradient is a ContractError; a negative learning rate
// is a ConfigError. Nothing is modified when either check fails.
template <typename T>
void SgdStep(std::span<ParamGroup<T>> groups);

template <typename T>
void ZeroGrad(std::span<ParamGroup<T>> groups);

// True when every gradient in the groups is present and finite.
template <typename T>
bool GradientsFinite(std::span<const ParamGroup<T>> groups);

struct GradCheckOptions {
  double eps = 1e-4;
  // Coordinates probed; 0 probes all of them. Sampling is seeded.
  std::int64_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::int64_t coords_checked = 0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Compares tape gradients of `loss_fn` against central differences,
//   rel = |analytic - cd| / max(|analytic|, |cd|, 1e-8),
// and reports the maximum over the probed coordinates. `loss_fn` must be a
// pure function of the params; a re-evaluation mismatch raises OracleError.
// Param values are restored before returning.
template <typename T>
GradCheckResult GradCheck(const std::function<Var<T>(Tape<T>&)>& loss_fn,
                          const NamedParamRefs<T>& params,
                          const GradCheckOptions& options = {});

}  // namespace pcsr

#endif  // PCSR_OPTIM_H_
