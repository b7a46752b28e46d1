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

#include "pcsr/optim.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pcsr/error.h"

namespace pcsr {

template <typename T>
void SgdStep(std::span<ParamGroup<T>> groups) {
  for (const auto& g : groups) {
    if (!(g.lr >= 0)) {
      throw ConfigError("sgd: learning rate of group '" + g.name +
                        "' must be non-negative");
    }
    for (const auto* p : g.params) {
      if (!p->grad) {
        throw ContractError("sgd: missing gradient in group '" + g.name + "'");
      }
    }
  }
  for (auto& g : groups) {
    for (auto* p : g.params) {
      auto v = p->value.data();
      auto dv = p->grad->data();
      for (size_t i = 0; i < v.size(); ++i) v[i] -= g.lr * dv[i];
      p->grad.reset();
    }
  }
}

template <typename T>
void ZeroGrad(std::span<ParamGroup<T>> groups) {
  for (auto& g : groups)
    for (auto* p : g.params) p->grad.reset();
}

template <typename T>
bool GradientsFinite(std::span<const ParamGroup<T>> groups) {
  for (const auto& g : groups)
    for (const auto* p : g.params)
      if (!p->grad || !p->grad->AllFinite()) return false;
  return true;
}

template <typename T>
GradCheckResult GradCheck(const std::function<Var<T>(Tape<T>&)>& loss_fn,
                          const NamedParamRefs<T>& params,
                          const GradCheckOptions& options) {
  if (!(options.eps > 0)) throw ContractError("grad_check: eps must be > 0");
  for (auto& [name, p] : params) p->grad.reset();

  T base = 0;
  {
    Tape<T> tape;
    auto loss = loss_fn(tape);
    base = loss.value().item();
    tape.Backward(loss);
  }
  auto evaluate = [&]() {
    Tape<T> tape(GradMode::kDisabled);
    return loss_fn(tape).value().item();
  };
  const T again = evaluate();
  if (!(again == base)) {
    throw OracleError("grad_check: loss is not deterministic (" +
                      std::to_string(base) + " vs " + std::to_string(again) +
                      ")");
  }

  // (param index, element index)
  std::vector<std::pair<size_t, std::int64_t>> coords;
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].second->grad) {
      throw ContractError("grad_check: no gradient for " + params[i].first);
    }
    for (std::int64_t j = 0; j < params[i].second->value.numel(); ++j) {
      coords.emplace_back(i, j);
    }
  }
  if (options.max_coords > 0 &&
      static_cast<std::int64_t>(coords.size()) > options.max_coords) {
    std::mt19937_64 rng(options.seed);
    for (std::int64_t i = 0; i < options.max_coords; ++i) {
      std::uniform_int_distribution<std::int64_t> pick(
          i, static_cast<std::int64_t>(coords.size()) - 1);
      std::swap(coords[static_cast<size_t>(i)],
                coords[static_cast<size_t>(pick(rng))]);
    }
    coords.resize(static_cast<size_t>(options.max_coords));
  }

  GradCheckResult result;
  const T eps = static_cast<T>(options.eps);
  for (const auto& [pi, j] : coords) {
    auto& p = *params[pi].second;
    const T original = p.value[j];
    p.value[j] = original + eps;
    const double plus = evaluate();
    p.value[j] = original - eps;
    const double minus = evaluate();
    p.value[j] = original;
    const double numeric = (plus - minus) / (2.0 * options.eps);
    const double analytic = (*p.grad)[j];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    ++result.coords_checked;
    if (rel > result.max_rel_error || result.worst_index < 0) {
      result.max_rel_error = rel;
      result.worst_param = params[pi].first;
      result.worst_index = j;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  for (auto& [name, p] : params) p->grad.reset();
  return result;
}

template void SgdStep<float>(std::span<ParamGroup<float>>);
template void SgdStep<double>(std::span<ParamGroup<double>>);
template void ZeroGrad<float>(std::span<ParamGroup<float>>);
template void ZeroGrad<double>(std::span<ParamGroup<double>>);
template bool GradientsFinite<float>(std::span<const ParamGroup<float>>);
template bool GradientsFinite<double>(std::span<const ParamGroup<double>>);
template GradCheckResult GradCheck<float>(
    const std::function<Var<float>(Tape<float>&)>&, const NamedParamRefs<float>&,
    const GradCheckOptions&);
template GradCheckResult GradCheck<double>(
    const std::function<Var<double>(Tape<double>&)>&,
    const NamedParamRefs<double>&, const GradCheckOptions&);

}  // namespace pcsr
