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

#include "pcsr/autodiff.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pcsr/error.h"

namespace pcsr {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::Constant(BasicTensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::Parameter(BasicParam<T>& param) {
  Node n;
  n.value = param.value;
  if (mode_ == GradMode::kEnabled && param.requires_grad) {
    n.requires_grad = true;
    n.param = &param;
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::Record(BasicTensor<T> value, std::vector<int> inputs,
                       BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int id : inputs) {
    if (node(id).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
BasicTensor<T>& Tape<T>::GradFor(int id) {
  auto& n = node(id);
  if (!n.grad) n.grad = BasicTensor<T>(n.value.dims());
  return *n.grad;
}

template <typename T>
void Tape<T>::Backward(const Var<T>& loss) {
  if (loss.tape() != this) {
    throw ContractError("backward: loss was recorded on a different tape");
  }
  if (nodes_.empty()) throw ContractError("backward: empty tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got dims " +
                        ShapeToString(loss.dims()));
  }
  if (backward_done_) {
    throw ContractError("backward: tape already consumed");
  }
  backward_done_ = true;

  const int root = loss.id();
  if (node(root).requires_grad) {
    GradFor(root).Fill(T(1));
    for (int id = root; id >= 0; --id) {
      auto& n = node(id);
      if (!n.requires_grad || !n.grad || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  for (auto& n : nodes_) {
    if (!n.param) continue;
    if (!n.param->grad) n.param->grad = BasicTensor<T>(n.value.dims());
    if (!n.grad) continue;
    auto dst = n.param->grad->data();
    auto src = n.grad->data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>& TapeOf(const Var<T>& a) {
  if (!a.valid()) throw ContractError("op applied to an empty Var");
  return *a.tape();
}

template <typename T>
Tape<T>& TapeOf(const Var<T>& a, const Var<T>& b) {
  auto& t = TapeOf(a);
  if (&TapeOf(b) != &t) throw ContractError("op mixes Vars from two tapes");
  return t;
}

int NormAxis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for rank " + std::to_string(rank));
  }
  return a;
}

// Splits dims around `axis` into (outer, n, inner).
struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit SplitAt(const Shape& dims, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= dims[static_cast<size_t>(i)];
  s.n = dims[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < dims.size(); ++i) {
    s.inner *= dims[i];
  }
  return s;
}

template <typename T>
void AccumulateInto(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var<T> MatMul(const Var<T>& a, const Var<T>& b) {
  auto& tape = TapeOf(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.dim(-1) != bv.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + ShapeToString(av.dims()) +
                     " by " + ShapeToString(bv.dims()));
  }
  const auto k = bv.dim(0), n = bv.dim(1);
  const auto m = av.numel() / k;
  Shape out_dims = av.dims();
  out_dims.back() = n;
  BasicTensor<T> out(out_dims);
  MatMap<T>(out.raw(), m, n).noalias() =
      ConstMatMap<T>(av.raw(), m, k) * ConstMatMap<T>(bv.raw(), k, n);
  const int ia = a.id(), ib = b.id();
  return tape.Record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, int self) {
    ConstMatMap<T> g(t.grad(self)->raw(), m, n);
    if (t.requires_grad(ia)) {
      MatMap<T>(t.GradFor(ia).raw(), m, k).noalias() +=
          g * ConstMatMap<T>(t.value(ib).raw(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      MatMap<T>(t.GradFor(ib).raw(), k, n).noalias() +=
          ConstMatMap<T>(t.value(ia).raw(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> BatchMatMul(const Var<T>& a, const Var<T>& b, bool transpose_b) {
  auto& tape = TapeOf(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("batch_matmul: incompatible " + ShapeToString(av.dims()) +
                     " and " + ShapeToString(bv.dims()));
  }
  const auto batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const auto bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const auto n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) {
    throw ShapeError("batch_matmul: inner dims differ " +
                     ShapeToString(av.dims()) + " vs " +
                     ShapeToString(bv.dims()));
  }
  BasicTensor<T> out({batch, m, n});
  for (std::int64_t i = 0; i < batch; ++i) {
    ConstMatMap<T> A(av.raw() + i * m * k, m, k);
    MatMap<T> C(out.raw() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * ConstMatMap<T>(bv.raw() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMatMap<T>(bv.raw() + i * k * n, k, n);
    }
  }
  const int ia = a.id(), ib = b.id();
  return tape.Record(
      std::move(out), {ia, ib},
      [ia, ib, batch, m, k, n, transpose_b](Tape<T>& t, int self) {
        const T* g = t.grad(self)->raw();
        const T* A = t.value(ia).raw();
        const T* B = t.value(ib).raw();
        T* dA = t.requires_grad(ia) ? t.GradFor(ia).raw() : nullptr;
        T* dB = t.requires_grad(ib) ? t.GradFor(ib).raw() : nullptr;
        for (std::int64_t i = 0; i < batch; ++i) {
          ConstMatMap<T> G(g + i * m * n, m, n);
          if (transpose_b) {
            ConstMatMap<T> Bi(B + i * n * k, n, k);
            if (dA) MatMap<T>(dA + i * m * k, m, k).noalias() += G * Bi;
            if (dB) {
              MatMap<T>(dB + i * n * k, n, k).noalias() +=
                  G.transpose() * ConstMatMap<T>(A + i * m * k, m, k);
            }
          } else {
            ConstMatMap<T> Bi(B + i * k * n, k, n);
            if (dA) {
              MatMap<T>(dA + i * m * k, m, k).noalias() += G * Bi.transpose();
            }
            if (dB) {
              MatMap<T>(dB + i * k * n, k, n).noalias() +=
                  ConstMatMap<T>(A + i * m * k, m, k).transpose() * G;
            }
          }
        }
      });
}

template <typename T>
Var<T> Linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  auto& tape = TapeOf(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.dim(-1) != wv.dim(0)) {
    throw ShapeError("linear: input " + ShapeToString(xv.dims()) +
                     " incompatible with weight " + ShapeToString(wv.dims()));
  }
  const auto in = wv.dim(0), outf = wv.dim(1);
  const auto rows = xv.numel() / in;
  const bool has_bias = bias.valid();
  if (has_bias) {
    TapeOf(x, bias);
    CheckSameShape(bias.dims(), Shape{outf}, "linear bias");
  }
  Shape out_dims = xv.dims();
  out_dims.back() = outf;
  BasicTensor<T> out(out_dims);
  MatMap<T> Y(out.raw(), rows, outf);
  Y.noalias() = ConstMatMap<T>(xv.raw(), rows, in) *
                ConstMatMap<T>(wv.raw(), in, outf);
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.value().raw(),
                                                             outf);
    Y.rowwise() += bv;
  }
  const int ix = x.id(), iw = w.id(), ib = has_bias ? bias.id() : -1;
  std::vector<int> inputs = {ix, iw};
  if (has_bias) inputs.push_back(ib);
  return tape.Record(std::move(out), std::move(inputs),
                     [ix, iw, ib, rows, in, outf](Tape<T>& t, int self) {
                       ConstMatMap<T> G(t.grad(self)->raw(), rows, outf);
                       if (t.requires_grad(ix)) {
                         MatMap<T>(t.GradFor(ix).raw(), rows, in).noalias() +=
                             G * ConstMatMap<T>(t.value(iw).raw(), in, outf)
                                     .transpose();
                       }
                       if (t.requires_grad(iw)) {
                         MatMap<T>(t.GradFor(iw).raw(), in, outf).noalias() +=
                             ConstMatMap<T>(t.value(ix).raw(), rows, in)
                                 .transpose() *
                             G;
                       }
                       if (ib >= 0 && t.requires_grad(ib)) {
                         Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(
                             t.GradFor(ib).raw(), outf);
                         db += G.colwise().sum();
                       }
                     });
}

template <typename T>
Var<T> Add(const Var<T>& a, const Var<T>& b) {
  auto& tape = TapeOf(a, b);
  CheckSameShape(a.dims(), b.dims(), "add");
  BasicTensor<T> out = a.value();
  AccumulateInto(out, b.value());
  const int ia = a.id(), ib = b.id();
  return tape.Record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) AccumulateInto(t.GradFor(ia), *t.grad(self));
    if (t.requires_grad(ib)) AccumulateInto(t.GradFor(ib), *t.grad(self));
  });
}

template <typename T>
Var<T> AddBroadcast(const Var<T>& x, const Var<T>& y) {
  auto& tape = TapeOf(x, y);
  const auto& xd = x.dims();
  const auto& yd = y.dims();
  if (yd.size() > xd.size() ||
      !std::equal(yd.begin(), yd.end(), xd.end() - static_cast<std::ptrdiff_t>(yd.size()))) {
    throw ShapeError("add_broadcast: " + ShapeToString(yd) +
                     " is not a trailing shape of " + ShapeToString(xd));
  }
  const auto inner = y.value().numel();
  const auto outer = x.value().numel() / inner;
  BasicTensor<T> out = x.value();
  const T* yv = y.value().raw();
  for (std::int64_t o = 0; o < outer; ++o) {
    T* row = out.raw() + o * inner;
    for (std::int64_t i = 0; i < inner; ++i) row[i] += yv[i];
  }
  const int ix = x.id(), iy = y.id();
  return tape.Record(std::move(out), {ix, iy},
                     [ix, iy, outer, inner](Tape<T>& t, int self) {
                       const auto& g = *t.grad(self);
                       if (t.requires_grad(ix)) AccumulateInto(t.GradFor(ix), g);
                       if (t.requires_grad(iy)) {
                         T* dy = t.GradFor(iy).raw();
                         for (std::int64_t o = 0; o < outer; ++o) {
                           const T* row = g.raw() + o * inner;
                           for (std::int64_t i = 0; i < inner; ++i) dy[i] += row[i];
                         }
                       }
                     });
}

template <typename T>
Var<T> MulScalar(const Var<T>& x, T s) {
  auto& tape = TapeOf(x);
  BasicTensor<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix, s](Tape<T>& t, int self) {
    auto dx = t.GradFor(ix).data();
    auto g = t.grad(self)->data();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += s * g[i];
  });
}

template <typename T>
Var<T> ScaleShift(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  auto& tape = TapeOf(x, gamma);
  TapeOf(x, beta);
  const auto& xv = x.value();
  if (xv.rank() != 3) {
    throw ShapeError("scale_shift: expected [B, T, d], got " +
                     ShapeToString(xv.dims()));
  }
  const auto B = xv.dim(0), Tn = xv.dim(1), d = xv.dim(2);
  CheckSameShape(gamma.dims(), Shape{B, d}, "scale_shift gamma");
  CheckSameShape(beta.dims(), Shape{B, d}, "scale_shift beta");
  BasicTensor<T> out(xv.dims());
  const T* g = gamma.value().raw();
  const T* be = beta.value().raw();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* xr = xv.raw() + (b * Tn + t) * d;
      T* yr = out.raw() + (b * Tn + t) * d;
      for (std::int64_t c = 0; c < d; ++c) {
        yr[c] = g[b * d + c] * xr[c] + be[b * d + c];
      }
    }
  }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return tape.Record(
      std::move(out), {ix, ig, ibt}, [ix, ig, ibt, B, Tn, d](Tape<T>& t, int self) {
        const T* gout = t.grad(self)->raw();
        const T* xr = t.value(ix).raw();
        const T* gam = t.value(ig).raw();
        T* dx = t.requires_grad(ix) ? t.GradFor(ix).raw() : nullptr;
        T* dg = t.requires_grad(ig) ? t.GradFor(ig).raw() : nullptr;
        T* db = t.requires_grad(ibt) ? t.GradFor(ibt).raw() : nullptr;
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t tk = 0; tk < Tn; ++tk) {
            const std::int64_t row = (b * Tn + tk) * d;
            for (std::int64_t c = 0; c < d; ++c) {
              const T go = gout[row + c];
              if (dx) dx[row + c] += gam[b * d + c] * go;
              if (dg) dg[b * d + c] += xr[row + c] * go;
              if (db) db[b * d + c] += go;
            }
          }
        }
      });
}

template <typename T>
Var<T> Softmax(const Var<T>& x, int axis) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  const int ax = NormAxis(axis, xv.rank(), "softmax");
  xv.CheckFinite("softmax input");
  const auto s = SplitAt(xv.dims(), ax);
  BasicTensor<T> out(xv.dims());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.n * s.inner + in;
      T mx = xv[base];
      for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0;
      for (std::int64_t j = 0; j < s.n; ++j) {
        const T e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      const T inv = static_cast<T>(1.0 / total);
      for (std::int64_t j = 0; j < s.n; ++j) out[base + j * s.inner] *= inv;
    }
  }
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix, s](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = *t.grad(self);
    auto& dx = t.GradFor(ix);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.n * s.inner + in;
        double dot = 0;
        for (std::int64_t j = 0; j < s.n; ++j) {
          dot += static_cast<double>(g[base + j * s.inner]) * y[base + j * s.inner];
        }
        for (std::int64_t j = 0; j < s.n; ++j) {
          const auto idx = base + j * s.inner;
          dx[idx] += y[idx] * (g[idx] - static_cast<T>(dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> LayerNorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 T eps) {
  if (!(eps > 0)) throw ConfigError("layernorm: eps must be positive");
  auto& tape = TapeOf(x, gamma);
  TapeOf(x, beta);
  const auto& xv = x.value();
  const auto n = xv.dim(-1);
  CheckSameShape(gamma.dims(), Shape{n}, "layernorm gamma");
  CheckSameShape(beta.dims(), Shape{n}, "layernorm beta");
  const auto rows = xv.numel() / n;
  BasicTensor<T> out(xv.dims());
  std::vector<T> xhat(static_cast<size_t>(xv.numel()));
  std::vector<T> rstd(static_cast<size_t>(rows));
  const T* g = gamma.value().raw();
  const T* b = beta.value().raw();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.raw() + r * n;
    double mean = 0;
    for (std::int64_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[static_cast<size_t>(r)] = rs;
    for (std::int64_t i = 0; i < n; ++i) {
      const T xh = static_cast<T>(xr[i] - mean) * rs;
      xhat[static_cast<size_t>(r * n + i)] = xh;
      out[r * n + i] = xh * g[i] + b[i];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.Record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, n, xhat = std::move(xhat),
       rstd = std::move(rstd)](Tape<T>& t, int self) {
        const T* gout = t.grad(self)->raw();
        const T* gam = t.value(ig).raw();
        T* dx = t.requires_grad(ix) ? t.GradFor(ix).raw() : nullptr;
        T* dg = t.requires_grad(ig) ? t.GradFor(ig).raw() : nullptr;
        T* db = t.requires_grad(ib) ? t.GradFor(ib).raw() : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* go = gout + r * n;
          const T* xh = xhat.data() + r * n;
          if (dg || db) {
            for (std::int64_t i = 0; i < n; ++i) {
              if (dg) dg[i] += go[i] * xh[i];
              if (db) db[i] += go[i];
            }
          }
          if (!dx) continue;
          double mean_dxh = 0, mean_dxh_xh = 0;
          for (std::int64_t i = 0; i < n; ++i) {
            const double dxh = static_cast<double>(go[i]) * gam[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
          }
          mean_dxh /= static_cast<double>(n);
          mean_dxh_xh /= static_cast<double>(n);
          const T rs = rstd[static_cast<size_t>(r)];
          for (std::int64_t i = 0; i < n; ++i) {
            const double dxh = static_cast<double>(go[i]) * gam[i];
            dx[r * n + i] +=
                static_cast<T>(rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh));
          }
        }
      });
}

template <typename T>
Var<T> Gelu(const Var<T>& x) {
  auto& tape = TapeOf(x);
  BasicTensor<T> out = x.value();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (auto& v : out.data()) {
    v = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix](Tape<T>& t, int self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto xs = t.value(ix).data();
    auto g = t.grad(self)->data();
    auto dx = t.GradFor(ix).data();
    for (size_t i = 0; i < xs.size(); ++i) {
      const double v = xs[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx[i] += static_cast<T>(g[i] * (cdf + v * pdf));
    }
  });
}

template <typename T>
Var<T> Reshape(const Var<T>& x, Shape dims) {
  auto& tape = TapeOf(x);
  BasicTensor<T> out = x.value().Reshaped(std::move(dims));
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix](Tape<T>& t, int self) {
    AccumulateInto(t.GradFor(ix), t.grad(self)->Reshaped(t.value(ix).dims()));
  });
}

template <typename T>
Var<T> Permute0213(const Var<T>& x) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  if (xv.rank() != 4) {
    throw ShapeError("permute_0213: expected rank 4, got " +
                     ShapeToString(xv.dims()));
  }
  const auto A = xv.dim(0), B = xv.dim(1), C = xv.dim(2), D = xv.dim(3);
  BasicTensor<T> out({A, C, B, D});
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        std::copy_n(xv.raw() + ((a * B + b) * C + c) * D, D,
                    out.raw() + ((a * C + c) * B + b) * D);
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix, A, B, C, D](Tape<T>& t, int self) {
    const T* g = t.grad(self)->raw();
    T* dx = t.GradFor(ix).raw();
    for (std::int64_t a = 0; a < A; ++a)
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* src = g + ((a * C + c) * B + b) * D;
          T* dst = dx + ((a * B + b) * C + c) * D;
          for (std::int64_t i = 0; i < D; ++i) dst[i] += src[i];
        }
  });
}

template <typename T>
Var<T> Slice(const Var<T>& x, int axis, std::int64_t start,
             std::int64_t length) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  const int ax = NormAxis(axis, xv.rank(), "slice");
  const auto s = SplitAt(xv.dims(), ax);
  if (start < 0 || length <= 0 || start + length > s.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of " +
                     ShapeToString(xv.dims()));
  }
  Shape out_dims = xv.dims();
  out_dims[static_cast<size_t>(ax)] = length;
  BasicTensor<T> out(out_dims);
  const auto chunk = length * s.inner;
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.raw() + (o * s.n + start) * s.inner, chunk,
                out.raw() + o * chunk);
  }
  const int ix = x.id();
  return tape.Record(std::move(out), {ix},
                     [ix, s, start, chunk](Tape<T>& t, int self) {
                       const T* g = t.grad(self)->raw();
                       T* dx = t.GradFor(ix).raw();
                       for (std::int64_t o = 0; o < s.outer; ++o) {
                         T* dst = dx + (o * s.n + start) * s.inner;
                         const T* src = g + o * chunk;
                         for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                       }
                     });
}

template <typename T>
Var<T> PrependToken(const Var<T>& x, const Var<T>& token) {
  auto& tape = TapeOf(x, token);
  const auto& xv = x.value();
  if (xv.rank() != 3) {
    throw ShapeError("prepend_token: expected [B, N, d], got " +
                     ShapeToString(xv.dims()));
  }
  const auto B = xv.dim(0), N = xv.dim(1), d = xv.dim(2);
  CheckSameShape(token.dims(), Shape{d}, "prepend_token");
  BasicTensor<T> out({B, N + 1, d});
  for (std::int64_t b = 0; b < B; ++b) {
    std::copy_n(token.value().raw(), d, out.raw() + b * (N + 1) * d);
    std::copy_n(xv.raw() + b * N * d, N * d, out.raw() + (b * (N + 1) + 1) * d);
  }
  const int ix = x.id(), it = token.id();
  return tape.Record(std::move(out), {ix, it}, [ix, it, B, N, d](Tape<T>& t, int self) {
    const T* g = t.grad(self)->raw();
    if (t.requires_grad(ix)) {
      T* dx = t.GradFor(ix).raw();
      for (std::int64_t b = 0; b < B; ++b) {
        const T* src = g + (b * (N + 1) + 1) * d;
        T* dst = dx + b * N * d;
        for (std::int64_t i = 0; i < N * d; ++i) dst[i] += src[i];
      }
    }
    if (t.requires_grad(it)) {
      T* dt = t.GradFor(it).raw();
      for (std::int64_t b = 0; b < B; ++b) {
        const T* src = g + b * (N + 1) * d;
        for (std::int64_t i = 0; i < d; ++i) dt[i] += src[i];
      }
    }
  });
}

namespace {

Shape DropAxis(const Shape& dims, int axis) {
  Shape out;
  for (size_t i = 0; i < dims.size(); ++i) {
    if (static_cast<int>(i) != axis) out.push_back(dims[i]);
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> MeanAxis(const Var<T>& x, int axis) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  const int ax = NormAxis(axis, xv.rank(), "mean_axis");
  const auto s = SplitAt(xv.dims(), ax);
  BasicTensor<T> out(DropAxis(xv.dims(), ax));
  const double inv = 1.0 / static_cast<double>(s.n);
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      double acc = 0;
      for (std::int64_t j = 0; j < s.n; ++j) acc += xv[(o * s.n + j) * s.inner + in];
      out[o * s.inner + in] = static_cast<T>(acc * inv);
    }
  }
  const int ix = x.id();
  return tape.Record(std::move(out), {ix}, [ix, s](Tape<T>& t, int self) {
    const T* g = t.grad(self)->raw();
    T* dx = t.GradFor(ix).raw();
    const T inv = static_cast<T>(1.0 / static_cast<double>(s.n));
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t j = 0; j < s.n; ++j)
        for (std::int64_t in = 0; in < s.inner; ++in)
          dx[(o * s.n + j) * s.inner + in] += g[o * s.inner + in] * inv;
  });
}

template <typename T>
Var<T> MaxAxis(const Var<T>& x, int axis) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  const int ax = NormAxis(axis, xv.rank(), "max_axis");
  const auto s = SplitAt(xv.dims(), ax);
  BasicTensor<T> out(DropAxis(xv.dims(), ax));
  std::vector<std::int64_t> argmax(static_cast<size_t>(out.numel()));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < s.n; ++j) {
        if (xv[(o * s.n + j) * s.inner + in] > xv[(o * s.n + best) * s.inner + in]) best = j;
      }
      out[o * s.inner + in] = xv[(o * s.n + best) * s.inner + in];
      argmax[static_cast<size_t>(o * s.inner + in)] = best;
    }
  }
  const int ix = x.id();
  return tape.Record(std::move(out), {ix},
                     [ix, s, argmax = std::move(argmax)](Tape<T>& t, int self) {
                       const T* g = t.grad(self)->raw();
                       T* dx = t.GradFor(ix).raw();
                       for (std::int64_t o = 0; o < s.outer; ++o)
                         for (std::int64_t in = 0; in < s.inner; ++in) {
                           const auto k = o * s.inner + in;
                           dx[(o * s.n + argmax[static_cast<size_t>(k)]) * s.inner + in] += g[k];
                         }
                     });
}

template <typename T>
Var<T> Sum(const Var<T>& x) {
  auto& tape = TapeOf(x);
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  const int ix = x.id();
  return tape.Record(BasicTensor<T>::Scalar(static_cast<T>(acc)), {ix},
                     [ix](Tape<T>& t, int self) {
                       const T g = t.grad(self)->item();
                       for (auto& v : t.GradFor(ix).data()) v += g;
                     });
}

template <typename T>
Var<T> Mean(const Var<T>& x) {
  auto& tape = TapeOf(x);
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  const auto n = static_cast<double>(x.value().numel());
  const int ix = x.id();
  return tape.Record(BasicTensor<T>::Scalar(static_cast<T>(acc / n)), {ix},
                     [ix, n](Tape<T>& t, int self) {
                       const T g = static_cast<T>(t.grad(self)->item() / n);
                       for (auto& v : t.GradFor(ix).data()) v += g;
                     });
}

template <typename T>
Var<T> CosineSimilarity(const Var<T>& f, std::int64_t* degenerate) {
  auto& tape = TapeOf(f);
  const auto& fv = f.value();
  if (fv.rank() != 3) {
    throw ShapeError("cosine_similarity: expected [B, N, d], got " +
                     ShapeToString(fv.dims()));
  }
  const auto B = fv.dim(0), N = fv.dim(1), d = fv.dim(2);
  // Unit-normalized rows; zero rows stay zero.
  BasicTensor<T> unit(fv.dims());
  std::vector<T> norms(static_cast<size_t>(B * N));
  for (std::int64_t r = 0; r < B * N; ++r) {
    const T* fr = fv.raw() + r * d;
    double sq = 0;
    for (std::int64_t i = 0; i < d; ++i) sq += static_cast<double>(fr[i]) * fr[i];
    const double norm = std::sqrt(sq);
    norms[static_cast<size_t>(r)] = static_cast<T>(norm);
    if (norm == 0) {
      if (degenerate) ++*degenerate;
      continue;
    }
    for (std::int64_t i = 0; i < d; ++i) unit[r * d + i] = static_cast<T>(fr[i] / norm);
  }
  BasicTensor<T> out({B, N, N});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t j = 0; j < N; ++j) {
      const T* uj = unit.raw() + (b * N + j) * d;
      for (std::int64_t k = 0; k < N; ++k) {
        T& m = out[(b * N + j) * N + k];
        if (norms[static_cast<size_t>(b * N + j)] == 0 ||
            norms[static_cast<size_t>(b * N + k)] == 0) {
          m = 0;
          continue;
        }
        if (j == k) {
          m = 1;
          continue;
        }
        const T* uk = unit.raw() + (b * N + k) * d;
        double dot = 0;
        for (std::int64_t i = 0; i < d; ++i) dot += static_cast<double>(uj[i]) * uk[i];
        m = static_cast<T>(std::clamp(dot, -1.0, 1.0));
      }
    }
  }
  const int ifeat = f.id();
  return tape.Record(
      std::move(out), {ifeat},
      [ifeat, B, N, d, unit = std::move(unit), norms = std::move(norms)](
          Tape<T>& t, int self) {
        const T* g = t.grad(self)->raw();
        T* df = t.GradFor(ifeat).raw();
        std::vector<double> du(static_cast<size_t>(d));
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t j = 0; j < N; ++j) {
            const T nj = norms[static_cast<size_t>(b * N + j)];
            if (nj == 0) continue;
            // dL/du_j = sum_{k != j} (G_jk + G_kj) u_k
            std::fill(du.begin(), du.end(), 0.0);
            for (std::int64_t k = 0; k < N; ++k) {
              if (k == j) continue;
              const double w = static_cast<double>(g[(b * N + j) * N + k]) +
                               g[(b * N + k) * N + j];
              if (w == 0) continue;
              const T* uk = unit.raw() + (b * N + k) * d;
              for (std::int64_t i = 0; i < d; ++i) du[static_cast<size_t>(i)] += w * uk[i];
            }
            const T* uj = unit.raw() + (b * N + j) * d;
            double radial = 0;
            for (std::int64_t i = 0; i < d; ++i) radial += du[static_cast<size_t>(i)] * uj[i];
            for (std::int64_t i = 0; i < d; ++i) {
              df[(b * N + j) * d + i] +=
                  static_cast<T>((du[static_cast<size_t>(i)] - uj[i] * radial) / nj);
            }
          }
        }
      });
}

template <typename T>
Var<T> EntropyFromLogits(const Var<T>& logits) {
  auto& tape = TapeOf(logits);
  const auto& z = logits.value();
  if (z.rank() != 2) {
    throw ShapeError("entropy: expected [B, C] logits, got " +
                     ShapeToString(z.dims()));
  }
  z.CheckFinite("entropy logits");
  const auto B = z.dim(0), C = z.dim(1);
  BasicTensor<T> out({B});
  std::vector<T> logp(static_cast<size_t>(B * C));
  for (std::int64_t b = 0; b < B; ++b) {
    const T* zr = z.raw() + b * C;
    const T mx = *std::max_element(zr, zr + C);
    double s = 0;
    for (std::int64_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(zr[c] - mx));
    const double lse = mx + std::log(s);
    double e = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double lp = zr[c] - lse;
      logp[static_cast<size_t>(b * C + c)] = static_cast<T>(lp);
      e -= std::exp(lp) * lp;
    }
    out[b] = static_cast<T>(e);
  }
  const int iz = logits.id();
  return tape.Record(std::move(out), {iz},
                     [iz, B, C, logp = std::move(logp)](Tape<T>& t, int self) {
                       const T* g = t.grad(self)->raw();
                       const T* ent = t.value(self).raw();
                       T* dz = t.GradFor(iz).raw();
                       for (std::int64_t b = 0; b < B; ++b) {
                         if (g[b] == 0) continue;
                         for (std::int64_t c = 0; c < C; ++c) {
                           const double lp = logp[static_cast<size_t>(b * C + c)];
                           dz[b * C + c] += static_cast<T>(
                               -g[b] * std::exp(lp) * (lp + ent[b]));
                         }
                       }
                     });
}

template <typename T>
Var<T> MaskedMean(const Var<T>& x, std::span<const std::uint8_t> mask) {
  auto& tape = TapeOf(x);
  const auto& xv = x.value();
  if (xv.rank() != 1 || static_cast<size_t>(xv.numel()) != mask.size()) {
    throw ShapeError("masked_mean: values " + ShapeToString(xv.dims()) +
                     " vs mask of length " + std::to_string(mask.size()));
  }
  const auto B = xv.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    if (mask[static_cast<size_t>(i)]) acc += xv[i];
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const int ix = x.id();
  return tape.Record(BasicTensor<T>::Scalar(static_cast<T>(acc / static_cast<double>(B))),
                     {ix}, [ix, B, m = std::move(m)](Tape<T>& t, int self) {
                       const T g = static_cast<T>(t.grad(self)->item() / static_cast<double>(B));
                       T* dx = t.GradFor(ix).raw();
                       for (std::int64_t i = 0; i < B; ++i) {
                         if (m[static_cast<size_t>(i)]) dx[i] += g;
                       }
                     });
}

template <typename T>
Var<T> CrossEntropy(const Var<T>& logits, std::span<const int> labels,
                    double label_smoothing) {
  auto& tape = TapeOf(logits);
  const auto& z = logits.value();
  if (z.rank() != 2 || static_cast<size_t>(z.dim(0)) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + ShapeToString(z.dims()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  if (!(label_smoothing >= 0 && label_smoothing < 1)) {
    throw ConfigError("cross_entropy: label smoothing must be in [0, 1)");
  }
  const auto B = z.dim(0), C = z.dim(1);
  const double off = label_smoothing / static_cast<double>(C);
  const double on = 1.0 - label_smoothing + off;
  BasicTensor<T> probs({B, C});
  double loss = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= C) throw ContractError("cross_entropy: label out of range");
    const T* zr = z.raw() + b * C;
    const T mx = *std::max_element(zr, zr + C);
    double s = 0;
    for (std::int64_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(zr[c] - mx));
    const double lse = mx + std::log(s);
    for (std::int64_t c = 0; c < C; ++c) {
      loss += (c == y ? on : off) * (lse - zr[c]);
    }
    for (std::int64_t c = 0; c < C; ++c) probs[b * C + c] = static_cast<T>(std::exp(zr[c] - lse));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  const int iz = logits.id();
  return tape.Record(
      BasicTensor<T>::Scalar(static_cast<T>(loss / static_cast<double>(B))), {iz},
      [iz, B, C, on, off, probs = std::move(probs), ys = std::move(ys)](Tape<T>& t,
                                                                        int self) {
        const T g = static_cast<T>(t.grad(self)->item() / static_cast<double>(B));
        T* dz = t.GradFor(iz).raw();
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t c = 0; c < C; ++c) {
            const T target = static_cast<T>(c == ys[static_cast<size_t>(b)] ? on : off);
            dz[b * C + c] += g * (probs[b * C + c] - target);
          }
        }
      });
}

#define PCSR_INSTANTIATE_OPS(T)                                               \
  template Var<T> MatMul(const Var<T>&, const Var<T>&);                       \
  template Var<T> BatchMatMul(const Var<T>&, const Var<T>&, bool);            \
  template Var<T> Linear(const Var<T>&, const Var<T>&, const Var<T>&);        \
  template Var<T> Add(const Var<T>&, const Var<T>&);                          \
  template Var<T> AddBroadcast(const Var<T>&, const Var<T>&);                 \
  template Var<T> MulScalar(const Var<T>&, T);                                \
  template Var<T> ScaleShift(const Var<T>&, const Var<T>&, const Var<T>&);    \
  template Var<T> Softmax(const Var<T>&, int);                                \
  template Var<T> LayerNorm(const Var<T>&, const Var<T>&, const Var<T>&, T);  \
  template Var<T> Gelu(const Var<T>&);                                        \
  template Var<T> Reshape(const Var<T>&, Shape);                              \
  template Var<T> Permute0213(const Var<T>&);                                 \
  template Var<T> Slice(const Var<T>&, int, std::int64_t, std::int64_t);      \
  template Var<T> PrependToken(const Var<T>&, const Var<T>&);                 \
  template Var<T> MeanAxis(const Var<T>&, int);                               \
  template Var<T> MaxAxis(const Var<T>&, int);                                \
  template Var<T> Sum(const Var<T>&);                                         \
  template Var<T> Mean(const Var<T>&);                                        \
  template Var<T> CosineSimilarity(const Var<T>&, std::int64_t*);             \
  template Var<T> EntropyFromLogits(const Var<T>&);                           \
  template Var<T> MaskedMean(const Var<T>&, std::span<const std::uint8_t>);   \
  template Var<T> CrossEntropy(const Var<T>&, std::span<const int>, double);

PCSR_INSTANTIATE_OPS(float)
PCSR_INSTANTIATE_OPS(double)

#undef PCSR_INSTANTIATE_OPS

}  // namespace ad
}  // namespace pcsr
