/* Copyright 2026 The NormLab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License. */
#include "normlab/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace normlab {

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr std::array<std::string_view, 26> kOps = {
    "add",      "sub",         "mul",        "div",       "add_scalar", "scale",
    "relu",     "sigmoid",     "tanh",       "sqrt",      "softplus",   "sum",
    "mean",     "max",         "reshape",    "concat",    "matmul",     "linear",
    "conv2d",   "max_pool2d",  "space_to_depth", "embedding",  "set_mean",  "set_broadcast",
    "set_normalize", "softmax_xent",
};

Tensor finish(const char* op, Shape shape, Buffer data) {
  check_finite(data, std::string("output of ") + op);
  return Tensor::from_buffer(std::move(shape), std::move(data));
}

bool wants(const Impl& impl) { return impl && impl->requires_grad; }

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> ext{};
  std::array<std::size_t, 4> astride{};
  std::array<std::size_t, 4> bstride{};
};

std::array<std::size_t, 4> pad4(const Shape& s) {
  std::array<std::size_t, 4> r{1, 1, 1, 1};
  std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
  return r;
}

std::array<std::size_t, 4> strides4(const std::array<std::size_t, 4>& e) {
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = acc;
    acc *= e[i];
  }
  return st;
}

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Broadcast bc;
  bc.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      bc.out[i] = a[i];
    } else if (a[i] == 1) {
      bc.out[i] = b[i];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  auto ea = pad4(a), eb = pad4(b);
  bc.ext = pad4(bc.out);
  auto sa = strides4(ea), sb = strides4(eb);
  for (int i = 0; i < 4; ++i) {
    bc.astride[i] = ea[i] == 1 ? 0 : sa[i];
    bc.bstride[i] = eb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const auto& e = bc.ext;
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < e[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < e[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < e[2]; ++i2) {
        std::size_t ai = i0 * bc.astride[0] + i1 * bc.astride[1] + i2 * bc.astride[2];
        std::size_t bi = i0 * bc.bstride[0] + i1 * bc.bstride[1] + i2 * bc.bstride[2];
        for (std::size_t i3 = 0; i3 < e[3]; ++i3, ++o) {
          f(o, ai + i3 * bc.astride[3], bi + i3 * bc.bstride[3]);
        }
      }
    }
  }
}

enum class Binary { Add, Sub, Mul, Div };

Tensor binary(Binary kind, const char* op, const Tensor& a, const Tensor& b) {
  auto bc = broadcast(op, a.shape(), b.shape());
  auto ad = a.data();
  auto bd = b.data();
  if (kind == Binary::Div) {
    for (double v : bd) {
      if (v == 0.0) throw NumericalError("div: divisor contains zero");
    }
  }
  Buffer out(shape_numel(bc.out));
  switch (kind) {
    case Binary::Add:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] + bd[j]; });
      break;
    case Binary::Sub:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] - bd[j]; });
      break;
    case Binary::Mul:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] * bd[j]; });
      break;
    case Binary::Div:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] / bd[j]; });
      break;
  }
  Tensor result = finish(op, bc.out, std::move(out));
  if (should_record({&a, &b})) {
    Impl ai = a.impl(), bi = b.impl();
    Tape::current().record(op, result, [=](std::span<const double> g) {
      const bool ga = wants(ai), gb = wants(bi);
      std::span<double> da = ga ? ai->grad_buffer() : std::span<double>{};
      std::span<double> db = gb ? bi->grad_buffer() : std::span<double>{};
      const auto& av = ai->data;
      const auto& bv = bi->data;
      switch (kind) {
        case Binary::Add:
          if (ga) for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t) { da[i] += g[o]; });
          if (gb) for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t j) { db[j] += g[o]; });
          break;
        case Binary::Sub:
          if (ga) for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t) { da[i] += g[o]; });
          if (gb) for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t j) { db[j] -= g[o]; });
          break;
        case Binary::Mul:
          if (ga) for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { da[i] += g[o] * bv[j]; });
          if (gb) for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { db[j] += g[o] * av[i]; });
          break;
        case Binary::Div:
          if (ga) for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { da[i] += g[o] / bv[j]; });
          if (gb) {
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
              db[j] -= g[o] * av[i] / (bv[j] * bv[j]);
            });
          }
          break;
      }
    });
  }
  return result;
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  Tensor result = finish(op, x.shape(), std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    std::weak_ptr<detail::TensorImpl> wo = result.impl();
    Tape::current().record(op, result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      auto yo = wo.lock();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * deriv(xi->data[i], yo->data[i]);
    });
  }
  return result;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

// ---- reductions ---------------------------------------------------------

struct Reduction {
  Shape out;
  std::array<std::size_t, 4> ext{};
  std::array<std::size_t, 4> ostride{};  // 0 on reduced axes
  std::size_t count = 1;                 // elements per output
};

Reduction reduction(const char* op, const Shape& shape, const std::vector<std::size_t>& axes) {
  Reduction r;
  r.out = shape;
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(ax) + " invalid for shape " + shape_str(shape));
    }
    r.out[ax] = 1;
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (r.out[i] != shape[i]) r.count *= shape[i];
  }
  r.ext = pad4(shape);
  auto oe = pad4(r.out);
  auto os = strides4(oe);
  for (int i = 0; i < 4; ++i) r.ostride[i] = (oe[i] == 1 && r.ext[i] != 1) ? 0 : os[i];
  return r;
}

template <typename F>
void for_each_reduced(const Reduction& r, F&& f) {
  const auto& e = r.ext;
  std::size_t i = 0;
  for (std::size_t i0 = 0; i0 < e[0]; ++i0)
    for (std::size_t i1 = 0; i1 < e[1]; ++i1)
      for (std::size_t i2 = 0; i2 < e[2]; ++i2) {
        std::size_t o = i0 * r.ostride[0] + i1 * r.ostride[1] + i2 * r.ostride[2];
        for (std::size_t i3 = 0; i3 < e[3]; ++i3, ++i) f(i, o + i3 * r.ostride[3]);
      }
}

Tensor reduce_sum_like(const char* op, const Tensor& x, const std::vector<std::size_t>& axes, bool average) {
  auto r = reduction(op, x.shape(), axes);
  auto xd = x.data();
  Buffer out(shape_numel(r.out), 0.0);
  for_each_reduced(r, [&](std::size_t i, std::size_t o) { out[o] += xd[i]; });
  const double m = static_cast<double>(r.count);
  if (average) {
    for (auto& v : out) v /= m;
  }
  Tensor result = finish(op, r.out, std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    Tape::current().record(op, result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      for_each_reduced(r, [&](std::size_t i, std::size_t o) { dx[i] += average ? g[o] / m : g[o]; });
    });
  }
  return result;
}

void check_same_rank4(const char* op, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

std::span<const std::string_view> differentiable_ops() { return kOps; }

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Binary::Div, "div", a, b); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericalError("sqrt: argument must be positive, got " + std::to_string(v));
  }
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
               [](double v, double) { return stable_sigmoid(v); });
}

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce_sum_like("sum", x, axes, false); }
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce_sum_like("mean", x, axes, true); }

Tensor max(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto r = reduction("max", x.shape(), axes);
  auto xd = x.data();
  const std::size_t n_out = shape_numel(r.out);
  Buffer out(n_out, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(n_out, 0);
  std::vector<char> seen(n_out, 0);
  for_each_reduced(r, [&](std::size_t i, std::size_t o) {
    if (!seen[o] || xd[i] > out[o]) {
      out[o] = xd[i];
      arg[o] = i;
      seen[o] = 1;
    }
  });
  Tensor result = finish("max", r.out, std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    Tape::current().record("max", result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += g[o];
    });
  }
  return result;
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reshape(sum(x, axes), {1});
}

Tensor mean_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reshape(mean(x, axes), {1});
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xd = x.data();
  Tensor result = Tensor::from_buffer(shape, Buffer(xd.begin(), xd.end()));
  if (should_record({&x})) {
    Impl xi = x.impl();
    Tape::current().record("reshape", result, [=](std::span<const double> g) {
      if (wants(xi)) xi->accumulate_grad(g);
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t row = out_shape[axis] * inner;
  Buffer out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[axis] * inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + o * chunk, chunk, out.begin() + o * row + off);
    }
    off += chunk;
  }
  Tensor result = Tensor::from_buffer(out_shape, std::move(out));
  bool record = false;
  if (Tape::current().enabled()) {
    for (const auto& p : parts) record = record || p.requires_grad();
  }
  if (record) {
    std::vector<Impl> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::current().record("concat", result, [=](std::span<const double> g) {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (!wants(impls[k])) continue;
        auto d = impls[k]->grad_buffer();
        const std::size_t chunk = d.size() / outer;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += g[o * row + offsets[k] + i];
        }
      }
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MapMat(out.data(), m, n).noalias() = ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  Tensor result = finish("matmul", {m, n}, std::move(out));
  if (should_record({&a, &b})) {
    Impl ai = a.impl(), bi = b.impl();
    Tape::current().record("matmul", result, [=](std::span<const double> g) {
      ConstMapMat G(g.data(), m, n);
      if (wants(ai)) MapMat(ai->grad_buffer().data(), m, k).noalias() += G * ConstMapMat(bi->data.data(), k, n).transpose();
      if (wants(bi)) MapMat(bi->grad_buffer().data(), k, n).noalias() += ConstMapMat(ai->data.data(), m, k).transpose() * G;
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const auto n = x.dim(0), in = x.dim(1), outf = w.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(outf) + " outputs");
  }
  Buffer out(n * outf);
  MapMat Y(out.data(), n, outf);
  Y.noalias() = ConstMapMat(x.data().data(), n, in) * ConstMapMat(w.data().data(), outf, in).transpose();
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < outf; ++j) out[i * outf + j] += bd[j];
  }
  Tensor result = finish("linear", {n, outf}, std::move(out));
  if (should_record({&x, &w, &bias})) {
    Impl xi = x.impl(), wi = w.impl(), bi = bias.impl();
    Tape::current().record("linear", result, [=](std::span<const double> g) {
      ConstMapMat G(g.data(), n, outf);
      if (wants(xi)) MapMat(xi->grad_buffer().data(), n, in).noalias() += G * ConstMapMat(wi->data.data(), outf, in);
      if (wants(wi)) MapMat(wi->grad_buffer().data(), outf, in).noalias() += G.transpose() * ConstMapMat(xi->data.data(), n, in);
      if (wants(bi)) {
        auto db = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < outf; ++j) db[j] += g[i * outf + j];
      }
    });
  }
  return result;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t padding) {
  check_same_rank4("conv2d", x);
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  const auto N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin) {
    throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels, weight expects " + std::to_string(w.dim(1)));
  }
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than padded input");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias must have " + std::to_string(Cout) + " elements");
  }
  const auto Ho = H + 2 * padding - kh + 1, Wo = W + 2 * padding - kw + 1;
  const auto P = Ho * Wo, K = Cin * kh * kw, cols_w = N * P;

  // im2col over the whole batch: cols[K, N*P].
  auto cols = std::make_shared<Buffer>(K * cols_w, 0.0);
  auto xd = x.data();
  const long pad = static_cast<long>(padding);
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols->data() + ((ci * kh + ki) * kw + kj) * cols_w;
        for (std::size_t n = 0; n < N; ++n) {
          const double* plane = xd.data() + (n * Cin + ci) * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            long ih = static_cast<long>(oh + ki) - pad;
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            double* dst = row + n * P + oh * Wo;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              long iw = static_cast<long>(ow + kj) - pad;
              if (iw >= 0 && iw < static_cast<long>(W)) dst[ow] = plane[ih * W + iw];
            }
          }
        }
      }

  Buffer ymat(Cout * cols_w);
  MapMat(ymat.data(), Cout, cols_w).noalias() = ConstMapMat(w.data().data(), Cout, K) * ConstMapMat(cols->data(), K, cols_w);
  Buffer out(N * Cout * P);
  std::span<const double> bd = bias.defined() ? bias.data() : std::span<const double>{};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co) {
      const double b = bd.empty() ? 0.0 : bd[co];
      const double* src = ymat.data() + co * cols_w + n * P;
      double* dst = out.data() + (n * Cout + co) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }
  Tensor result = finish("conv2d", {N, Cout, Ho, Wo}, std::move(out));

  if (should_record({&x, &w, &bias})) {
    Impl xi = x.impl(), wi = w.impl(), bi = bias.impl();
    Tape::current().record("conv2d", result, [=](std::span<const double> g) {
      Buffer gmat(Cout * cols_w);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
          std::copy_n(g.data() + (n * Cout + co) * P, P, gmat.data() + co * cols_w + n * P);
      ConstMapMat G(gmat.data(), Cout, cols_w);
      if (wants(wi)) {
        MapMat(wi->grad_buffer().data(), Cout, K).noalias() += G * ConstMapMat(cols->data(), K, cols_w).transpose();
      }
      if (wants(bi)) {
        auto db = bi->grad_buffer();
        for (std::size_t co = 0; co < Cout; ++co) db[co] += G.row(co).sum();
      }
      if (wants(xi)) {
        Buffer dcols(K * cols_w);
        MapMat(dcols.data(), K, cols_w).noalias() = ConstMapMat(wi->data.data(), Cout, K).transpose() * G;
        auto dx = xi->grad_buffer();
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const double* row = dcols.data() + ((ci * kh + ki) * kw + kj) * cols_w;
              for (std::size_t n = 0; n < N; ++n) {
                double* plane = dx.data() + (n * Cin + ci) * H * W;
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                  long ih = static_cast<long>(oh + ki) - pad;
                  if (ih < 0 || ih >= static_cast<long>(H)) continue;
                  const double* src = row + n * P + oh * Wo;
                  for (std::size_t ow = 0; ow < Wo; ++ow) {
                    long iw = static_cast<long>(ow + kj) - pad;
                    if (iw >= 0 && iw < static_cast<long>(W)) plane[ih * W + iw] += src[ow];
                  }
                }
              }
            }
      }
    });
  }
  return result;
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  check_same_rank4("max_pool2d", x);
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " does not tile " + shape_str(x.shape()));
  }
  const auto Ho = H / window, Wo = W / window;
  auto xd = x.data();
  Buffer out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = nc * H * W + oh * window * W + ow * window;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            std::size_t idx = nc * H * W + (oh * window + i) * W + ow * window + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        std::size_t o = (nc * Ho + oh) * Wo + ow;
        out[o] = xd[best];
        arg[o] = best;
      }
  Tensor result = finish("max_pool2d", {N, C, Ho, Wo}, std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    Tape::current().record("max_pool2d", result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += g[o];
    });
  }
  return result;
}

Tensor space_to_depth(const Tensor& x, std::size_t block) {
  check_same_rank4("space_to_depth", x);
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (block == 0 || H % block != 0 || W % block != 0) {
    throw ShapeError("space_to_depth: block " + std::to_string(block) + " does not tile " + shape_str(x.shape()));
  }
  const auto Ho = H / block, Wo = W / block, Co = C * block * block;
  // src[o] is the input index feeding output index o.
  std::vector<std::size_t> src(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < block; ++i)
        for (std::size_t j = 0; j < block; ++j)
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::size_t co = (c * block + i) * block + j;
              src[((n * Co + co) * Ho + oh) * Wo + ow] = ((n * C + c) * H + oh * block + i) * W + ow * block + j;
            }
  auto xd = x.data();
  Buffer out(src.size());
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = xd[src[o]];
  Tensor result = finish("space_to_depth", {N, Co, Ho, Wo}, std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    Tape::current().record("space_to_depth", result, [=, src = std::move(src)](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      for (std::size_t o = 0; o < src.size(); ++o) dx[src[o]] += g[o];
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V,E], got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const auto V = table.dim(0), E = table.dim(1);
  auto td = table.data();
  Buffer out(ids.size() * E);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) {
      throw ShapeError("embedding: token " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    }
    std::copy_n(td.begin() + ids[i] * E, E, out.begin() + i * E);
  }
  Tensor result = Tensor::from_buffer({ids.size(), E}, std::move(out));
  if (should_record({&table})) {
    Impl ti = table.impl();
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    Tape::current().record("embedding", result, [=](std::span<const double> g) {
      auto dt = ti->grad_buffer();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t e = 0; e < E; ++e) dt[idv[i] * E + e] += g[i * E + e];
    });
  }
  return result;
}

namespace {

std::vector<std::size_t> set_counts(std::span<const std::size_t> plane_set, std::size_t num_sets) {
  std::vector<std::size_t> count(num_sets, 0);
  for (auto s : plane_set) {
    if (s >= num_sets) throw ShapeError("plane partition refers to set " + std::to_string(s));
    ++count[s];
  }
  for (auto c : count) {
    if (c == 0) throw ShapeError("plane partition contains an empty set");
  }
  return count;
}

void check_partition(const char* op, const Shape& shape, std::span<const std::size_t> plane_set) {
  if (shape.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(shape));
  if (plane_set.size() != shape[0] * shape[1]) {
    throw ShapeError(std::string(op) + ": partition covers " + std::to_string(plane_set.size()) +
                     " planes, tensor has " + std::to_string(shape[0] * shape[1]));
  }
}

}  // namespace

Tensor set_mean(const Tensor& x, std::span<const std::size_t> plane_set, std::size_t num_sets) {
  check_partition("set_mean", x.shape(), plane_set);
  auto count = set_counts(plane_set, num_sets);
  const std::size_t HW = x.dim(2) * x.dim(3);
  auto xd = x.data();
  Buffer out(num_sets, 0.0);
  for (std::size_t p = 0; p < plane_set.size(); ++p) {
    const double* src = xd.data() + p * HW;
    double& acc = out[plane_set[p]];
    for (std::size_t i = 0; i < HW; ++i) acc += src[i];
  }
  Buffer m(num_sets);
  for (std::size_t s = 0; s < num_sets; ++s) {
    m[s] = static_cast<double>(count[s] * HW);
    out[s] /= m[s];
  }
  Tensor result = finish("set_mean", {num_sets}, std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    std::vector<std::size_t> ps(plane_set.begin(), plane_set.end());
    Tape::current().record("set_mean", result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto dx = xi->grad_buffer();
      for (std::size_t p = 0; p < ps.size(); ++p) {
        const double v = g[ps[p]] / m[ps[p]];
        double* dst = dx.data() + p * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] += v;
      }
    });
  }
  return result;
}

Tensor set_normalize(const Tensor& x, std::span<const std::size_t> plane_set, std::size_t num_sets, double eps,
                     SetMoments* moments) {
  check_partition("set_normalize", x.shape(), plane_set);
  if (!(eps >= 0)) throw NumericalError("set_normalize: eps must be non-negative");
  auto count = set_counts(plane_set, num_sets);
  const std::size_t HW = x.dim(2) * x.dim(3);
  auto xd = x.data();
  Buffer mu(num_sets, 0.0), var(num_sets, 0.0), inv(num_sets), m(num_sets);
  for (std::size_t s = 0; s < num_sets; ++s) m[s] = static_cast<double>(count[s] * HW);
  for (std::size_t p = 0; p < plane_set.size(); ++p) {
    const double* src = xd.data() + p * HW;
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += src[i];
    mu[plane_set[p]] += acc;
  }
  for (std::size_t s = 0; s < num_sets; ++s) mu[s] /= m[s];
  for (std::size_t p = 0; p < plane_set.size(); ++p) {
    const double* src = xd.data() + p * HW;
    const double c = mu[plane_set[p]];
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += (src[i] - c) * (src[i] - c);
    var[plane_set[p]] += acc;
  }
  for (std::size_t s = 0; s < num_sets; ++s) {
    var[s] /= m[s];
    const double sigma = std::sqrt(var[s] + eps);
    if (!(sigma > 0)) throw NumericalError("set_normalize: zero variance with eps = 0");
    inv[s] = 1.0 / sigma;
  }
  Buffer out(xd.size());
  for (std::size_t p = 0; p < plane_set.size(); ++p) {
    const std::size_t s = plane_set[p];
    const double* src = xd.data() + p * HW;
    double* dst = out.data() + p * HW;
    for (std::size_t i = 0; i < HW; ++i) dst[i] = (src[i] - mu[s]) * inv[s];
  }
  if (moments) *moments = {{mu.begin(), mu.end()}, {var.begin(), var.end()}};
  Tensor result = finish("set_normalize", x.shape(), std::move(out));
  if (should_record({&x})) {
    Impl xi = x.impl();
    std::weak_ptr<detail::TensorImpl> wo = result.impl();
    std::vector<std::size_t> ps(plane_set.begin(), plane_set.end());
    // dx = (g - mean_S(g) - y * mean_S(g * y)) / sigma
    Tape::current().record("set_normalize", result, [=](std::span<const double> g) {
      if (!wants(xi)) return;
      auto yo = wo.lock();
      const auto& y = yo->data;
      Buffer gm(num_sets, 0.0), gym(num_sets, 0.0);
      for (std::size_t p = 0; p < ps.size(); ++p) {
        double a = 0.0, b = 0.0;
        for (std::size_t i = p * HW; i < (p + 1) * HW; ++i) {
          a += g[i];
          b += g[i] * y[i];
        }
        gm[ps[p]] += a;
        gym[ps[p]] += b;
      }
      for (std::size_t s = 0; s < num_sets; ++s) {
        gm[s] /= m[s];
        gym[s] /= m[s];
      }
      auto dx = xi->grad_buffer();
      for (std::size_t p = 0; p < ps.size(); ++p) {
        const std::size_t s = ps[p];
        for (std::size_t i = p * HW; i < (p + 1) * HW; ++i) dx[i] += (g[i] - gm[s] - y[i] * gym[s]) * inv[s];
      }
    });
  }
  return result;
}

Tensor set_broadcast(const Tensor& v, std::span<const std::size_t> plane_set, const Shape& shape) {
  check_partition("set_broadcast", shape, plane_set);
  const std::size_t num_sets = v.numel();
  set_counts(plane_set, num_sets);
  const std::size_t HW = shape[2] * shape[3];
  auto vd = v.data();
  Buffer out(shape_numel(shape));
  for (std::size_t p = 0; p < plane_set.size(); ++p) {
    std::fill_n(out.begin() + p * HW, HW, vd[plane_set[p]]);
  }
  Tensor result = Tensor::from_buffer(shape, std::move(out));
  if (should_record({&v})) {
    Impl vi = v.impl();
    std::vector<std::size_t> ps(plane_set.begin(), plane_set.end());
    Tape::current().record("set_broadcast", result, [=](std::span<const double> g) {
      if (!wants(vi)) return;
      auto dv = vi->grad_buffer();
      for (std::size_t p = 0; p < ps.size(); ++p) {
        double acc = 0.0;
        const double* src = g.data() + p * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += src[i];
        dv[ps[p]] += acc;
      }
    });
  }
  return result;
}

std::vector<double> softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: logits must be [N,A], got " + shape_str(logits.shape()));
  const auto N = logits.dim(0), A = logits.dim(1);
  auto ld = logits.data();
  std::vector<double> p(N * A);
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = ld.data() + i * A;
    const double mx = *std::max_element(row, row + A);
    double z = 0.0;
    for (std::size_t a = 0; a < A; ++a) z += (p[i * A + a] = std::exp(row[a] - mx));
    for (std::size_t a = 0; a < A; ++a) p[i * A + a] /= z;
  }
  return p;
}

Tensor softmax_xent(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_xent: logits must be [N,A], got " + shape_str(logits.shape()));
  const auto N = logits.dim(0), A = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  }
  for (auto l : labels) {
    if (l >= A) throw ShapeError("softmax_xent: label " + std::to_string(l) + " outside [0," + std::to_string(A) + ")");
  }
  auto ld = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = ld.data() + i * A;
    const double mx = *std::max_element(row, row + A);
    double z = 0.0;
    for (std::size_t a = 0; a < A; ++a) z += std::exp(row[a] - mx);
    loss += mx + std::log(z) - row[labels[i]];
  }
  Tensor result = finish("softmax_xent", {1}, {loss / static_cast<double>(N)});
  if (should_record({&logits})) {
    Impl li = logits.impl();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    Tape::current().record("softmax_xent", result, [=](std::span<const double> g) {
      auto p = softmax_rows(Tensor::from_buffer(li->shape, li->data));
      auto dl = li->grad_buffer();
      const double s = g[0] / static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i) {
        p[i * A + lab[i]] -= 1.0;
        for (std::size_t a = 0; a < A; ++a) dl[i * A + a] += s * p[i * A + a];
      }
    });
  }
  return result;
}

}  // namespace normlab
