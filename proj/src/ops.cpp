#include "gcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gemm.hpp"
#include "grad_sink.hpp"

namespace gcaps {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

using detail::grad_sink;

Shape contiguous_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

// Strides of `shape` (right-aligned into `rank` dims) with zero stride on
// broadcast dimensions of size 1.
Shape broadcast_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  Shape strides(rank, 0);
  const Shape own = contiguous_strides(shape);
  const std::size_t offset = rank - shape.size();
  for (std::size_t d = 0; d < shape.size(); ++d) {
    strides[offset + d] = shape[d] == 1 ? 0 : own[d];
  }
  return strides;
}

// Visits every flat index of `out`, passing the matching offsets into two
// broadcast operands.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    f(flat, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

}  // namespace

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("invalid axis " + std::to_string(axis) + " for shape " + to_string(shape));
  }
  return static_cast<std::size_t>(a);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto& av = a.impl()->values;
  const auto& bv = b.impl()->values;
  std::vector<double> out(numel(out_shape));

  auto apply = [op](double x, double y) {
    switch (op) {
      case BinaryOp::Add: return x + y;
      case BinaryOp::Sub: return x - y;
      case BinaryOp::Mul: return x * y;
      case BinaryOp::Div: return x / y;
    }
    return 0.0;
  };

  const bool same = a.shape() == b.shape();
  const Shape sa = broadcast_strides(a.shape(), out_shape);
  const Shape sb = broadcast_strides(b.shape(), out_shape);
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t f, std::size_t oa, std::size_t ob) { out[f] = apply(av[oa], bv[ob]); });
  }

  ImplPtr ia = a.impl();
  ImplPtr ib = b.impl();
  return detail::make_result(
      out_shape, std::move(out), {a, b}, "elementwise",
      [op, ia, ib, same, sa, sb, out_shape](const TensorImpl& res) {
        const auto& g = res.pending;
        auto ga = grad_sink(ia);
        auto gb = grad_sink(ib);
        const auto& x = ia->values;
        const auto& y = ib->values;
        auto step = [&](std::size_t f, std::size_t oa, std::size_t ob) {
          switch (op) {
            case BinaryOp::Add:
              if (!ga.empty()) ga[oa] += g[f];
              if (!gb.empty()) gb[ob] += g[f];
              break;
            case BinaryOp::Sub:
              if (!ga.empty()) ga[oa] += g[f];
              if (!gb.empty()) gb[ob] -= g[f];
              break;
            case BinaryOp::Mul:
              if (!ga.empty()) ga[oa] += g[f] * y[ob];
              if (!gb.empty()) gb[ob] += g[f] * x[oa];
              break;
            case BinaryOp::Div:
              if (!ga.empty()) ga[oa] += g[f] / y[ob];
              if (!gb.empty()) gb[ob] -= g[f] * x[oa] / (y[ob] * y[ob]);
              break;
          }
        };
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
        } else {
          for_each_broadcast(out_shape, sa, sb, step);
        }
      });
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  const auto& x = a.impl()->values;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (op) {
      case UnaryOp::Neg: out[i] = -x[i]; break;
      case UnaryOp::Exp: out[i] = std::exp(x[i]); break;
      case UnaryOp::Log: out[i] = std::log(x[i]); break;
      case UnaryOp::Sqrt: out[i] = std::sqrt(x[i]); break;
      case UnaryOp::Square: out[i] = x[i] * x[i]; break;
      case UnaryOp::Relu: out[i] = x[i] > 0.0 ? x[i] : 0.0; break;
      case UnaryOp::Sigmoid: out[i] = 1.0 / (1.0 + std::exp(-x[i])); break;
    }
  }
  ImplPtr ia = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "unary", [op, ia](const TensorImpl& res) {
    auto ga = grad_sink(ia);
    if (ga.empty()) return;
    const auto& g = res.pending;
    const auto& y = res.values;
    const auto& x = ia->values;
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (op) {
        case UnaryOp::Neg: ga[i] -= g[i]; break;
        case UnaryOp::Exp: ga[i] += g[i] * y[i]; break;
        case UnaryOp::Log: ga[i] += g[i] / x[i]; break;
        case UnaryOp::Sqrt: ga[i] += g[i] * 0.5 / y[i]; break;
        case UnaryOp::Square: ga[i] += g[i] * 2.0 * x[i]; break;
        case UnaryOp::Relu: ga[i] += x[i] > 0.0 ? g[i] : 0.0; break;
        case UnaryOp::Sigmoid: ga[i] += g[i] * y[i] * (1.0 - y[i]); break;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Div, a, b); }
Tensor neg(const Tensor& a) { return elementwise(UnaryOp::Neg, a); }
Tensor exp(const Tensor& a) { return elementwise(UnaryOp::Exp, a); }
Tensor log(const Tensor& a) { return elementwise(UnaryOp::Log, a); }
Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::Sqrt, a); }
Tensor square(const Tensor& a) { return elementwise(UnaryOp::Square, a); }
Tensor relu(const Tensor& a) { return elementwise(UnaryOp::Relu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::Sigmoid, a); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  ImplPtr ia = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "scale", [ia, factor](const TensorImpl& res) {
    auto ga = grad_sink(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * res.pending[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += value;
  ImplPtr ia = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "add_scalar", [ia](const TensorImpl& res) {
    auto ga = grad_sink(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += res.pending[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shape(lead_a.empty() ? Shape{1} : lead_a, lead_b.empty() ? Shape{1} : lead_b);
  if (lead_a.empty() && lead_b.empty()) batch.clear();

  // Matrix offsets (in units of whole matrices) for every batch entry.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (batch.empty()) {
    pairs.emplace_back(0, 0);
  } else {
    const Shape sa = broadcast_strides(lead_a.empty() ? Shape{1} : lead_a, batch);
    const Shape sb = broadcast_strides(lead_b.empty() ? Shape{1} : lead_b, batch);
    for_each_broadcast(batch, sa, sb, [&](std::size_t, std::size_t oa, std::size_t ob) { pairs.emplace_back(oa, ob); });
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(numel(out_shape), 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    detail::gemm(false, false, m, n, k, 1.0, av + pairs[p].first * m * k, k, bv + pairs[p].second * k * n, n, 0.0,
                 out.data() + p * m * n, n);
  }

  ImplPtr ia = a.impl();
  ImplPtr ib = b.impl();
  return detail::make_result(out_shape, std::move(out), {a, b}, "matmul",
                             [ia, ib, pairs, m, n, k](const TensorImpl& res) {
                               auto ga = grad_sink(ia);
                               auto gb = grad_sink(ib);
                               const double* g = res.pending.data();
                               for (std::size_t p = 0; p < pairs.size(); ++p) {
                                 const double* gp = g + p * m * n;
                                 if (!ga.empty()) {
                                   // dA = G * B^T
                                   detail::gemm(false, true, m, k, n, 1.0, gp, n, ib->values.data() + pairs[p].second * k * n,
                                                n, 1.0, ga.data() + pairs[p].first * m * k, k);
                                 }
                                 if (!gb.empty()) {
                                   // dB = A^T * G
                                   detail::gemm(true, false, k, n, m, 1.0, ia->values.data() + pairs[p].first * m * k, k, gp,
                                                n, 1.0, gb.data() + pairs[p].second * k * n, n);
                                 }
                               }
                             });
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("conv stride must be positive");
  if (kernel > in + 2 * padding) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, oh, ow, stride, padding;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// Unrolls images [first, first + count) into columns: row = (c, ky, kx),
// column = (image - first, oy, ox).
void im2col(const ConvGeometry& g, const double* input, std::size_t first, std::size_t count, double* col) {
  const std::size_t P = g.positions();
  const std::size_t row_len = count * P;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * row_len;
        for (std::size_t img = 0; img < count; ++img) {
          const double* plane = input + ((first + img) * g.c_in + c) * g.h * g.w;
          double* dst = row + img * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
              dst[oy * g.ow + ox] = inside ? plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, std::size_t first, std::size_t count, double* input_grad) {
  const std::size_t P = g.positions();
  const std::size_t row_len = count * P;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * row_len;
        for (std::size_t img = 0; img < count; ++img) {
          double* plane = input_grad + ((first + img) * g.c_in + c) * g.h * g.w;
          const double* src = row + img * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

// Images per im2col chunk; caps the column buffer at ~8M doubles.
std::size_t conv_chunk(const ConvGeometry& g) {
  const std::size_t per_image = g.patch() * g.positions();
  return std::clamp<std::size_t>((std::size_t{8} << 20) / std::max<std::size_t>(per_image, 1), 1, g.batch);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params, const std::optional<Tensor>& bias) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects input [batch,c,h,w] and kernel [c_out,c_in,kh,kw], got " +
                     to_string(input.shape()) + " and " + to_string(kernel.shape()));
  }
  ConvGeometry g{};
  g.batch = input.shape()[0];
  g.c_in = input.shape()[1];
  g.h = input.shape()[2];
  g.w = input.shape()[3];
  g.c_out = kernel.shape()[0];
  g.kh = kernel.shape()[2];
  g.kw = kernel.shape()[3];
  g.stride = params.stride;
  g.padding = params.padding;
  if (kernel.shape()[1] != g.c_in) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + ", kernel " +
                     to_string(kernel.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->shape()[0] != g.c_out)) {
    throw ShapeError("conv2d bias must be [" + std::to_string(g.c_out) + "], got " + to_string(bias->shape()));
  }
  g.oh = conv_output_size(g.h, g.kh, g.stride, g.padding);
  g.ow = conv_output_size(g.w, g.kw, g.stride, g.padding);

  const std::size_t P = g.positions();
  const std::size_t K = g.patch();
  const std::size_t chunk = conv_chunk(g);
  std::vector<double> out(g.batch * g.c_out * P);
  std::vector<double> col(K * chunk * P);
  std::vector<double> tmp(g.c_out * chunk * P);
  const double* in = input.values().data();
  const double* ker = kernel.values().data();
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    im2col(g, in, first, count, col.data());
    detail::gemm(false, false, g.c_out, count * P, K, 1.0, ker, K, col.data(), count * P, 0.0, tmp.data(), count * P);
    for (std::size_t img = 0; img < count; ++img) {
      for (std::size_t o = 0; o < g.c_out; ++o) {
        const double b = bias ? bias->values()[o] : 0.0;
        const double* src = tmp.data() + o * count * P + img * P;
        double* dst = out.data() + ((first + img) * g.c_out + o) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    }
  }

  ImplPtr ii = input.impl();
  ImplPtr ik = kernel.impl();
  ImplPtr ib = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return detail::make_result({g.batch, g.c_out, g.oh, g.ow}, std::move(out), inputs, "conv2d",
                             [g, ii, ik, ib, chunk](const TensorImpl& res) {
                               const std::size_t P = g.positions();
                               const std::size_t K = g.patch();
                               auto gi = grad_sink(ii);
                               auto gk = grad_sink(ik);
                               std::span<double> gbias = ib ? grad_sink(ib) : std::span<double>{};
                               const double* gout = res.pending.data();
                               if (!gbias.empty()) {
                                 for (std::size_t n = 0; n < g.batch; ++n) {
                                   for (std::size_t o = 0; o < g.c_out; ++o) {
                                     const double* src = gout + (n * g.c_out + o) * P;
                                     double acc = 0.0;
                                     for (std::size_t p = 0; p < P; ++p) acc += src[p];
                                     gbias[o] += acc;
                                   }
                                 }
                               }
                               if (gi.empty() && gk.empty()) return;
                               std::vector<double> col(K * chunk * P);
                               std::vector<double> gtmp(g.c_out * chunk * P);
                               for (std::size_t first = 0; first < g.batch; first += chunk) {
                                 const std::size_t count = std::min(chunk, g.batch - first);
                                 const std::size_t cols = count * P;
                                 for (std::size_t img = 0; img < count; ++img) {
                                   for (std::size_t o = 0; o < g.c_out; ++o) {
                                     const double* src = gout + ((first + img) * g.c_out + o) * P;
                                     std::copy(src, src + P, gtmp.data() + o * cols + img * P);
                                   }
                                 }
                                 if (!gk.empty()) {
                                   im2col(g, ii->values.data(), first, count, col.data());
                                   // dK += G [c_out, cols] * col^T [cols, K]
                                   detail::gemm(false, true, g.c_out, K, cols, 1.0, gtmp.data(), cols, col.data(), cols,
                                                1.0, gk.data(), K);
                                 }
                                 if (!gi.empty()) {
                                   // dcol = K^T [K, c_out] * G [c_out, cols]
                                   detail::gemm(true, false, K, cols, g.c_out, 1.0, ik->values.data(), K, gtmp.data(),
                                                cols, 0.0, col.data(), cols);
                                   col2im(g, col.data(), first, count, gi.data());
                                 }
                               }
                             });
}

Tensor reduce(ReduceOp op, const Tensor& t, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, t.rank(), t.shape());
  const AxisSplit s = split_at(t.shape(), ax);
  const auto& x = t.impl()->values;
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::Max) argmax.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double acc = op == ReduceOp::Max ? x[base] : 0.0;
      std::size_t best = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = x[base + e * s.inner];
        if (op == ReduceOp::Max) {
          if (v > acc) {
            acc = v;
            best = e;
          }
        } else {
          acc += v;
        }
      }
      if (op == ReduceOp::Mean) acc /= static_cast<double>(s.extent);
      out[o * s.inner + i] = acc;
      if (op == ReduceOp::Max) argmax[o * s.inner + i] = best;
    }
  }
  ImplPtr ia = t.impl();
  return detail::make_result(reduced_shape(t.shape(), ax, keepdim), std::move(out), {t}, "reduce",
                             [op, ia, s, argmax = std::move(argmax)](const TensorImpl& res) {
                               auto ga = grad_sink(ia);
                               if (ga.empty()) return;
                               const double w = op == ReduceOp::Mean ? 1.0 / static_cast<double>(s.extent) : 1.0;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   const std::size_t r = o * s.inner + i;
                                   const std::size_t base = o * s.extent * s.inner + i;
                                   const double g = res.pending[r];
                                   if (op == ReduceOp::Max) {
                                     ga[base + argmax[r] * s.inner] += g;
                                   } else {
                                     for (std::size_t e = 0; e < s.extent; ++e) ga[base + e * s.inner] += g * w;
                                   }
                                 }
                               }
                             });
}

Tensor sum(const Tensor& t, int axis, bool keepdim) { return reduce(ReduceOp::Sum, t, axis, keepdim); }
Tensor max(const Tensor& t, int axis, bool keepdim) { return reduce(ReduceOp::Max, t, axis, keepdim); }
Tensor mean(const Tensor& t, int axis, bool keepdim) { return reduce(ReduceOp::Mean, t, axis, keepdim); }

Tensor sum_all(const Tensor& t) { return sum(reshape(t, {t.size()}), 0); }

Tensor mean_all(const Tensor& t) { return mean(reshape(t, {t.size()}), 0); }

Tensor softmax_along(const Tensor& t, int axis) {
  const std::size_t ax = normalize_axis(axis, t.rank(), t.shape());
  if (!all_finite(t)) throw NonFiniteError("softmax_along: non-finite input of shape " + to_string(t.shape()));
  const AxisSplit s = split_at(t.shape(), ax);
  const auto& x = t.impl()->values;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double top = x[base];
      for (std::size_t e = 1; e < s.extent; ++e) top = std::max(top, x[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(x[base + e * s.inner] - top);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  ImplPtr ia = t.impl();
  return detail::make_result(t.shape(), std::move(out), {t}, "softmax", [ia, s](const TensorImpl& res) {
    auto ga = grad_sink(ia);
    if (ga.empty()) return;
    const auto& y = res.values;
    const auto& g = res.pending;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += y[base + e * s.inner] * g[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Tensor norm_along(const Tensor& t, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, t.rank(), t.shape());
  const AxisSplit s = split_at(t.shape(), ax);
  const auto& x = t.impl()->values;
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double acc = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) acc += x[base + e * s.inner] * x[base + e * s.inner];
      out[o * s.inner + i] = std::sqrt(acc);
    }
  }
  ImplPtr ia = t.impl();
  return detail::make_result(reduced_shape(t.shape(), ax, keepdim), std::move(out), {t}, "norm",
                             [ia, s](const TensorImpl& res) {
                               auto ga = grad_sink(ia);
                               if (ga.empty()) return;
                               const auto& x = ia->values;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   const std::size_t r = o * s.inner + i;
                                   const double n = res.values[r];
                                   if (n == 0.0) continue;
                                   const double w = res.pending[r] / n;
                                   const std::size_t base = o * s.extent * s.inner + i;
                                   for (std::size_t e = 0; e < s.extent; ++e) ga[base + e * s.inner] += w * x[base + e * s.inner];
                                 }
                               }
                             });
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw ShapeError("cannot reshape " + to_string(t.shape()) + " into " + to_string(shape));
  }
  ImplPtr ia = t.impl();
  std::vector<double> out(t.values().begin(), t.values().end());
  return detail::make_result(std::move(shape), std::move(out), {t}, "reshape", [ia](const TensorImpl& res) {
    auto ga = grad_sink(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += res.pending[i];
  });
}

Tensor permute(const Tensor& t, const std::vector<std::size_t>& dims) {
  const std::size_t rank = t.rank();
  if (dims.size() != rank) throw ShapeError("permute needs " + std::to_string(rank) + " axes for " + to_string(t.shape()));
  std::vector<bool> seen(rank, false);
  for (auto d : dims) {
    if (d >= rank || seen[d]) throw ShapeError("permute axes are not a permutation of " + to_string(t.shape()));
    seen[d] = true;
  }
  Shape out_shape(rank);
  const Shape in_strides = contiguous_strides(t.shape());
  Shape src_strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = t.shape()[dims[d]];
    src_strides[d] = in_strides[dims[d]];
  }
  // For each output flat index, the source flat index.
  std::vector<std::size_t> source(t.size());
  const Shape zero(rank, 0);
  for_each_broadcast(out_shape, src_strides, zero,
                     [&](std::size_t f, std::size_t src, std::size_t) { source[f] = src; });
  std::vector<double> out(t.size());
  const auto& x = t.impl()->values;
  for (std::size_t f = 0; f < out.size(); ++f) out[f] = x[source[f]];
  ImplPtr ia = t.impl();
  return detail::make_result(out_shape, std::move(out), {t}, "permute",
                             [ia, source = std::move(source)](const TensorImpl& res) {
                               auto ga = grad_sink(ia);
                               if (ga.empty()) return;
                               for (std::size_t f = 0; f < source.size(); ++f) ga[source[f]] += res.pending[f];
                             });
}

Tensor narrow(const Tensor& t, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, t.rank(), t.shape());
  const AxisSplit s = split_at(t.shape(), ax);
  if (length == 0 || start + length > s.extent) {
    throw ShapeError("narrow [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + to_string(t.shape()));
  }
  Shape out_shape = t.shape();
  out_shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto& x = t.impl()->values;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  ImplPtr ia = t.impl();
  return detail::make_result(out_shape, std::move(out), {t}, "narrow",
                             [ia, s, start, length](const TensorImpl& res) {
                               auto ga = grad_sink(ia);
                               if (ga.empty()) return;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 const double* src = res.pending.data() + o * length * s.inner;
                                 double* dst = ga.data() + (o * s.extent + start) * s.inner;
                                 for (std::size_t k = 0; k < length * s.inner; ++k) dst[k] += src[k];
                               }
                             });
}

bool all_finite(const Tensor& t) {
  const auto v = t.values();
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace gcaps
