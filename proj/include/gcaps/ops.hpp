#pragma once

#include <optional>

#include "gcaps/tensor.hpp"

namespace gcaps {

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Neg, Exp, Log, Sqrt, Square, Relu, Sigmoid };
enum class ReduceOp { Sum, Max, Mean };

/// Elementwise binary op with trailing-dimension broadcasting: aligned from
/// the right, two dimensions match if equal or if one of them is 1.
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& a);

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]; leading
/// dimensions broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// input [batch, c_in, h, w], kernel [c_out, c_in, kh, kw], optional bias [c_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params = {},
              const std::optional<Tensor>& bias = std::nullopt);

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Max routes the gradient to the first maximal entry along the axis.
Tensor reduce(ReduceOp op, const Tensor& t, int axis, bool keepdim = false);
Tensor sum(const Tensor& t, int axis, bool keepdim = false);
Tensor max(const Tensor& t, int axis, bool keepdim = false);
Tensor mean(const Tensor& t, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

/// Max-subtracted softmax along one axis. Throws NonFiniteError on NaN/inf.
Tensor softmax_along(const Tensor& t, int axis);

/// Euclidean norm along an axis; the gradient at a zero vector is zero.
Tensor norm_along(const Tensor& t, int axis, bool keepdim = false);

Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<std::size_t>& dims);
Tensor narrow(const Tensor& t, int axis, std::size_t start, std::size_t length);

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape);

bool all_finite(const Tensor& t);

}  // namespace gcaps
