#pragma once

#include <memory>
#include <span>

#include "gcaps/tensor.hpp"

namespace gcaps::detail {

// Pending-gradient buffer of an op input, or an empty span when the input
// does not take part in differentiation.
inline std::span<double> grad_sink(const std::shared_ptr<TensorImpl>& in) {
  if (!in || !in->requires_grad) return {};
  return in->pending_grad();
}

}  // namespace gcaps::detail
