#pragma once

#include <optional>
#include <span>
#include <vector>

#include "gcaps/tensor.hpp"

namespace gcaps {

/// Contiguous partition of the lower-capsule index into capsule types.
class TypePartition {
 public:
  struct Group {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
  };

  TypePartition() = default;
  explicit TypePartition(std::vector<Group> groups) : groups_(std::move(groups)) {}

  static TypePartition uniform(std::size_t num_types, std::size_t caps_per_type);

  /// Throws std::invalid_argument unless the groups tile [0, num_lower) in order.
  void validate(std::size_t num_lower) const;

  const std::vector<Group>& groups() const { return groups_; }
  std::size_t size() const { return groups_.size(); }

 private:
  std::vector<Group> groups_;
};

/// Shape metadata of a routed capsule layer. The reference layer routes
/// 32 types x 36 positions = 1152 8-d capsules into 10 16-d capsules.
struct CapsLayerSpec {
  std::size_t num_lower = 1152;
  std::size_t num_upper = 10;
  std::size_t dim_lower = 8;
  std::size_t dim_upper = 16;
  std::size_t num_types = 32;
  std::size_t caps_per_type = 36;

  void validate() const;
  TypePartition partition() const { return TypePartition::uniform(num_types, caps_per_type); }
};

/// Which index the routing softmax normalizes over.
enum class AxisMode {
  UpperPerLower,  // c_ij = exp(b_ij) / sum_k exp(b_ik)
  LowerPerUpper,  // c_ij = exp(b_ij) / sum_k exp(b_kj)
};

struct PredictionTensor {
  Tensor u_hat;  // [batch, num_lower, num_upper, dim_upper]
};

struct LogitMatrix {
  Tensor b;  // [batch, num_lower, num_upper]
};

struct CouplingMatrix {
  Tensor c;  // [batch, num_lower, num_upper]
  AxisMode axis_mode = AxisMode::UpperPerLower;
};

/// v = |s|^2 / (1 + |s|^2) * s / (|s| + 1e-9) along `axis`.
Tensor squash(const Tensor& s, int axis);

inline constexpr double kSquashEpsilon = 1e-9;

/// u [batch, num_lower, dim_lower], W [num_lower, num_upper, dim_upper, dim_lower].
PredictionTensor predict(const Tensor& u, const Tensor& weights);

LogitMatrix zero_logits(std::size_t batch, std::size_t num_lower, std::size_t num_upper);

/// Routing softmax. With LowerPerUpper and a partition, each type group is
/// normalized independently; UpperPerLower ignores the partition beyond
/// validating it.
CouplingMatrix coupling_from_logits(const LogitMatrix& logits, AxisMode mode,
                                    const std::optional<TypePartition>& partition = std::nullopt);

/// s_j = sum_i c_ij u_hat_j|i, optionally restricted to one group of lower capsules.
Tensor weighted_sum(const CouplingMatrix& coupling, const PredictionTensor& prediction,
                    std::optional<TypePartition::Group> subset = std::nullopt);

/// Per-group weighted sums stacked as [batch, num_groups, num_upper, dim_upper].
Tensor grouped_weighted_sum(const CouplingMatrix& coupling, const PredictionTensor& prediction,
                            const TypePartition& partition);

/// b_ij + <u_hat_j|i, v_j> for every lower capsule i.
LogitMatrix agreement_update(const LogitMatrix& logits, const PredictionTensor& prediction, const Tensor& v);

struct MarginParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
};

inline constexpr double kReconstructionWeight = 0.0005;

/// Batch-mean margin loss over capsule lengths [batch, classes].
Tensor margin_loss(const Tensor& lengths, const Tensor& one_hot_labels, MarginParams params = {});

/// Batch-mean of per-image summed squared error.
Tensor reconstruction_loss(const Tensor& decoded, const Tensor& target);

Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

/// Throws std::invalid_argument unless every row of [batch, classes] holds a single 1.
void require_one_hot(const Tensor& labels);

}  // namespace gcaps
