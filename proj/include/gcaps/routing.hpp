#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gcaps/capsule_ops.hpp"

namespace gcaps {

enum class Grouping { Ungrouped, ByType };

/// Selects one of the four dynamic-routing variants:
///   alg1 = (UpperPerLower, Ungrouped)   original routing
///   alg2 = (LowerPerUpper, Ungrouped)   transposed routing softmax
///   alg3 = (UpperPerLower, ByType)      grouped routing
///   alg4 = (LowerPerUpper, ByType)      grouped routing, transposed softmax
struct RoutingConfig {
  AxisMode softmax_axis = AxisMode::UpperPerLower;
  Grouping grouping = Grouping::Ungrouped;
  int iterations = 3;

  static RoutingConfig algorithm(int number, int iterations = 3);
  /// Accepts "alg1".."alg4" (also "1".."4").
  static RoutingConfig parse(std::string_view name, int iterations = 3);

  int algorithm_number() const;
  std::string name() const;         // alg1..alg4
  std::string curve_label() const;  // b, bc, o, oc
  std::string model_name() const;   // CapsNet, CapsNet-c, OurNet, OurNet-c
  bool grouped() const { return grouping == Grouping::ByType; }

  void validate() const;

  friend bool operator==(const RoutingConfig&, const RoutingConfig&) = default;
};

struct RoutingSnapshot {
  Tensor b;                           // logits entering this iteration
  Tensor c;                           // couplings computed from them
  std::optional<Tensor> v_per_type;   // [batch, types, upper, dim], grouped modes only
  Tensor v;                           // [batch, upper, dim]
  double mean_abs_dc = 0.0;           // against the previous iteration; 0 at iteration 0
  double max_abs_dc = 0.0;
};

struct RoutingTrace {
  RoutingConfig config;
  std::vector<RoutingSnapshot> iterations;
};

struct RouteResult {
  Tensor v;                          // [batch, num_upper, dim_upper]
  std::optional<Tensor> v_per_type;  // final-iteration per-type capsules (grouped modes)
  std::optional<RoutingTrace> trace;
};

/// Differentiable routing-by-agreement. Gradients flow through every
/// iteration, including the coupling softmax.
RouteResult route(const PredictionTensor& prediction, const CapsLayerSpec& spec, const RoutingConfig& config,
                  bool capture_trace = false);

/// Loop-only implementation of the same contract, used as a test oracle.
/// Intended for small layers (num_lower <= 64).
Tensor route_reference(const PredictionTensor& prediction, const CapsLayerSpec& spec, const RoutingConfig& config);

/// 1 / (size of the normalization group) at zero logits.
double initial_coupling(const CapsLayerSpec& spec, const RoutingConfig& config);

struct IterationChange {
  int iteration = 0;
  double mean_abs_dc = 0.0;
  double max_abs_dc = 0.0;
  double mean_rel_dc = 0.0;  // mean |dc| / c0
};

struct RateOfChangeReport {
  double c0 = 0.0;
  std::vector<IterationChange> per_iteration;  // iterations 1..r-1

  double mean_abs_dc() const;  // averaged over iterations
};

/// Per-iteration coupling change statistics; needs a trace with r >= 2.
RateOfChangeReport rate_of_change_report(const RoutingTrace& trace);

}  // namespace gcaps
