#include "gcaps/routing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gcaps/ops.hpp"

namespace gcaps {

RoutingConfig RoutingConfig::algorithm(int number, int iterations) {
  RoutingConfig cfg;
  cfg.iterations = iterations;
  switch (number) {
    case 1: break;
    case 2: cfg.softmax_axis = AxisMode::LowerPerUpper; break;
    case 3: cfg.grouping = Grouping::ByType; break;
    case 4:
      cfg.softmax_axis = AxisMode::LowerPerUpper;
      cfg.grouping = Grouping::ByType;
      break;
    default: throw std::invalid_argument("routing algorithm must be 1..4, got " + std::to_string(number));
  }
  return cfg;
}

RoutingConfig RoutingConfig::parse(std::string_view name, int iterations) {
  std::string_view digits = name;
  if (digits.substr(0, 3) == "alg") digits.remove_prefix(3);
  if (digits.size() == 1 && digits[0] >= '1' && digits[0] <= '4') return algorithm(digits[0] - '0', iterations);
  throw std::invalid_argument("unknown routing '" + std::string(name) + "' (expected alg1, alg2, alg3 or alg4)");
}

int RoutingConfig::algorithm_number() const {
  const bool lower = softmax_axis == AxisMode::LowerPerUpper;
  if (grouped()) return lower ? 4 : 3;
  return lower ? 2 : 1;
}

std::string RoutingConfig::name() const { return "alg" + std::to_string(algorithm_number()); }

std::string RoutingConfig::curve_label() const {
  static const char* labels[] = {"b", "bc", "o", "oc"};
  return labels[algorithm_number() - 1];
}

std::string RoutingConfig::model_name() const {
  static const char* names[] = {"CapsNet", "CapsNet-c", "OurNet", "OurNet-c"};
  return names[algorithm_number() - 1];
}

void RoutingConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("routing iterations must be >= 1, got " + std::to_string(iterations));
}

double initial_coupling(const CapsLayerSpec& spec, const RoutingConfig& config) {
  if (config.softmax_axis == AxisMode::UpperPerLower) return 1.0 / static_cast<double>(spec.num_upper);
  if (config.grouped()) return 1.0 / static_cast<double>(spec.caps_per_type);
  return 1.0 / static_cast<double>(spec.num_lower);
}

namespace {

void require_prediction_shape(const PredictionTensor& prediction, const CapsLayerSpec& spec) {
  const auto& s = prediction.u_hat.shape();
  if (s.size() != 4 || s[1] != spec.num_lower || s[2] != spec.num_upper || s[3] != spec.dim_upper) {
    throw ShapeError("predictions " + to_string(s) + " do not match layer [batch, " + std::to_string(spec.num_lower) +
                     ", " + std::to_string(spec.num_upper) + ", " + std::to_string(spec.dim_upper) + "]");
  }
}

void check_route_args(const PredictionTensor& prediction, const CapsLayerSpec& spec, const RoutingConfig& config) {
  config.validate();
  require_prediction_shape(prediction, spec);
  if (config.grouped()) {
    spec.validate();
    spec.partition().validate(spec.num_lower);
  }
}

}  // namespace

RouteResult route(const PredictionTensor& prediction, const CapsLayerSpec& spec, const RoutingConfig& config,
                  bool capture_trace) {
  check_route_args(prediction, spec, config);
  const std::size_t batch = prediction.u_hat.shape()[0];
  const std::optional<TypePartition> partition =
      config.grouped() ? std::optional<TypePartition>(spec.partition()) : std::nullopt;
  const std::optional<TypePartition> softmax_groups =
      config.grouped() && config.softmax_axis == AxisMode::LowerPerUpper ? partition : std::nullopt;

  RouteResult result;
  if (capture_trace) result.trace = RoutingTrace{config, {}};
  LogitMatrix logits = zero_logits(batch, spec.num_lower, spec.num_upper);
  for (int it = 0; it < config.iterations; ++it) {
    const CouplingMatrix coupling = coupling_from_logits(logits, config.softmax_axis, softmax_groups);
    Tensor v;
    std::optional<Tensor> v_per_type;
    if (partition) {
      // Each type routes on its own; types meet only in the combined capsule
      // and through the shared logits.
      const Tensor s_per_type = grouped_weighted_sum(coupling, prediction, *partition);
      v_per_type = squash(s_per_type, 3);
      v = squash(sum(*v_per_type, 1), 2);
    } else {
      v = squash(weighted_sum(coupling, prediction), 2);
    }

    if (capture_trace) {
      RoutingSnapshot snap;
      snap.b = logits.b.detach();
      snap.c = coupling.c.detach();
      if (v_per_type) snap.v_per_type = v_per_type->detach();
      snap.v = v.detach();
      if (!result.trace->iterations.empty()) {
        const auto prev = result.trace->iterations.back().c.values();
        const auto cur = snap.c.values();
        double total = 0.0;
        for (std::size_t k = 0; k < cur.size(); ++k) {
          const double d = std::abs(cur[k] - prev[k]);
          total += d;
          snap.max_abs_dc = std::max(snap.max_abs_dc, d);
        }
        snap.mean_abs_dc = total / static_cast<double>(cur.size());
      }
      result.trace->iterations.push_back(std::move(snap));
    }

    result.v = v;
    result.v_per_type = v_per_type;
    // The update after the last iteration cannot influence v.
    if (it + 1 < config.iterations) logits = agreement_update(logits, prediction, v);
  }
  return result;
}

Tensor route_reference(const PredictionTensor& prediction, const CapsLayerSpec& spec, const RoutingConfig& config) {
  check_route_args(prediction, spec, config);
  const auto& shape = prediction.u_hat.shape();
  const std::size_t B = shape[0];
  const std::size_t I = shape[1];
  const std::size_t J = shape[2];
  const std::size_t D = shape[3];
  const auto uh = prediction.u_hat.values();
  auto u_at = [&](std::size_t n, std::size_t i, std::size_t j, std::size_t d) { return uh[((n * I + i) * J + j) * D + d]; };

  auto squash_vec = [](std::vector<double>& s) {
    double sq = 0.0;
    for (double x : s) sq += x * x;
    const double n = std::sqrt(sq);
    const double f = sq / ((1.0 + sq) * (n + kSquashEpsilon));
    for (double& x : s) x *= f;
  };

  // Normalization groups of lower capsules (the whole layer when ungrouped).
  std::vector<std::pair<std::size_t, std::size_t>> types;
  if (config.grouped()) {
    for (std::size_t t = 0; t < spec.num_types; ++t) types.emplace_back(t * spec.caps_per_type, (t + 1) * spec.caps_per_type);
  } else {
    types.emplace_back(0, I);
  }

  std::vector<double> b(B * I * J, 0.0);
  std::vector<double> c(B * I * J, 0.0);
  std::vector<double> v(B * J * D, 0.0);
  for (int it = 0; it < config.iterations; ++it) {
    for (std::size_t n = 0; n < B; ++n) {
      if (config.softmax_axis == AxisMode::UpperPerLower) {
        for (std::size_t i = 0; i < I; ++i) {
          double top = b[(n * I + i) * J];
          for (std::size_t j = 1; j < J; ++j) top = std::max(top, b[(n * I + i) * J + j]);
          double total = 0.0;
          for (std::size_t j = 0; j < J; ++j) total += std::exp(b[(n * I + i) * J + j] - top);
          double check = 0.0;
          for (std::size_t j = 0; j < J; ++j) {
            c[(n * I + i) * J + j] = std::exp(b[(n * I + i) * J + j] - top) / total;
            check += c[(n * I + i) * J + j];
          }
          if (std::abs(check - 1.0) > 1e-9) throw std::logic_error("reference routing: coupling row does not sum to 1");
        }
      } else {
        for (const auto& [lo, hi] : types) {
          for (std::size_t j = 0; j < J; ++j) {
            double top = b[(n * I + lo) * J + j];
            for (std::size_t i = lo + 1; i < hi; ++i) top = std::max(top, b[(n * I + i) * J + j]);
            double total = 0.0;
            for (std::size_t i = lo; i < hi; ++i) total += std::exp(b[(n * I + i) * J + j] - top);
            double check = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
              c[(n * I + i) * J + j] = std::exp(b[(n * I + i) * J + j] - top) / total;
              check += c[(n * I + i) * J + j];
            }
            if (std::abs(check - 1.0) > 1e-9) throw std::logic_error("reference routing: coupling column does not sum to 1");
          }
        }
      }

      for (std::size_t j = 0; j < J; ++j) {
        std::vector<double> combined(D, 0.0);
        for (const auto& [lo, hi] : types) {
          std::vector<double> s(D, 0.0);
          for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t d = 0; d < D; ++d) s[d] += c[(n * I + i) * J + j] * u_at(n, i, j, d);
          }
          squash_vec(s);
          for (std::size_t d = 0; d < D; ++d) combined[d] += s[d];
        }
        if (config.grouped()) squash_vec(combined);
        for (std::size_t d = 0; d < D; ++d) v[(n * J + j) * D + d] = combined[d];
      }

      if (it + 1 < config.iterations) {
        for (std::size_t i = 0; i < I; ++i) {
          for (std::size_t j = 0; j < J; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d) dot += u_at(n, i, j, d) * v[(n * J + j) * D + d];
            b[(n * I + i) * J + j] += dot;
          }
        }
      }
    }
  }
  return Tensor::from({B, J, D}, std::move(v));
}

double RateOfChangeReport::mean_abs_dc() const {
  if (per_iteration.empty()) return 0.0;
  double total = 0.0;
  for (const auto& row : per_iteration) total += row.mean_abs_dc;
  return total / static_cast<double>(per_iteration.size());
}

RateOfChangeReport rate_of_change_report(const RoutingTrace& trace) {
  if (trace.iterations.size() < 2) {
    throw std::invalid_argument("rate-of-change report needs a trace of at least 2 routing iterations, got " +
                                std::to_string(trace.iterations.size()));
  }
  RateOfChangeReport report;
  report.c0 = trace.iterations.front().c.values()[0];
  for (std::size_t t = 1; t < trace.iterations.size(); ++t) {
    const auto& snap = trace.iterations[t];
    report.per_iteration.push_back(
        {static_cast<int>(t), snap.mean_abs_dc, snap.max_abs_dc, snap.mean_abs_dc / report.c0});
  }
  return report;
}

}  // namespace gcaps
