#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcaps/capsule_ops.hpp"
#include "gcaps/data_io.hpp"
#include "gcaps/routing.hpp"

namespace gcaps {

/// Conv stem -> PrimaryCaps -> routed DigitCaps -> fully connected decoder.
struct ArchConfig {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t stem_channels = 256;
  std::size_t stem_kernel = 9;
  std::size_t stem_stride = 1;
  std::size_t primary_types = 32;
  std::size_t primary_dim = 8;
  std::size_t primary_kernel = 9;
  std::size_t primary_stride = 2;
  std::size_t num_classes = 10;
  std::size_t digit_dim = 16;
  std::size_t decoder_hidden1 = 512;
  std::size_t decoder_hidden2 = 1024;
  double routing_weight_std = 0.1;

  std::size_t stem_height() const;
  std::size_t stem_width() const;
  std::size_t grid_height() const;
  std::size_t grid_width() const;
  std::size_t caps_per_type() const { return grid_height() * grid_width(); }
  std::size_t num_lower() const { return primary_types * caps_per_type(); }
  std::size_t pixels() const { return channels * height * width; }
  CapsLayerSpec caps_spec() const;

  /// Throws std::invalid_argument when the convolution geometry does not fit.
  void validate() const;
};

struct TrainConfig {
  double lr = 0.001;
  double lr_decay = 0.95;  // multiplier applied after every epoch
  std::size_t batch_size = 128;
  int epochs = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int augment_shift = 0;
  std::uint64_t seed = 1;

  double learning_rate(int epoch) const;
};

struct Parameter {
  std::string name;
  Tensor value;
};

class Model {
 public:
  ArchConfig arch;
  RoutingConfig routing;
  std::vector<Parameter> params;

  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;
  void zero_grad();
};

/// Deterministic initialization from `seed`. PrimaryCaps are flattened in
/// (type, row, col) order so every type is a contiguous block.
Model build_model(const ArchConfig& arch, const RoutingConfig& routing, std::uint64_t seed);

struct ForwardResult {
  Tensor lengths;                       // [batch, classes]
  Tensor digit_caps;                    // [batch, classes, digit_dim]
  std::optional<Tensor> per_type_caps;  // [batch, types, classes, digit_dim], grouped routing only
  Tensor primary_caps;                  // [batch, num_lower, primary_dim]
  std::optional<RoutingTrace> trace;
};

ForwardResult forward(const Model& model, const Tensor& images, bool capture_trace = false);

/// Masks every capsule but the labelled one and runs the decoder.
/// digit_caps [batch, classes, digit_dim] -> [batch, pixels] in [0, 1].
Tensor decode(const Model& model, const Tensor& digit_caps, const Tensor& one_hot_labels);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);
  explicit Adam(const TrainConfig& config) : Adam(config.beta1, config.beta2, config.epsilon) {}

  void step(std::vector<Parameter>& params, double lr);
  long steps() const { return steps_; }

 private:
  double beta1_;
  double beta2_;
  double epsilon_;
  long steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  double loss = 0.0;
  double accuracy = 0.0;
  double margin = 0.0;
  double reconstruction = 0.0;
  std::optional<RoutingTrace> trace;
};

/// One Adam update on margin + 0.0005 * reconstruction loss.
StepResult train_step(Model& model, Adam& optimizer, const Batch& batch, double lr, bool capture_trace = false);

struct CouplingStats {
  double c0 = 0.0;
  double mean_dc = 0.0;  // mean |dc| at the final routing iteration
};

/// c0 and final-iteration mean |dc| of a captured trace (mean_dc is NaN for r = 1).
CouplingStats coupling_stats(const RoutingTrace& trace);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  CouplingStats coupling;
};

EvalResult evaluate(const Model& model, const Dataset& dataset, std::size_t batch_size = 128);

std::vector<int> predict_labels(const Tensor& lengths);

// Checkpoint file: "GCAPS1", u64 manifest length + key=value text, then per
// parameter: u64 name length, name, u64 rank, u64 dims, f64 values (all LE).

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, ManifestMismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using Manifest = std::map<std::string, std::string>;

Manifest model_manifest(const Model& model);
ArchConfig arch_from_manifest(const Manifest& manifest);
RoutingConfig routing_from_manifest(const Manifest& manifest);

void save_checkpoint(const std::filesystem::path& path, const Model& model);

struct Checkpoint {
  Manifest manifest;
  std::vector<Parameter> params;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Loads a model; every key of `expected` must match the stored manifest.
Model load_checkpoint(const std::filesystem::path& path, const Manifest& expected = {});

}  // namespace gcaps
