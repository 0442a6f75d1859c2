#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gcaps/network.hpp"

namespace gcaps {

struct MetricsRecord {
  std::string run_id;
  int epoch = 0;  // 1-based
  Split split = Split::Train;
  double accuracy = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  std::string config;  // b, bc, o or oc
  double wall_seconds = 0.0;
  double c0 = 0.0;
  double mean_dc = 0.0;
};

inline constexpr const char* kMetricsHeader = "run_id,epoch,split,accuracy,loss,lr,config,wall_seconds,c0,mean_dc";

/// %.17g so values round-trip exactly.
std::string format_double(double x);
std::string format_metrics_row(const MetricsRecord& record);
std::string metrics_csv(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

struct RunOptions {
  bool record_wall_time = true;
  std::function<void(const MetricsRecord&)> on_epoch;
};

struct RunResult {
  Model model;
  std::vector<MetricsRecord> records;
  bool diverged = false;
  std::string divergence;
  std::optional<EvalResult> final_eval;  // absent when the run diverged
};

/// Trains for train_config.epochs, evaluating on `test` after every epoch.
/// Seeds for init/shuffle/augmentation derive from train_config.seed.
RunResult train_run(const Dataset& train, const Dataset& test, const ArchConfig& arch, const RoutingConfig& routing,
                    const TrainConfig& train_config, const std::string& run_id, const RunOptions& options = {});

struct ComparisonRun {
  RoutingConfig config;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string divergence;
  double final_test_accuracy = 0.0;
  std::filesystem::path metrics_path;
};

struct ComparisonRow {
  RoutingConfig config;
  std::vector<std::optional<double>> per_seed;  // nullopt = diverged, excluded from the mean
  double mean = 0.0;                            // NaN when every seed diverged
  std::size_t excluded = 0;
};

struct ComparisonReport {
  std::string dataset;
  std::vector<std::uint64_t> seeds;
  int epochs = 0;
  std::vector<ComparisonRow> rows;
  std::vector<ComparisonRun> runs;
  std::vector<std::string> findings;

  const ComparisonRow* row(int algorithm) const;
};

/// Number of seeds where algorithm `a` finished with higher test accuracy than `b`
/// (seeds where either diverged are skipped).
std::size_t seeds_where_higher(const ComparisonReport& report, int a, int b);

/// Trains every (config, seed) pair under one budget. Per-run metrics land in
/// output_dir/metrics_<alg>_seed<s>.csv when output_dir is non-empty.
ComparisonReport run_comparison(const Dataset& train, const Dataset& test, const ArchConfig& arch,
                                const std::vector<RoutingConfig>& configs, const TrainConfig& train_config,
                                const std::vector<std::uint64_t>& seeds, const std::filesystem::path& output_dir = {},
                                const RunOptions& options = {});

/// model,config,seed_<s>...,<dataset>,excluded
std::string report_csv(const ComparisonReport& report);

struct SensitivityRow {
  int trial = 0;
  RoutingConfig config;
  RateOfChangeReport report;
};

struct SensitivitySummary {
  RoutingConfig config;
  double c0 = 0.0;
  double mean_abs_dc = 0.0;               // averaged over trials and iterations
  std::vector<double> per_iteration_dc;   // averaged over trials
  std::vector<double> per_iteration_rel;  // mean |dc| / c0
};

struct SensitivityReport {
  CapsLayerSpec spec;
  int num_trials = 0;
  std::uint64_t seed = 0;
  std::vector<SensitivityRow> trials;
  std::vector<SensitivitySummary> summary;
  /// Fraction of trials where Alg. 1's mean |dc| exceeds Alg. 2's (both must be configured).
  std::optional<double> alg1_exceeds_alg2;
};

/// Routes the same unit-Gaussian predictions [1, num_lower, num_upper, dim_upper]
/// under every config, once per trial.
SensitivityReport init_sensitivity_study(const CapsLayerSpec& spec, const std::vector<RoutingConfig>& configs,
                                         int num_trials, std::uint64_t seed);

std::string sensitivity_trials_csv(const SensitivityReport& report);
std::string sensitivity_summary_csv(const SensitivityReport& report);

struct ReconstructionGrid {
  std::size_t rows = 3;
  std::size_t cols = 11;
  std::size_t panel_height = 0;
  std::size_t panel_width = 0;
  int label = 0;  // class whose capsule was decoded
  /// Panel 0 decodes the combined capsule, panel 1 + m decodes type m. Values in [0, 1].
  std::vector<std::vector<double>> panels;
  Tensor combined_caps;  // [1, classes, digit_dim]
  Tensor per_type_caps;  // [1, types, classes, digit_dim]

  std::size_t width() const { return cols * panel_width; }
  std::size_t height() const { return rows * panel_height; }
  /// Row-major grayscale raster, panels laid out left to right, top to bottom.
  std::vector<double> raster() const;
};

/// image: [1, channels, height, width]. label nullopt masks with the predicted class.
ReconstructionGrid reconstruction_grid(const Model& model, const Tensor& image, std::optional<int> label = std::nullopt);

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height, const std::vector<double>& pixels);

}  // namespace gcaps
