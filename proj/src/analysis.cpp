#include "gcaps/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gcaps/ops.hpp"

namespace gcaps {

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string format_metrics_row(const MetricsRecord& r) {
  std::string row = r.run_id;
  row += ',' + std::to_string(r.epoch);
  row += ',' + to_string(r.split);
  row += ',' + format_double(r.accuracy);
  row += ',' + format_double(r.loss);
  row += ',' + format_double(r.lr);
  row += ',' + r.config;
  row += ',' + format_double(r.wall_seconds);
  row += ',' + format_double(r.c0);
  row += ',' + format_double(r.mean_dc);
  return row;
}

std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : records) out += format_metrics_row(r) + "\n";
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::runtime_error("metrics CSV header mismatch");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 10) throw std::runtime_error("metrics CSV row has " + std::to_string(c.size()) + " cells: " + line);
    MetricsRecord r;
    r.run_id = c[0];
    r.epoch = std::stoi(c[1]);
    r.split = c[2] == "test" ? Split::Test : Split::Train;
    r.accuracy = std::stod(c[3]);
    r.loss = std::stod(c[4]);
    r.lr = std::stod(c[5]);
    r.config = c[6];
    r.wall_seconds = std::stod(c[7]);
    r.c0 = std::stod(c[8]);
    r.mean_dc = std::stod(c[9]);
    out.push_back(std::move(r));
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    if (!os.flush()) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult train_run(const Dataset& train, const Dataset& test, const ArchConfig& arch, const RoutingConfig& routing,
                    const TrainConfig& tc, const std::string& run_id, const RunOptions& options) {
  RunResult result;
  result.model = build_model(arch, routing, derive_seed(tc.seed, SeedRole::Init));
  Adam optimizer(tc);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!options.record_wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  auto emit = [&](MetricsRecord r) {
    if (options.on_epoch) options.on_epoch(r);
    result.records.push_back(std::move(r));
  };

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = tc.learning_rate(epoch);
    BatchIterator it(train, tc.batch_size, derive_seed(tc.seed, SeedRole::Shuffle, static_cast<std::uint64_t>(epoch)),
                     tc.augment_shift, derive_seed(tc.seed, SeedRole::Augment, static_cast<std::uint64_t>(epoch)));
    const std::size_t last = it.num_batches();
    std::size_t index = 0;
    double loss_sum = 0.0;
    double hit_sum = 0.0;
    std::size_t seen = 0;
    CouplingStats coupling;
    try {
      while (auto batch = it.next()) {
        ++index;
        // One traced batch per epoch is enough for the coupling columns.
        StepResult step = train_step(result.model, optimizer, *batch, lr, index == last);
        const double n = static_cast<double>(batch->labels.size());
        loss_sum += step.loss * n;
        hit_sum += step.accuracy * n;
        seen += batch->labels.size();
        if (step.trace) coupling = coupling_stats(*step.trace);
      }
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.divergence = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
      return result;
    }

    MetricsRecord tr;
    tr.run_id = run_id;
    tr.epoch = epoch + 1;
    tr.split = Split::Train;
    tr.accuracy = hit_sum / static_cast<double>(seen);
    tr.loss = loss_sum / static_cast<double>(seen);
    tr.lr = lr;
    tr.config = routing.curve_label();
    tr.c0 = coupling.c0;
    tr.mean_dc = coupling.mean_dc;
    tr.wall_seconds = elapsed();
    emit(tr);

    EvalResult ev = evaluate(result.model, test, tc.batch_size);
    MetricsRecord te = tr;
    te.split = Split::Test;
    te.accuracy = ev.accuracy;
    te.loss = ev.mean_loss;
    te.c0 = ev.coupling.c0;
    te.mean_dc = ev.coupling.mean_dc;
    te.wall_seconds = elapsed();
    emit(te);
    result.final_eval = std::move(ev);
  }
  return result;
}

const ComparisonRow* ComparisonReport::row(int algorithm) const {
  for (const auto& r : rows) {
    if (r.config.algorithm_number() == algorithm) return &r;
  }
  return nullptr;
}

std::size_t seeds_where_higher(const ComparisonReport& report, int a, int b) {
  const ComparisonRow* ra = report.row(a);
  const ComparisonRow* rb = report.row(b);
  if (!ra || !rb) return 0;
  std::size_t wins = 0;
  for (std::size_t s = 0; s < report.seeds.size(); ++s) {
    if (ra->per_seed[s] && rb->per_seed[s] && *ra->per_seed[s] > *rb->per_seed[s]) ++wins;
  }
  return wins;
}

namespace {

void add_ordering_finding(ComparisonReport& report, int a, int b) {
  const ComparisonRow* ra = report.row(a);
  const ComparisonRow* rb = report.row(b);
  if (!ra || !rb) return;
  const std::size_t wins = seeds_where_higher(report, a, b);
  std::string line = ra->config.model_name() + " > " + rb->config.model_name() + ": " + std::to_string(wins) + " of " +
                     std::to_string(report.seeds.size()) + " seeds; means " + format_double(ra->mean) + " vs " +
                     format_double(rb->mean);
  report.findings.push_back(std::move(line));
}

}  // namespace

ComparisonReport run_comparison(const Dataset& train, const Dataset& test, const ArchConfig& arch,
                                const std::vector<RoutingConfig>& configs, const TrainConfig& train_config,
                                const std::vector<std::uint64_t>& seeds, const std::filesystem::path& output_dir,
                                const RunOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("comparison needs at least one seed");
  if (configs.empty()) throw std::invalid_argument("comparison needs at least one routing config");
  ComparisonReport report;
  report.dataset = train.name;
  report.seeds = seeds;
  report.epochs = train_config.epochs;

  for (const auto& config : configs) {
    ComparisonRow row;
    row.config = config;
    double total = 0.0;
    std::size_t used = 0;
    for (auto seed : seeds) {
      TrainConfig tc = train_config;
      tc.seed = seed;
      const std::string run_id = config.name() + "_seed" + std::to_string(seed);
      RunResult run = train_run(train, test, arch, config, tc, run_id, options);

      ComparisonRun info;
      info.config = config;
      info.seed = seed;
      info.diverged = run.diverged;
      info.divergence = run.divergence;
      if (!output_dir.empty()) {
        info.metrics_path = output_dir / ("metrics_" + run_id + ".csv");
        write_file_atomic(info.metrics_path, metrics_csv(run.records));
      }
      if (run.diverged) {
        row.per_seed.emplace_back(std::nullopt);
        ++row.excluded;
        report.findings.push_back(run_id + " diverged (" + run.divergence + "); excluded from the mean");
      } else {
        info.final_test_accuracy = run.final_eval->accuracy;
        row.per_seed.emplace_back(info.final_test_accuracy);
        total += info.final_test_accuracy;
        ++used;
      }
      report.runs.push_back(std::move(info));
    }
    row.mean = used ? total / static_cast<double>(used) : std::nan("");
    report.rows.push_back(std::move(row));
  }
  add_ordering_finding(report, 1, 2);
  add_ordering_finding(report, 4, 2);
  add_ordering_finding(report, 3, 1);
  return report;
}

std::string report_csv(const ComparisonReport& report) {
  std::string out = "model,config";
  for (auto s : report.seeds) out += ",seed_" + std::to_string(s);
  out += "," + (report.dataset.empty() ? std::string("mean") : report.dataset) + ",excluded\n";
  for (const auto& row : report.rows) {
    out += row.config.model_name() + "," + row.config.curve_label();
    for (const auto& acc : row.per_seed) out += "," + (acc ? format_double(*acc) : std::string("diverged"));
    out += "," + format_double(row.mean) + "," + std::to_string(row.excluded) + "\n";
  }
  return out;
}

SensitivityReport init_sensitivity_study(const CapsLayerSpec& spec, const std::vector<RoutingConfig>& configs,
                                         int num_trials, std::uint64_t seed) {
  if (num_trials < 10) {
    throw std::invalid_argument("sensitivity study needs at least 10 trials, got " + std::to_string(num_trials));
  }
  spec.validate();
  NoGradGuard no_grad;
  SensitivityReport report;
  report.spec = spec;
  report.num_trials = num_trials;
  report.seed = seed;

  const Shape shape{1, spec.num_lower, spec.num_upper, spec.dim_upper};
  std::vector<std::vector<double>> per_config_dc(configs.size());
  for (int t = 0; t < num_trials; ++t) {
    Rng rng(derive_seed(seed, SeedRole::Synthetic, static_cast<std::uint64_t>(t)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> values(numel(shape));
    for (auto& x : values) x = gauss(rng);
    const PredictionTensor prediction{Tensor::from(shape, std::move(values))};
    for (std::size_t k = 0; k < configs.size(); ++k) {
      const RouteResult routed = route(prediction, spec, configs[k], /*capture_trace=*/true);
      SensitivityRow row{t, configs[k], rate_of_change_report(*routed.trace)};
      per_config_dc[k].push_back(row.report.mean_abs_dc());
      report.trials.push_back(std::move(row));
    }
  }

  for (std::size_t k = 0; k < configs.size(); ++k) {
    SensitivitySummary s;
    s.config = configs[k];
    s.c0 = initial_coupling(spec, configs[k]);
    const std::size_t steps = static_cast<std::size_t>(configs[k].iterations - 1);
    s.per_iteration_dc.assign(steps, 0.0);
    s.per_iteration_rel.assign(steps, 0.0);
    for (const auto& row : report.trials) {
      if (!(row.config == configs[k])) continue;
      for (std::size_t it = 0; it < steps; ++it) {
        s.per_iteration_dc[it] += row.report.per_iteration[it].mean_abs_dc / num_trials;
        s.per_iteration_rel[it] += row.report.per_iteration[it].mean_rel_dc / num_trials;
      }
    }
    for (double d : per_config_dc[k]) s.mean_abs_dc += d / num_trials;
    report.summary.push_back(std::move(s));
  }

  std::optional<std::size_t> a1, a2;
  for (std::size_t k = 0; k < configs.size(); ++k) {
    if (configs[k].algorithm_number() == 1 && !a1) a1 = k;
    if (configs[k].algorithm_number() == 2 && !a2) a2 = k;
  }
  if (a1 && a2) {
    int wins = 0;
    for (int t = 0; t < num_trials; ++t) wins += per_config_dc[*a1][t] > per_config_dc[*a2][t];
    report.alg1_exceeds_alg2 = static_cast<double>(wins) / num_trials;
  }
  return report;
}

std::string sensitivity_trials_csv(const SensitivityReport& report) {
  std::string out = "trial,config,model,iteration,c0,mean_abs_dc,max_abs_dc,relative_dc\n";
  for (const auto& row : report.trials) {
    for (const auto& it : row.report.per_iteration) {
      out += std::to_string(row.trial) + "," + row.config.name() + "," + row.config.model_name() + "," +
             std::to_string(it.iteration) + "," + format_double(row.report.c0) + "," + format_double(it.mean_abs_dc) +
             "," + format_double(it.max_abs_dc) + "," + format_double(it.mean_rel_dc) + "\n";
    }
  }
  return out;
}

std::string sensitivity_summary_csv(const SensitivityReport& report) {
  std::size_t steps = 0;
  for (const auto& s : report.summary) steps = std::max(steps, s.per_iteration_dc.size());
  std::string out = "config,model,c0,trials,mean_abs_dc";
  for (std::size_t it = 1; it <= steps; ++it) out += ",iter" + std::to_string(it) + "_mean_abs_dc";
  for (std::size_t it = 1; it <= steps; ++it) out += ",iter" + std::to_string(it) + "_relative_dc";
  out += ",alg1_exceeds_alg2_fraction\n";
  for (const auto& s : report.summary) {
    out += s.config.name() + "," + s.config.model_name() + "," + format_double(s.c0) + "," +
           std::to_string(report.num_trials) + "," + format_double(s.mean_abs_dc);
    for (std::size_t it = 0; it < steps; ++it) {
      out += "," + (it < s.per_iteration_dc.size() ? format_double(s.per_iteration_dc[it]) : std::string());
    }
    for (std::size_t it = 0; it < steps; ++it) {
      out += "," + (it < s.per_iteration_rel.size() ? format_double(s.per_iteration_rel[it]) : std::string());
    }
    out += "," + (report.alg1_exceeds_alg2 ? format_double(*report.alg1_exceeds_alg2) : std::string()) + "\n";
  }
  return out;
}

std::vector<double> ReconstructionGrid::raster() const {
  std::vector<double> out(width() * height(), 0.0);
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const std::size_t r0 = (p / cols) * panel_height;
    const std::size_t c0 = (p % cols) * panel_width;
    for (std::size_t y = 0; y < panel_height; ++y) {
      for (std::size_t x = 0; x < panel_width; ++x) out[(r0 + y) * width() + c0 + x] = panels[p][y * panel_width + x];
    }
  }
  return out;
}

ReconstructionGrid reconstruction_grid(const Model& model, const Tensor& image, std::optional<int> label) {
  if (!model.routing.grouped()) {
    throw std::invalid_argument("reconstruction grid needs a grouped routing model (alg3 or alg4), got " +
                                model.routing.name());
  }
  const ArchConfig& a = model.arch;
  if (image.rank() != 4 || image.shape()[0] != 1) {
    throw ShapeError("reconstruction grid expects one image [1, c, h, w], got " + to_string(image.shape()));
  }
  NoGradGuard no_grad;
  const ForwardResult fwd = forward(model, image);
  const int cls = label ? *label : predict_labels(fwd.lengths)[0];
  if (cls < 0 || static_cast<std::size_t>(cls) >= a.num_classes) {
    throw std::out_of_range("label " + std::to_string(cls) + " outside [0, " + std::to_string(a.num_classes) + ")");
  }
  const std::vector<int> labels{cls};
  const Tensor mask = one_hot(labels, a.num_classes);

  ReconstructionGrid grid;
  grid.label = cls;
  grid.panel_height = a.height;
  grid.panel_width = a.width;
  grid.rows = 3;
  grid.cols = (a.primary_types + 1 + grid.rows - 1) / grid.rows;
  grid.combined_caps = fwd.digit_caps;
  grid.per_type_caps = *fwd.per_type_caps;

  auto to_panel = [&](const Tensor& decoded) {
    const auto v = decoded.values();
    const std::size_t plane = a.height * a.width;
    std::vector<double> panel(plane, 0.0);
    // Channels are averaged into one gray panel.
    for (std::size_t c = 0; c < a.channels; ++c) {
      for (std::size_t k = 0; k < plane; ++k) panel[k] += v[c * plane + k] / static_cast<double>(a.channels);
    }
    return panel;
  };
  grid.panels.push_back(to_panel(decode(model, fwd.digit_caps, mask)));
  for (std::size_t m = 0; m < a.primary_types; ++m) {
    const Tensor caps = reshape(narrow(grid.per_type_caps, 1, m, 1), {1, a.num_classes, a.digit_dim});
    grid.panels.push_back(to_panel(decode(model, caps, mask)));
  }
  return grid;
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height, const std::vector<double>& pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("pgm pixel count does not match its size");
  std::string data = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  data.reserve(data.size() + pixels.size());
  for (double p : pixels) {
    const double clamped = std::clamp(p, 0.0, 1.0);
    data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  write_file_atomic(path, data);
}

}  // namespace gcaps
