#include "gcaps/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "gcaps/analysis.hpp"
#include "gcaps/ops.hpp"

namespace gcaps {

const std::vector<ConfigKey>& RunConfig::keys() {
  static const std::vector<ConfigKey> k = {
      {"routing", "alg1", "routing algorithm: alg1, alg2, alg3 or alg4"},
      {"configs", "alg1,alg2,alg4", "comma-separated routing algorithms (compare, routing-report)"},
      {"iterations", "3", "routing iterations r"},
      {"dataset", "mnist", "mnist, fmnist, kmnist (IDX files) or synthetic"},
      {"data_dir", "", "directory with the IDX files (default data/<dataset>)"},
      {"train_images", "", "train image IDX file (default <data_dir>/train-images-idx3-ubyte)"},
      {"train_labels", "", "train label IDX file"},
      {"test_images", "", "test image IDX file"},
      {"test_labels", "", "test label IDX file"},
      {"train_limit", "0", "use the first N training samples (0 = all)"},
      {"test_limit", "0", "use the first N test samples (0 = all)"},
      {"synthetic_train", "256", "synthetic train set size"},
      {"synthetic_test", "128", "synthetic test set size"},
      {"epochs", "5", "training epochs"},
      {"batch_size", "128", "minibatch size"},
      {"lr", "0.001", "initial Adam learning rate"},
      {"lr_decay", "0.95", "learning-rate multiplier per epoch"},
      {"augment_shift", "0", "max random shift in pixels for training images"},
      {"seed", "1", "root seed (init, shuffling, augmentation, synthetic data)"},
      {"seeds", "1,2,3", "comma-separated root seeds for compare"},
      {"output_dir", "runs/latest", "output directory (GCAPS_OUTPUT_DIR overrides)"},
      {"stem_channels", "256", "stem convolution channels"},
      {"stem_kernel", "9", "stem kernel size"},
      {"stem_stride", "1", "stem stride"},
      {"primary_types", "32", "PrimaryCaps capsule types"},
      {"primary_dim", "8", "PrimaryCaps capsule dimension"},
      {"primary_kernel", "9", "PrimaryCaps kernel size"},
      {"primary_stride", "2", "PrimaryCaps stride"},
      {"digit_dim", "16", "DigitCaps capsule dimension"},
      {"decoder_hidden1", "512", "first decoder layer width"},
      {"decoder_hidden2", "1024", "second decoder layer width"},
      {"routing_weight_std", "0.1", "std of the Gaussian routing-weight init"},
      {"record_wall_time", "true", "write elapsed seconds to metrics (false keeps CSVs bit-identical)"},
      {"trials", "100", "routing-report trials (>= 10)"},
      {"checkpoint", "", "checkpoint path (default <output_dir>/checkpoint.gcaps)"},
      {"image_index", "0", "test image to reconstruct"},
      {"reconstruct_label", "predicted", "mask with the predicted or the true label"},
  };
  return k;
}

bool RunConfig::known(const std::string& key) {
  const auto& k = keys();
  return std::any_of(k.begin(), k.end(), [&](const ConfigKey& c) { return key == c.name; });
}

RunConfig::RunConfig() {
  for (const auto& k : keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
  explicit_.insert(key);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::merge_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) {
      throw ConfigError(source + ":" + std::to_string(number) + ": unknown config key '" + key + "'");
    }
    set(key, trim(line.substr(eq + 1)));
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

long RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const long x = std::stol(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const long x = get_int(key);
  if (x < 0) throw ConfigError("config key '" + key + "' must be >= 0, got " + std::to_string(x));
  return static_cast<std::size_t>(x);
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void RunConfig::expand_defaults() {
  if (const char* env = std::getenv("GCAPS_OUTPUT_DIR"); env && *env) values_["output_dir"] = env;
  if (values_["data_dir"].empty()) values_["data_dir"] = "data/" + values_["dataset"];
  const std::filesystem::path dir = values_["data_dir"];
  const std::pair<const char*, const char*> files[] = {{"train_images", "train-images-idx3-ubyte"},
                                                       {"train_labels", "train-labels-idx1-ubyte"},
                                                       {"test_images", "t10k-images-idx3-ubyte"},
                                                       {"test_labels", "t10k-labels-idx1-ubyte"}};
  for (const auto& [key, name] : files) {
    if (values_[key].empty()) values_[key] = (dir / name).string();
  }
  if (values_["checkpoint"].empty()) {
    values_["checkpoint"] = (std::filesystem::path(values_["output_dir"]) / "checkpoint.gcaps").string();
  }
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.name) + "=" + values_.at(k.name) + "\n";
  return out;
}

ArchConfig arch_from_config(const RunConfig& c) {
  ArchConfig a;
  a.stem_channels = c.get_size("stem_channels");
  a.stem_kernel = c.get_size("stem_kernel");
  a.stem_stride = c.get_size("stem_stride");
  a.primary_types = c.get_size("primary_types");
  a.primary_dim = c.get_size("primary_dim");
  a.primary_kernel = c.get_size("primary_kernel");
  a.primary_stride = c.get_size("primary_stride");
  a.digit_dim = c.get_size("digit_dim");
  a.decoder_hidden1 = c.get_size("decoder_hidden1");
  a.decoder_hidden2 = c.get_size("decoder_hidden2");
  a.routing_weight_std = c.get_double("routing_weight_std");
  return a;
}

TrainConfig train_from_config(const RunConfig& c) {
  TrainConfig t;
  t.lr = c.get_double("lr");
  t.lr_decay = c.get_double("lr_decay");
  t.batch_size = c.get_size("batch_size");
  t.epochs = static_cast<int>(c.get_int("epochs"));
  t.augment_shift = static_cast<int>(c.get_int("augment_shift"));
  t.seed = c.get_size("seed");
  if (t.batch_size == 0) throw ConfigError("config key 'batch_size' must be >= 1");
  if (t.epochs < 1) throw ConfigError("config key 'epochs' must be >= 1");
  if (t.augment_shift < 0) throw ConfigError("config key 'augment_shift' must be >= 0");
  return t;
}

namespace {

RoutingConfig parse_routing(const std::string& key, const std::string& name, int iterations) {
  try {
    RoutingConfig r = RoutingConfig::parse(name, iterations);
    r.validate();
    return r;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

RoutingConfig routing_from_config(const RunConfig& c) {
  return parse_routing("routing", c.get("routing"), static_cast<int>(c.get_int("iterations")));
}

std::vector<RoutingConfig> routing_list_from_config(const RunConfig& c) {
  std::vector<RoutingConfig> out;
  for (const auto& name : c.get_list("configs")) {
    out.push_back(parse_routing("configs", name, static_cast<int>(c.get_int("iterations"))));
  }
  return out;
}

std::vector<std::uint64_t> seeds_from_config(const RunConfig& c) {
  std::vector<std::uint64_t> out;
  for (const auto& s : c.get_list("seeds")) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("config key 'seeds' expects comma-separated integers, got '" + c.get("seeds") + "'");
    }
  }
  if (out.empty()) throw ConfigError("config key 'seeds' lists no seeds");
  return out;
}

namespace {

Dataset load_split(const RunConfig& c, Split split) {
  const std::string kind = c.get("dataset");
  const bool train = split == Split::Train;
  const std::size_t limit = c.get_size(train ? "train_limit" : "test_limit");
  if (kind == "synthetic") {
    const std::size_t n = c.get_size(train ? "synthetic_train" : "synthetic_test");
    Dataset d = synthetic_dataset(derive_seed(c.get_size("seed"), SeedRole::Synthetic, train ? 0 : 1), n);
    d.split = split;
    return d.head(limit);
  }
  if (kind != "mnist" && kind != "fmnist" && kind != "kmnist") {
    throw ConfigError("config key 'dataset' must be mnist, fmnist, kmnist or synthetic, got '" + kind + "'");
  }
  Dataset d = load_idx(c.get(train ? "train_images" : "test_images"), c.get(train ? "train_labels" : "test_labels"),
                       kind, split);
  return d.head(limit);
}

ArchConfig arch_for(const RunConfig& c, const Dataset& d) {
  ArchConfig a = arch_from_config(c);
  a.channels = d.channels();
  a.height = d.height();
  a.width = d.width();
  a.num_classes = d.num_classes;
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return a;
}

std::filesystem::path output_dir(const RunConfig& c) {
  std::filesystem::path dir = c.get("output_dir");
  std::filesystem::create_directories(dir);
  return dir;
}

void write_resolved(const RunConfig& c, const std::string& command) {
  write_file_atomic(output_dir(c) / ("resolved_" + command + ".txt"), c.serialize());
}

RunOptions run_options(const RunConfig& c, std::ostream& out) {
  RunOptions o;
  o.record_wall_time = c.get_bool("record_wall_time");
  o.on_epoch = [&out](const MetricsRecord& r) {
    out << r.run_id << " epoch " << r.epoch << " " << to_string(r.split) << " accuracy=" << format_double(r.accuracy)
        << " loss=" << format_double(r.loss) << " lr=" << format_double(r.lr) << "\n";
    out.flush();
  };
  return o;
}

/// Manifest entries for every architecture/routing key the user set explicitly.
Manifest expected_manifest(const RunConfig& c) {
  Manifest m;
  const char* arch_keys[] = {"stem_channels",  "stem_kernel",  "stem_stride",    "primary_types",
                             "primary_dim",    "primary_kernel", "primary_stride", "digit_dim",
                             "decoder_hidden1", "decoder_hidden2"};
  for (const char* k : arch_keys) {
    if (c.is_explicit(k)) m[std::string("arch.") + k] = std::to_string(c.get_size(k));
  }
  if (c.is_explicit("routing_weight_std")) m["arch.routing_weight_std"] = format_double(c.get_double("routing_weight_std"));
  if (c.is_explicit("routing")) m["routing.algorithm"] = routing_from_config(c).name();
  if (c.is_explicit("iterations")) m["routing.iterations"] = std::to_string(c.get_int("iterations"));
  return m;
}

Model load_for(const RunConfig& c) {
  try {
    return load_checkpoint(c.get("checkpoint"), expected_manifest(c));
  } catch (const CheckpointError& e) {
    if (e.kind() == CheckpointError::Kind::ManifestMismatch) throw ConfigError(e.what());
    throw;
  }
}

void require_geometry(const Model& model, const Dataset& d) {
  const ArchConfig& a = model.arch;
  if (a.channels != d.channels() || a.height != d.height() || a.width != d.width()) {
    throw ConfigError("checkpoint expects " + std::to_string(a.channels) + "x" + std::to_string(a.height) + "x" +
                      std::to_string(a.width) + " images, dataset has " + std::to_string(d.channels()) + "x" +
                      std::to_string(d.height()) + "x" + std::to_string(d.width()));
  }
}

int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const RoutingConfig routing = routing_from_config(c);
  const TrainConfig tc = train_from_config(c);
  const auto dir = output_dir(c);
  write_resolved(c, "train");
  const Dataset train = load_split(c, Split::Train);
  const Dataset test = load_split(c, Split::Test);
  const ArchConfig arch = arch_for(c, train);

  const std::string run_id = routing.name() + "_seed" + std::to_string(tc.seed);
  RunResult run = train_run(train, test, arch, routing, tc, run_id, run_options(c, out));
  write_file_atomic(dir / "metrics.csv", metrics_csv(run.records));
  if (run.diverged) {
    err << "error: training diverged at " << run.divergence << "\n";
    return 2;
  }
  save_checkpoint(c.get("checkpoint"), run.model);
  out << "test_accuracy=" << format_double(run.final_eval->accuracy) << "\n";
  out << "checkpoint=" << c.get("checkpoint") << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out, std::ostream&) {
  const auto dir = output_dir(c);
  write_resolved(c, "eval");
  const Model model = load_for(c);
  const Dataset test = load_split(c, Split::Test);
  require_geometry(model, test);
  const EvalResult ev = evaluate(model, test, c.get_size("batch_size"));

  std::string csv = "true\\predicted";
  for (std::size_t k = 0; k < ev.confusion.size(); ++k) csv += "," + std::to_string(k);
  csv += "\n";
  for (std::size_t t = 0; t < ev.confusion.size(); ++t) {
    csv += std::to_string(t);
    for (auto n : ev.confusion[t]) csv += "," + std::to_string(n);
    csv += "\n";
  }
  write_file_atomic(dir / "confusion.csv", csv);
  out << "accuracy=" << format_double(ev.accuracy) << "\n";
  out << "loss=" << format_double(ev.mean_loss) << "\n";
  out << "count=" << ev.count << "\n";
  return 0;
}

int cmd_compare(const RunConfig& c, std::ostream& out, std::ostream&) {
  const auto configs = routing_list_from_config(c);
  if (configs.size() < 2) {
    throw ConfigError("compare needs at least two routing configs in 'configs', got '" + c.get("configs") + "'");
  }
  const auto seeds = seeds_from_config(c);
  const TrainConfig tc = train_from_config(c);
  const auto dir = output_dir(c);
  write_resolved(c, "compare");
  const Dataset train = load_split(c, Split::Train);
  const Dataset test = load_split(c, Split::Test);
  const ArchConfig arch = arch_for(c, train);

  const ComparisonReport report = run_comparison(train, test, arch, configs, tc, seeds, dir, run_options(c, out));
  const std::string csv = report_csv(report);
  write_file_atomic(dir / "report.csv", csv);
  std::string findings;
  for (const auto& f : report.findings) findings += f + "\n";
  write_file_atomic(dir / "findings.txt", findings);
  out << csv << findings;
  return 0;
}

int cmd_routing_report(const RunConfig& c, std::ostream& out, std::ostream&) {
  const long trials = c.get_int("trials");
  if (trials < 10) throw ConfigError("config key 'trials' must be >= 10, got " + std::to_string(trials));
  std::vector<RoutingConfig> configs;
  if (c.is_explicit("configs")) {
    configs = routing_list_from_config(c);
  } else {
    for (int n = 1; n <= 4; ++n) configs.push_back(RoutingConfig::algorithm(n, static_cast<int>(c.get_int("iterations"))));
  }
  for (const auto& r : configs) {
    if (r.iterations < 2) throw ConfigError("routing-report needs iterations >= 2");
  }
  ArchConfig arch = arch_from_config(c);
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto dir = output_dir(c);
  write_resolved(c, "routing-report");

  const SensitivityReport report = init_sensitivity_study(arch.caps_spec(), configs, static_cast<int>(trials), c.get_size("seed"));
  write_file_atomic(dir / "routing_trials.csv", sensitivity_trials_csv(report));
  const std::string summary = sensitivity_summary_csv(report);
  write_file_atomic(dir / "routing_summary.csv", summary);
  std::string findings =
      "mean |dc| is the per-iteration mean absolute change of the coupling coefficients, averaged over iterations; "
      "it is one way to quantify how fast routing moves away from its uniform start.\n";
  if (report.alg1_exceeds_alg2) {
    findings += "alg1 mean |dc| > alg2 mean |dc| in a fraction " + format_double(*report.alg1_exceeds_alg2) + " of " +
                std::to_string(trials) + " trials\n";
  }
  write_file_atomic(dir / "routing_findings.txt", findings);
  out << summary << findings;
  return 0;
}

int cmd_reconstruct(const RunConfig& c, std::ostream& out, std::ostream&) {
  const auto dir = output_dir(c);
  write_resolved(c, "reconstruct");
  const Model model = load_for(c);
  if (!model.routing.grouped()) {
    throw ConfigError("reconstruct needs a grouped-routing checkpoint (alg3 or alg4) with per-type capsules; " +
                      c.get("checkpoint") + " was trained with " + model.routing.name());
  }
  const std::string mode = c.get("reconstruct_label");
  if (mode != "predicted" && mode != "true") {
    throw ConfigError("config key 'reconstruct_label' must be predicted or true, got '" + mode + "'");
  }
  const Dataset test = load_split(c, Split::Test);
  require_geometry(model, test);
  const std::size_t index = c.get_size("image_index");
  if (index >= test.size()) {
    throw ConfigError("image_index " + std::to_string(index) + " out of range for " + std::to_string(test.size()) +
                      " test images");
  }
  const Tensor image = narrow(test.images, 0, index, 1);
  const std::optional<int> label = mode == "true" ? std::optional<int>(test.labels[index]) : std::nullopt;
  const ReconstructionGrid grid = reconstruction_grid(model, image, label);
  const auto path = dir / ("reconstruction_" + std::to_string(index) + ".pgm");
  write_pgm(path, grid.width(), grid.height(), grid.raster());
  out << "panels=" << grid.panels.size() << "\n";
  out << "label=" << grid.label << "\n";
  out << "true_label=" << test.labels[index] << "\n";
  out << "grid=" << path.string() << "\n";
  return 0;
}

std::string flag_name(const char* key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Capsule networks with four dynamic-routing variants", "gcaps"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&, std::ostream&, std::ostream&);
    CLI::App* app = nullptr;
    std::string config_file;
    std::map<std::string, std::string> flags;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<std::unique_ptr<Command>> commands;
  const std::pair<const char*, const char*> specs[] = {
      {"train", "train one model, write checkpoint + metrics"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"compare", "train every routing config for every seed, write report"},
      {"routing-report", "coupling-change statistics on random predictions"},
      {"reconstruct", "per-type reconstruction grid from a grouped checkpoint"},
  };
  int (*runners[])(const RunConfig&, std::ostream&, std::ostream&) = {cmd_train, cmd_eval, cmd_compare,
                                                                       cmd_routing_report, cmd_reconstruct};
  for (std::size_t k = 0; k < std::size(specs); ++k) {
    auto cmd = std::make_unique<Command>();
    cmd->name = specs[k].first;
    cmd->help = specs[k].second;
    cmd->run = runners[k];
    cmd->app = app.add_subcommand(cmd->name, cmd->help);
    if (std::string_view(cmd->name) == "routing-report") cmd->app->alias("analyze-routing");
    cmd->app->add_option("--config", cmd->config_file, "key=value run config file");
    for (const auto& key : RunConfig::keys()) {
      std::string help = std::string(key.help);
      if (*key.default_value) help += " [" + std::string(key.default_value) + "]";
      cmd->options[key.name] = cmd->app->add_option(flag_name(key.name), cmd->flags[key.name], help);
    }
    commands.push_back(std::move(cmd));
  }

  std::vector<const char*> argv{"gcaps"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      RunConfig config;
      if (!cmd->config_file.empty()) config.merge_file(cmd->config_file);
      for (const auto& [key, opt] : cmd->options) {
        if (opt->count() > 0) config.set(key, cmd->flags[key]);
      }
      config.expand_defaults();
      return cmd->run(config, out, err);
    } catch (const ConfigError& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}

}  // namespace gcaps
