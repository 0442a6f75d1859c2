#include "gcaps/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>

#include "gcaps/ops.hpp"

namespace gcaps {

std::size_t ArchConfig::stem_height() const { return conv_output_size(height, stem_kernel, stem_stride, 0); }
std::size_t ArchConfig::stem_width() const { return conv_output_size(width, stem_kernel, stem_stride, 0); }
std::size_t ArchConfig::grid_height() const { return conv_output_size(stem_height(), primary_kernel, primary_stride, 0); }
std::size_t ArchConfig::grid_width() const { return conv_output_size(stem_width(), primary_kernel, primary_stride, 0); }

CapsLayerSpec ArchConfig::caps_spec() const {
  CapsLayerSpec spec;
  spec.num_lower = num_lower();
  spec.num_upper = num_classes;
  spec.dim_lower = primary_dim;
  spec.dim_upper = digit_dim;
  spec.num_types = primary_types;
  spec.caps_per_type = caps_per_type();
  return spec;
}

void ArchConfig::validate() const {
  const std::size_t sizes[] = {channels,      height,          width,          stem_channels,   stem_kernel,
                               stem_stride,   primary_types,   primary_dim,    primary_kernel,  primary_stride,
                               num_classes,   digit_dim,       decoder_hidden1, decoder_hidden2};
  for (auto s : sizes) {
    if (s == 0) throw std::invalid_argument("architecture sizes must all be positive");
  }
  if (!(routing_weight_std > 0.0)) throw std::invalid_argument("routing weight std must be positive");
  try {
    caps_spec().validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("inconsistent architecture geometry: ") + e.what());
  }
}

double TrainConfig::learning_rate(int epoch) const { return lr * std::pow(lr_decay, epoch); }

const Tensor& Model::param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw std::out_of_range("model has no parameter '" + name + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params) p.value.zero_grad();
}

namespace {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Model build_model(const ArchConfig& arch, const RoutingConfig& routing, std::uint64_t seed) {
  arch.validate();
  routing.validate();
  Model model;
  model.arch = arch;
  model.routing = routing;
  Rng rng(seed);
  auto add = [&](std::string name, Tensor t) { model.params.push_back({std::move(name), std::move(t)}); };

  // Stem U(+-0.42/sqrt(fan_in)), primary std 3.9/sqrt(fan_in) (0.027 at the default arch),
  // decoder U(+-1/sqrt(fan_in)), zero biases. Picked by pilot runs on 2000 MNIST images.
  auto fan_in_uniform = [&](Shape shape, std::size_t fan_in, double gain) {
    return uniform_param(std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)), rng);
  };
  const std::size_t stem_area = arch.stem_kernel * arch.stem_kernel;
  add("stem.weight", fan_in_uniform({arch.stem_channels, arch.channels, arch.stem_kernel, arch.stem_kernel},
                                    arch.channels * stem_area, 0.42));
  add("stem.bias", Tensor::zeros({arch.stem_channels}, true));

  const std::size_t primary_out = arch.primary_types * arch.primary_dim;
  add("primary.weight", uniform_param({primary_out, arch.stem_channels, arch.primary_kernel, arch.primary_kernel},
                                      3.9 * std::sqrt(3.0 / static_cast<double>(arch.stem_channels * arch.primary_kernel *
                                                                           arch.primary_kernel)),
                                      rng));
  add("primary.bias", Tensor::zeros({primary_out}, true));

  add("digit.W", normal_param({arch.num_lower(), arch.num_classes, arch.digit_dim, arch.primary_dim},
                              arch.routing_weight_std, rng));

  const std::size_t widths[] = {arch.num_classes * arch.digit_dim, arch.decoder_hidden1, arch.decoder_hidden2,
                                arch.pixels()};
  for (int layer = 0; layer < 3; ++layer) {
    const std::string prefix = "decoder.fc" + std::to_string(layer + 1);
    add(prefix + ".weight", fan_in_uniform({widths[layer], widths[layer + 1]}, widths[layer], 1.0));
    add(prefix + ".bias", Tensor::zeros({widths[layer + 1]}, true));
  }
  return model;
}

ForwardResult forward(const Model& model, const Tensor& images, bool capture_trace) {
  const ArchConfig& a = model.arch;
  if (images.rank() != 4 || images.shape()[1] != a.channels || images.shape()[2] != a.height ||
      images.shape()[3] != a.width) {
    throw ShapeError("forward expects images [batch, " + std::to_string(a.channels) + ", " + std::to_string(a.height) +
                     ", " + std::to_string(a.width) + "], got " + to_string(images.shape()));
  }
  const std::size_t batch = images.shape()[0];
  const Tensor stem = relu(conv2d(images, model.param("stem.weight"), {a.stem_stride, 0}, model.param("stem.bias")));
  const Tensor primary =
      conv2d(stem, model.param("primary.weight"), {a.primary_stride, 0}, model.param("primary.bias"));

  // [b, types*dim, gh, gw] -> [b, types, gh, gw, dim] -> [b, types*gh*gw, dim]
  const std::size_t gh = a.grid_height();
  const std::size_t gw = a.grid_width();
  Tensor caps = reshape(primary, {batch, a.primary_types, a.primary_dim, gh, gw});
  caps = permute(caps, {0, 1, 3, 4, 2});
  caps = reshape(caps, {batch, a.num_lower(), a.primary_dim});
  const Tensor u = squash(caps, 2);

  const PredictionTensor prediction = predict(u, model.param("digit.W"));
  RouteResult routed = route(prediction, a.caps_spec(), model.routing, capture_trace);

  ForwardResult out;
  out.lengths = norm_along(routed.v, 2);
  out.digit_caps = routed.v;
  out.per_type_caps = std::move(routed.v_per_type);
  out.primary_caps = u;
  out.trace = std::move(routed.trace);
  return out;
}

Tensor decode(const Model& model, const Tensor& digit_caps, const Tensor& one_hot_labels) {
  require_one_hot(one_hot_labels);
  const ArchConfig& a = model.arch;
  const std::size_t batch = digit_caps.shape()[0];
  if (digit_caps.shape() != Shape{batch, a.num_classes, a.digit_dim} ||
      one_hot_labels.shape() != Shape{batch, a.num_classes}) {
    throw ShapeError("decode expects capsules [b, " + std::to_string(a.num_classes) + ", " + std::to_string(a.digit_dim) +
                     "] and labels [b, " + std::to_string(a.num_classes) + "], got " + to_string(digit_caps.shape()) +
                     " and " + to_string(one_hot_labels.shape()));
  }
  const Tensor mask = reshape(one_hot_labels, {batch, a.num_classes, 1});
  Tensor x = reshape(digit_caps * mask, {batch, a.num_classes * a.digit_dim});
  x = relu(matmul(x, model.param("decoder.fc1.weight")) + model.param("decoder.fc1.bias"));
  x = relu(matmul(x, model.param("decoder.fc2.weight")) + model.param("decoder.fc2.bias"));
  return sigmoid(matmul(x, model.param("decoder.fc3.weight")) + model.param("decoder.fc3.bias"));
}

Adam::Adam(double beta1, double beta2, double epsilon) : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

void Adam::step(std::vector<Parameter>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam was bound to a different parameter set");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon_);
    }
  }
}

std::vector<int> predict_labels(const Tensor& lengths) {
  const std::size_t batch = lengths.shape()[0];
  const std::size_t classes = lengths.shape()[1];
  const auto v = lengths.values();
  std::vector<int> out(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (v[n * classes + k] > v[n * classes + best]) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

namespace {

void require_finite(const std::string& name, const Tensor& t) {
  if (!all_finite(t)) throw DivergenceError("non-finite values in " + name + " " + to_string(t.shape()));
}

struct LossParts {
  Tensor total;
  Tensor margin;
  Tensor reconstruction;
};

LossParts total_loss(const Model& model, const ForwardResult& fwd, const Tensor& images, const Tensor& labels) {
  const std::size_t batch = images.shape()[0];
  LossParts parts;
  parts.margin = margin_loss(fwd.lengths, labels);
  const Tensor decoded = decode(model, fwd.digit_caps, labels);
  require_finite("decoder output", decoded);
  parts.reconstruction = reconstruction_loss(decoded, reshape(images, {batch, model.arch.pixels()}));
  parts.total = parts.margin + parts.reconstruction * kReconstructionWeight;
  return parts;
}

}  // namespace

StepResult train_step(Model& model, Adam& optimizer, const Batch& batch, double lr, bool capture_trace) {
  for (const auto& p : model.params) require_finite("parameter " + p.name, p.value);
  model.zero_grad();
  const Tensor labels = one_hot(batch.labels, model.arch.num_classes);

  ForwardResult fwd;
  try {
    fwd = forward(model, batch.images, capture_trace);
  } catch (const NonFiniteError& e) {
    throw DivergenceError(std::string("non-finite activation in forward pass: ") + e.what());
  }
  require_finite("digit capsules", fwd.digit_caps);
  require_finite("capsule lengths", fwd.lengths);
  const LossParts loss = total_loss(model, fwd, batch.images, labels);
  require_finite("margin loss", loss.margin);
  require_finite("reconstruction loss", loss.reconstruction);

  StepResult result;
  result.loss = loss.total.item();
  result.margin = loss.margin.item();
  result.reconstruction = loss.reconstruction.item();
  const auto predicted = predict_labels(fwd.lengths);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < predicted.size(); ++n) hits += predicted[n] == batch.labels[n];
  result.accuracy = static_cast<double>(hits) / static_cast<double>(predicted.size());
  result.trace = std::move(fwd.trace);

  loss.total.backward(/*retain_intermediate=*/false);
  for (const auto& p : model.params) {
    if (p.value.has_grad()) {
      const auto g = p.value.grad();
      if (!std::all_of(g.begin(), g.end(), [](double x) { return std::isfinite(x); })) {
        throw DivergenceError("non-finite gradient for parameter " + p.name);
      }
    }
  }
  optimizer.step(model.params, lr);
  return result;
}

CouplingStats coupling_stats(const RoutingTrace& trace) {
  CouplingStats stats;
  if (trace.iterations.empty()) return stats;
  stats.c0 = trace.iterations.front().c.values()[0];
  stats.mean_dc = trace.iterations.size() < 2 ? std::nan("") : trace.iterations.back().mean_abs_dc;
  return stats;
}

EvalResult evaluate(const Model& model, const Dataset& dataset, std::size_t batch_size) {
  if (dataset.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
  NoGradGuard no_grad;
  EvalResult result;
  result.confusion.assign(model.arch.num_classes, std::vector<std::size_t>(model.arch.num_classes, 0));
  BatchIterator it(dataset, batch_size, std::nullopt);
  double loss_sum = 0.0;
  double dc_sum = 0.0;
  std::size_t hits = 0;
  while (auto batch = it.next()) {
    const std::size_t n = batch->labels.size();
    const Tensor labels = one_hot(batch->labels, model.arch.num_classes);
    const ForwardResult fwd = forward(model, batch->images, /*capture_trace=*/true);
    const LossParts loss = total_loss(model, fwd, batch->images, labels);
    loss_sum += loss.total.item() * static_cast<double>(n);
    const CouplingStats stats = coupling_stats(*fwd.trace);
    result.coupling.c0 = stats.c0;
    dc_sum += stats.mean_dc * static_cast<double>(n);
    const auto predicted = predict_labels(fwd.lengths);
    for (std::size_t k = 0; k < n; ++k) {
      hits += predicted[k] == batch->labels[k];
      result.confusion[static_cast<std::size_t>(batch->labels[k])][static_cast<std::size_t>(predicted[k])] += 1;
    }
    result.count += n;
  }
  const double total = static_cast<double>(result.count);
  result.accuracy = static_cast<double>(hits) / total;
  result.mean_loss = loss_sum / total;
  result.coupling.mean_dc = dc_sum / total;
  return result;
}

namespace {

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct ArchField {
  const char* key;
  std::size_t ArchConfig::*member;
};

constexpr ArchField kArchFields[] = {
    {"arch.channels", &ArchConfig::channels},
    {"arch.height", &ArchConfig::height},
    {"arch.width", &ArchConfig::width},
    {"arch.stem_channels", &ArchConfig::stem_channels},
    {"arch.stem_kernel", &ArchConfig::stem_kernel},
    {"arch.stem_stride", &ArchConfig::stem_stride},
    {"arch.primary_types", &ArchConfig::primary_types},
    {"arch.primary_dim", &ArchConfig::primary_dim},
    {"arch.primary_kernel", &ArchConfig::primary_kernel},
    {"arch.primary_stride", &ArchConfig::primary_stride},
    {"arch.num_classes", &ArchConfig::num_classes},
    {"arch.digit_dim", &ArchConfig::digit_dim},
    {"arch.decoder_hidden1", &ArchConfig::decoder_hidden1},
    {"arch.decoder_hidden2", &ArchConfig::decoder_hidden2},
};

const std::string& manifest_value(const Manifest& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw CheckpointError(CheckpointError::Kind::ManifestMismatch, "checkpoint manifest lacks '" + key + "'");
  return it->second;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used == text.size()) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw CheckpointError(CheckpointError::Kind::ManifestMismatch, "bad manifest value " + key + "=" + text);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  put_u64(os, bits);
}

class Reader {
 public:
  Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  std::uint64_t offset() const { return offset_; }

  void read(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(CheckpointError::Kind::Truncated, "truncated checkpoint " + path_.string() + " reading " +
                                                                  what + " at offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read(b, 8, what);
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    return v;
  }

  std::string text(std::uint64_t n, const char* what) {
    if (n > (1u << 24)) {
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            std::string("implausible ") + what + " length in " + path_.string() + " at offset " +
                                std::to_string(offset_));
    }
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

constexpr char kMagic[] = "GCAPS1";

}  // namespace

Manifest model_manifest(const Model& model) {
  Manifest m;
  for (const auto& f : kArchFields) m[f.key] = std::to_string(model.arch.*f.member);
  m["arch.routing_weight_std"] = format_double(model.arch.routing_weight_std);
  m["routing.algorithm"] = model.routing.name();
  m["routing.iterations"] = std::to_string(model.routing.iterations);
  m["precision"] = "f64";
  return m;
}

ArchConfig arch_from_manifest(const Manifest& manifest) {
  ArchConfig arch;
  for (const auto& f : kArchFields) arch.*f.member = parse_size(f.key, manifest_value(manifest, f.key));
  const std::string& std_text = manifest_value(manifest, "arch.routing_weight_std");
  try {
    arch.routing_weight_std = std::stod(std_text);
  } catch (const std::exception&) {
    throw CheckpointError(CheckpointError::Kind::ManifestMismatch, "bad manifest value arch.routing_weight_std=" + std_text);
  }
  return arch;
}

RoutingConfig routing_from_manifest(const Manifest& manifest) {
  const auto iterations = parse_size("routing.iterations", manifest_value(manifest, "routing.iterations"));
  try {
    return RoutingConfig::parse(manifest_value(manifest, "routing.algorithm"), static_cast<int>(iterations));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::ManifestMismatch, e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::string manifest_text;
  for (const auto& [k, v] : model_manifest(model)) manifest_text += k + "=" + v + "\n";

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "cannot write checkpoint " + tmp.string());
    os.write(kMagic, 6);
    put_u64(os, manifest_text.size());
    os.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
    for (const auto& p : model.params) {
      put_u64(os, p.name.size());
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put_u64(os, p.value.rank());
      for (auto d : p.value.shape()) put_u64(os, d);
      for (double x : p.value.values()) put_f64(os, x);
    }
    os.flush();
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[6] = {};
  try {
    r.read(magic, 6, "magic");
  } catch (const CheckpointError&) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "bad checkpoint magic in " + path.string() + " (file too short)");
  }
  if (std::memcmp(magic, kMagic, 6) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "bad checkpoint magic in " + path.string());
  }
  Checkpoint ck;
  const std::string text = r.text(r.u64("manifest length"), "manifest");
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CheckpointError(CheckpointError::Kind::ManifestMismatch, "malformed manifest line '" + line + "' in " + path.string());
    }
    ck.manifest[line.substr(0, eq)] = line.substr(eq + 1);
  }
  while (!r.at_end()) {
    Parameter p;
    p.name = r.text(r.u64("parameter name length"), "parameter name");
    const std::uint64_t rank = r.u64("rank");
    if (rank == 0 || rank > 8) {
      throw CheckpointError(CheckpointError::Kind::Truncated, "implausible rank " + std::to_string(rank) + " for " + p.name +
                                                                  " at offset " + std::to_string(r.offset()));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("dimension");
    std::vector<double> values(numel(shape));
    for (auto& x : values) {
      const std::uint64_t bits = r.u64("values");
      std::memcpy(&x, &bits, 8);
    }
    p.value = Tensor::from(std::move(shape), std::move(values), true);
    ck.params.push_back(std::move(p));
  }
  return ck;
}

Model load_checkpoint(const std::filesystem::path& path, const Manifest& expected) {
  Checkpoint ck = read_checkpoint(path);
  for (const auto& [k, v] : expected) {
    auto it = ck.manifest.find(k);
    if (it == ck.manifest.end() || it->second != v) {
      throw CheckpointError(CheckpointError::Kind::ManifestMismatch,
                            "checkpoint " + path.string() + " has " + k + "=" +
                                (it == ck.manifest.end() ? std::string("<missing>") : it->second) + ", requested " + v);
    }
  }
  Model model = build_model(arch_from_manifest(ck.manifest), routing_from_manifest(ck.manifest), 0);
  if (ck.params.size() != model.params.size()) {
    throw CheckpointError(CheckpointError::Kind::ManifestMismatch,
                          "checkpoint has " + std::to_string(ck.params.size()) + " tensors, model expects " +
                              std::to_string(model.params.size()));
  }
  for (std::size_t k = 0; k < ck.params.size(); ++k) {
    const auto& want = model.params[k];
    const auto& got = ck.params[k];
    if (got.name != want.name || got.value.shape() != want.value.shape()) {
      throw CheckpointError(CheckpointError::Kind::ManifestMismatch,
                            "checkpoint tensor " + got.name + " " + to_string(got.value.shape()) + " does not match " +
                                want.name + " " + to_string(want.value.shape()));
    }
  }
  model.params = std::move(ck.params);
  return model;
}

}  // namespace gcaps
