#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gcaps/network.hpp"
#include "gcaps/ops.hpp"
#include "gradcheck.hpp"

using namespace gcaps;
using gcaps::testing::random_tensor;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.stem_channels = 8;
  a.primary_types = 4;
  a.primary_dim = 4;
  a.digit_dim = 6;
  a.decoder_hidden1 = 16;
  a.decoder_hidden2 = 32;
  return a;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "gcaps_test_network";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Arch, DefaultGeometry) {
  const ArchConfig a;
  EXPECT_EQ(a.stem_height(), 20u);
  EXPECT_EQ(a.grid_height(), 6u);
  EXPECT_EQ(a.caps_per_type(), 36u);
  EXPECT_EQ(a.num_lower(), 1152u);
  const CapsLayerSpec spec = a.caps_spec();
  EXPECT_EQ(spec.num_types, 32u);
  EXPECT_EQ(spec.caps_per_type, 36u);
  const TypePartition p = spec.partition();
  ASSERT_EQ(p.groups().size(), 32u);
  for (std::size_t t = 0; t < 32; ++t) {
    EXPECT_EQ(p.groups()[t].begin, t * 36);
    EXPECT_EQ(p.groups()[t].size(), 36u);
  }
}

TEST(Arch, LargerInputRecomputesGrid) {
  ArchConfig a;
  a.height = a.width = 36;
  EXPECT_EQ(a.stem_height(), 28u);
  EXPECT_EQ(a.grid_height(), 10u);
  EXPECT_EQ(a.num_lower(), 3200u);
}

TEST(Arch, InconsistentGeometryThrows) {
  ArchConfig a;
  a.height = a.width = 12;  // stem 4x4, primary kernel 9 does not fit
  EXPECT_THROW(a.validate(), std::invalid_argument);
  EXPECT_THROW(build_model(a, RoutingConfig::algorithm(1), 1), std::invalid_argument);
  ArchConfig zero;
  zero.primary_types = 0;
  EXPECT_THROW(zero.validate(), std::invalid_argument);
}

TEST(Model, DefaultParameterCountIsFrozen) {
  // stem 20992 + primary 5308672 + W 1474560 + decoder 82432 + 525312 + 803600
  constexpr std::size_t kDefaultParameters = 8215568;
  for (int n = 1; n <= 4; ++n) {
    EXPECT_EQ(build_model(ArchConfig{}, RoutingConfig::algorithm(n), 7).parameter_count(), kDefaultParameters);
  }
  EXPECT_EQ(build_model(ArchConfig{}, RoutingConfig::algorithm(1), 8).parameter_count(), kDefaultParameters);
}

TEST(Model, ParameterNamesAndShapes) {
  const Model m = build_model(ArchConfig{}, RoutingConfig::algorithm(3), 1);
  const char* names[] = {"stem.weight",        "stem.bias",          "primary.weight",     "primary.bias",
                         "digit.W",            "decoder.fc1.weight", "decoder.fc1.bias",   "decoder.fc2.weight",
                         "decoder.fc2.bias",   "decoder.fc3.weight", "decoder.fc3.bias"};
  ASSERT_EQ(m.params.size(), 11u);
  for (std::size_t k = 0; k < 11; ++k) EXPECT_EQ(m.params[k].name, names[k]);
  EXPECT_EQ(m.param("digit.W").shape(), (Shape{1152, 10, 16, 8}));
  EXPECT_EQ(m.param("primary.weight").shape(), (Shape{256, 256, 9, 9}));
  EXPECT_EQ(m.param("decoder.fc3.weight").shape(), (Shape{1024, 784}));
  EXPECT_THROW(m.param("nope"), std::out_of_range);
}

TEST(Model, RoutingWeightsHaveConfiguredStd) {
  const Model m = build_model(ArchConfig{}, RoutingConfig::algorithm(1), 3);
  const auto w = m.param("digit.W").values();
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / w.size();
  double var = 0;
  for (double x : w) var += (x - mean) * (x - mean);
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(std::sqrt(var / w.size()), 0.1, 1e-3);
  for (double b : m.param("stem.bias").values()) EXPECT_EQ(b, 0.0);
}

TEST(Model, SameSeedSameBits) {
  const Model a = build_model(tiny_arch(), RoutingConfig::algorithm(2), 42);
  const Model b = build_model(tiny_arch(), RoutingConfig::algorithm(2), 42);
  const Model c = build_model(tiny_arch(), RoutingConfig::algorithm(2), 43);
  for (std::size_t k = 0; k < a.params.size(); ++k) EXPECT_TRUE(same_bits(a.params[k].value, b.params[k].value));
  EXPECT_FALSE(same_bits(a.param("digit.W"), c.param("digit.W")));
}

TEST(TrainConfig, LearningRateSchedule) {
  const TrainConfig t;
  EXPECT_NEAR(t.learning_rate(0), 0.001, 1e-12);
  EXPECT_NEAR(t.learning_rate(2), 0.00090250, 1e-12);
  for (int e = 0; e < 20; ++e) EXPECT_NEAR(t.learning_rate(e), 0.001 * std::pow(0.95, e), 1e-12);
}

TEST(Forward, ShapesAndRanges) {
  gcaps::testing::Rng rng(1);
  const Tensor images = random_tensor({3, 1, 28, 28}, rng, 0.0, 1.0);
  for (int n = 1; n <= 4; ++n) {
    const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(n), n);
    const ForwardResult f = forward(m, images, true);
    EXPECT_EQ(f.lengths.shape(), (Shape{3, 10}));
    EXPECT_EQ(f.digit_caps.shape(), (Shape{3, 10, 6}));
    EXPECT_EQ(f.primary_caps.shape(), (Shape{3, 144, 4}));
    for (double x : f.lengths.values()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
    EXPECT_EQ(f.per_type_caps.has_value(), n >= 3);
    if (f.per_type_caps) EXPECT_EQ(f.per_type_caps->shape(), (Shape{3, 4, 10, 6}));
    ASSERT_TRUE(f.trace.has_value());
    EXPECT_EQ(f.trace->iterations.size(), 3u);
  }
}

TEST(Forward, RejectsWrongImageShape) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 1);
  EXPECT_THROW(forward(m, Tensor::zeros({2, 1, 27, 28})), ShapeError);
}

TEST(Forward, ZeroImageGivesZeroLengths) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 1);
  const ForwardResult f = forward(m, Tensor::zeros({2, 1, 28, 28}));
  for (double x : f.primary_caps.values()) EXPECT_EQ(x, 0.0);
  for (double x : f.lengths.values()) EXPECT_EQ(x, 0.0);
}

TEST(Forward, PrimaryCapsulesAreTypeMajor) {
  // Recompute the primary conv by hand for one capsule of type 2 at grid (1, 3).
  gcaps::testing::Rng rng(2);
  const ArchConfig a = tiny_arch();
  const Model m = build_model(a, RoutingConfig::algorithm(1), 5);
  const Tensor images = random_tensor({1, 1, 28, 28}, rng, 0.0, 1.0);
  const ForwardResult f = forward(m, images);
  const Tensor stem = relu(conv2d(images, m.param("stem.weight"), {1}, m.param("stem.bias")));
  const Tensor prim = conv2d(stem, m.param("primary.weight"), {2}, m.param("primary.bias"));
  const std::size_t type = 2, row = 1, col = 3;
  std::vector<double> s(4);
  for (std::size_t d = 0; d < 4; ++d) s[d] = prim.values()[((type * 4 + d) * 6 + row) * 6 + col];
  const Tensor want = squash(Tensor::from({4}, s), 0);
  const std::size_t i = type * 36 + row * 6 + col;
  for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(f.primary_caps.values()[i * 4 + d], want.values()[d], 1e-14);
}

TEST(Forward, DeterministicAndGroupedIdentity) {
  gcaps::testing::Rng rng(3);
  const Tensor images = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  for (int n = 3; n <= 4; ++n) {
    const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(n), 9);
    const ForwardResult f1 = forward(m, images);
    const ForwardResult f2 = forward(m, images);
    EXPECT_TRUE(same_bits(f1.lengths, f2.lengths));
    const Tensor combined = squash(sum(*f1.per_type_caps, 1), 2);
    for (std::size_t k = 0; k < combined.size(); ++k)
      EXPECT_NEAR(combined.values()[k], f1.digit_caps.values()[k], 1e-10);
  }
}

TEST(Decode, MaskAndRange) {
  gcaps::testing::Rng rng(4);
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 1);
  const Tensor caps = random_tensor({2, 10, 6}, rng);
  const std::vector<int> labels{3, 7};
  const Tensor out = decode(m, caps, one_hot(labels, 10));
  EXPECT_EQ(out.shape(), (Shape{2, 784}));
  for (double x : out.values()) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
  // Changing a non-selected capsule leaves the reconstruction untouched.
  std::vector<double> v(caps.values().begin(), caps.values().end());
  for (std::size_t d = 0; d < 6; ++d) v[(0 * 10 + 5) * 6 + d] += 1.0;
  const Tensor out2 = decode(m, Tensor::from({2, 10, 6}, v), one_hot(labels, 10));
  EXPECT_TRUE(same_bits(out, out2));
  EXPECT_THROW(decode(m, caps, Tensor::from({2, 10}, std::vector<double>(20, 0.5))), std::invalid_argument);
}


TEST(Decode, ManualDecoderOnMaskedInput) {
  gcaps::testing::Rng rng(5);
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 2);
  const Tensor caps = gcaps::testing::away_from_zero({1, 10, 6}, rng, 0.2, 1.0, false);
  const std::vector<int> label{4};
  std::vector<double> masked(60, 0.0);
  for (std::size_t d = 0; d < 6; ++d) masked[4 * 6 + d] = caps.values()[4 * 6 + d];
  EXPECT_EQ(std::count_if(masked.begin(), masked.end(), [](double x) { return x != 0.0; }), 6);
  Tensor h = Tensor::from({1, 60}, masked);
  h = relu(matmul(h, m.param("decoder.fc1.weight")) + m.param("decoder.fc1.bias"));
  h = relu(matmul(h, m.param("decoder.fc2.weight")) + m.param("decoder.fc2.bias"));
  h = sigmoid(matmul(h, m.param("decoder.fc3.weight")) + m.param("decoder.fc3.bias"));
  const Tensor out = decode(m, caps, one_hot(label, 10));
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out.values()[k], h.values()[k], 1e-14);
}

TEST(Predict, ArgmaxInvariantUnderPositiveScaling) {
  gcaps::testing::Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor lengths = random_tensor({5, 10}, rng, 0.0, 1.0);
    EXPECT_EQ(predict_labels(lengths), predict_labels(lengths * 3.7));
    EXPECT_EQ(predict_labels(lengths), predict_labels(lengths * 0.01));
  }
  EXPECT_EQ(predict_labels(Tensor::from({1, 3}, {0.2, 0.9, 0.9})), std::vector<int>{1});
}

TEST(TrainStep, MemorizationLossFallsAndReachesFullAccuracy) {
  const Dataset data = synthetic_dataset(11, 32);
  for (int n = 1; n <= 4; ++n) {
    Model m = build_model(tiny_arch(), RoutingConfig::algorithm(n), 3);
    Adam adam;
    const Batch batch{data.images, data.labels, {}};
    std::vector<double> losses;
    double accuracy = 0.0;
    int step = 0;
    for (; step < 200; ++step) {
      const StepResult r = train_step(m, adam, batch, 0.001);
      if (step < 50) losses.push_back(r.loss);
      accuracy = r.accuracy;
      if (step >= 50 && accuracy == 1.0) break;
    }
    // Trend over 50 steps: every 10-step window mean below the previous one.
    for (std::size_t w = 1; w < 5; ++w) {
      const double prev = std::accumulate(losses.begin() + (w - 1) * 10, losses.begin() + w * 10, 0.0);
      const double cur = std::accumulate(losses.begin() + w * 10, losses.begin() + (w + 1) * 10, 0.0);
      EXPECT_LT(cur, prev) << "alg" << n << " window " << w;
    }
    EXPECT_LT(losses.back(), losses.front()) << "alg" << n;
    EXPECT_EQ(accuracy, 1.0) << "alg" << n << " after " << step << " steps";
    EXPECT_EQ(adam.steps(), std::min(step + 1, 200));
  }
}

TEST(TrainStep, NonFiniteParameterIsNamed) {
  const Dataset data = synthetic_dataset(1, 10);
  Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 1);
  for (auto& p : m.params)
    if (p.name == "primary.bias") p.value.mutable_values()[3] = std::nan("");
  Adam adam;
  try {
    train_step(m, adam, Batch{data.images, data.labels, {}}, 0.001);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("primary.bias"), std::string::npos) << e.what();
  }
}

TEST(TrainStep, CapturesTraceWhenAsked) {
  const Dataset data = synthetic_dataset(1, 10);
  Model m = build_model(tiny_arch(), RoutingConfig::algorithm(2), 1);
  Adam adam;
  const StepResult r = train_step(m, adam, Batch{data.images, data.labels, {}}, 0.001, true);
  ASSERT_TRUE(r.trace.has_value());
  const CouplingStats stats = coupling_stats(*r.trace);
  EXPECT_DOUBLE_EQ(stats.c0, 1.0 / 144);
  EXPECT_TRUE(std::isfinite(stats.mean_dc));
  EXPECT_NEAR(r.loss, r.margin + 0.0005 * r.reconstruction, 1e-12);
}

TEST(Evaluate, PureDeterministicAndCounted) {
  const Dataset data = synthetic_dataset(2, 50);
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(3), 4);
  const Tensor before = m.param("digit.W");
  const std::vector<double> snapshot(before.values().begin(), before.values().end());
  const EvalResult a = evaluate(m, data, 16);
  const EvalResult b = evaluate(m, data, 16);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mean_loss, b.mean_loss);
  // Other batch sizes change GEMM blocking; losses agree to rounding.
  EXPECT_NEAR(evaluate(m, data, 7).mean_loss, a.mean_loss, 1e-9);
  EXPECT_EQ(a.count, 50u);
  EXPECT_TRUE(std::equal(snapshot.begin(), snapshot.end(), m.param("digit.W").values().begin()));
  ASSERT_EQ(a.confusion.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k)
    EXPECT_EQ(std::accumulate(a.confusion[k].begin(), a.confusion[k].end(), std::size_t{0}), 5u);
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Evaluate, EmptyDatasetThrows) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 4);
  const Dataset empty;
  EXPECT_THROW(evaluate(m, empty, 8), std::invalid_argument);
}

TEST(Evaluate, UntrainedModelsNearChance) {
  // Balanced labels on unstructured images: an untrained model can only guess.
  gcaps::testing::Rng rng(3);
  Dataset data;
  data.images = random_tensor({200, 1, 28, 28}, rng, 0.0, 1.0);
  for (int k = 0; k < 200; ++k) data.labels.push_back(k % 10);
  double total = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s)
    total += evaluate(build_model(tiny_arch(), RoutingConfig::algorithm(1 + s % 4), 100 + s), data).accuracy;
  EXPECT_NEAR(total / seeds, 0.1, 0.05);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(4, 2), 5);
  const auto path = temp_path("roundtrip.gcaps");
  save_checkpoint(path, m);
  const Model back = load_checkpoint(path, model_manifest(m));
  EXPECT_EQ(back.routing, m.routing);
  EXPECT_EQ(back.arch.stem_channels, 8u);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t k = 0; k < m.params.size(); ++k) {
    EXPECT_EQ(back.params[k].name, m.params[k].name);
    EXPECT_TRUE(same_bits(back.params[k].value, m.params[k].value)) << m.params[k].name;
  }
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}

TEST(Checkpoint, LayoutStartsWithMagicAndManifest) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 5);
  const auto path = temp_path("layout.gcaps");
  save_checkpoint(path, m);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_GT(bytes.size(), 14u);
  EXPECT_EQ(bytes.substr(0, 6), "GCAPS1");
  std::uint64_t len = 0;
  for (int k = 7; k >= 0; --k) len = (len << 8) | static_cast<unsigned char>(bytes[6 + k]);
  const std::string manifest = bytes.substr(14, len);
  EXPECT_NE(manifest.find("routing.algorithm=alg1"), std::string::npos);
  EXPECT_NE(manifest.find("arch.stem_channels=8"), std::string::npos);
  EXPECT_NE(manifest.find("arch.routing_weight_std="), std::string::npos);
  std::size_t expected = 14 + len;
  for (const auto& p : m.params) expected += 8 + p.name.size() + 8 + 8 * p.value.rank() + 8 * p.value.size();
  EXPECT_EQ(bytes.size(), expected);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(1), 5);
  const auto good = temp_path("good.gcaps");
  save_checkpoint(good, m);
  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});

  const auto bad = temp_path("bad.gcaps");
  {
    std::ofstream out(bad, std::ios::binary);
    out << "XCAPS1" << bytes.substr(6);
  }
  try {
    read_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::BadMagic);
    EXPECT_NE(std::string(e.what()).find("bad checkpoint magic"), std::string::npos) << e.what();
  }
  {
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 5);
  }
  try {
    read_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Truncated);
  }
  try {
    load_checkpoint(temp_path("missing.gcaps"));
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Io);
  }
}

TEST(Checkpoint, ManifestMismatchIsRejected) {
  const Model m = build_model(tiny_arch(), RoutingConfig::algorithm(3), 5);
  const auto path = temp_path("mismatch.gcaps");
  save_checkpoint(path, m);
  Manifest expected = model_manifest(m);
  expected["routing.algorithm"] = "alg1";
  try {
    load_checkpoint(path, expected);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::ManifestMismatch);
    EXPECT_NE(std::string(e.what()).find("routing.algorithm"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(load_checkpoint(path, {{"arch.primary_types", "4"}}));
}

TEST(Checkpoint, ManifestRoundTripsConfigs) {
  ArchConfig a = tiny_arch();
  a.routing_weight_std = 0.0731;
  const Model m = build_model(a, RoutingConfig::algorithm(2, 5), 1);
  const Manifest man = model_manifest(m);
  const ArchConfig back = arch_from_manifest(man);
  EXPECT_EQ(back.routing_weight_std, 0.0731);
  EXPECT_EQ(back.decoder_hidden2, 32u);
  EXPECT_EQ(routing_from_manifest(man), RoutingConfig::algorithm(2, 5));
  EXPECT_EQ(man.at("precision"), "f64");
}
