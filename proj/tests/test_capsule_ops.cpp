#include <gtest/gtest.h>

#include <cmath>

#include "gcaps/capsule_ops.hpp"
#include "gcaps/ops.hpp"
#include "gradcheck.hpp"

using namespace gcaps;
using gcaps::testing::gradcheck;
using gcaps::testing::probe;
using gcaps::testing::random_tensor;
using gcaps::testing::Rng;

namespace {

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> g(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = g(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST(Squash, ZeroStaysZero) {
  const Tensor v = squash(Tensor::zeros({1, 8}), 1);
  for (double x : v.values()) EXPECT_EQ(x, 0.0);
}

TEST(Squash, UnitNormGivesHalf) {
  const Tensor v = squash(Tensor::from({1, 2}, {0.6, 0.8}), 1);
  EXPECT_NEAR(norm(v.values()), 0.5, 1e-9);
  EXPECT_NEAR(v.values()[0] / v.values()[1], 0.75, 1e-12);
}

TEST(Squash, LargeNormApproachesOne) {
  const Tensor v = squash(Tensor::from({1, 2}, {600, 800}), 1);
  EXPECT_NEAR(norm(v.values()), 0.999999, 1e-5);
  EXPECT_LT(norm(v.values()), 1.0);
}

TEST(Squash, NormIsMonotoneAndBounded) {
  Rng rng(4);
  std::uniform_real_distribution<double> scale(0.0, 20.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor a = gaussian({8}, rng, scale(rng));
    const Tensor b = gaussian({8}, rng, scale(rng));
    const double na = norm(a.values()), nb = norm(b.values());
    const double sa = norm(squash(a, 0).values()), sb = norm(squash(b, 0).values());
    EXPECT_LT(sa, 1.0);
    EXPECT_LT(sb, 1.0);
    if (na < nb) EXPECT_LT(sa, sb);
    if (nb < na) EXPECT_LT(sb, sa);
  }
}

TEST(Squash, PreservesDirection) {
  Rng rng(5);
  std::uniform_real_distribution<double> exponent(-5.0, 3.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor s = gaussian({16}, rng, std::pow(10.0, exponent(rng)));
    const Tensor v = squash(s, 0);
    double dot = 0;
    for (std::size_t i = 0; i < 16; ++i) dot += s.values()[i] * v.values()[i];
    EXPECT_NEAR(dot / (norm(s.values()) * norm(v.values())), 1.0, 1e-9);
  }
}

TEST(Squash, AlongMiddleAxis) {
  Rng rng(6);
  const Tensor s = gaussian({2, 3, 4}, rng);
  const Tensor v = squash(s, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k) {
      double sq = 0;
      for (std::size_t d = 0; d < 3; ++d) sq += s.at({n, d, k}) * s.at({n, d, k});
      const double f = sq / ((1 + sq) * (std::sqrt(sq) + kSquashEpsilon));
      for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(v.at({n, d, k}), f * s.at({n, d, k}), 1e-14);
    }
}

TEST(Squash, NonFiniteInputThrows) { EXPECT_THROW(squash(Tensor::from({2}, {NAN, 1}), 0), NonFiniteError); }

TEST(Squash, GradientOfSelfDotMatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto check = gradcheck({random_tensor({3, 5}, rng, -2, 2)}, [](const std::vector<Tensor>& in) {
      const Tensor v = squash(in[0], 1);
      return sum_all(v * v);
    });
    EXPECT_LT(check.max_error, 1e-4) << check.worst;
  }
}

TEST(Squash, GradientIsFiniteNearZero) {
  Tensor s = Tensor::from({1, 3}, {1e-12, -2e-12, 0}, true);
  sum_all(squash(s, 1)).backward();
  for (double g : s.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Predict, IdentityBlocksCopyInput) {
  Rng rng(8);
  const Tensor u = random_tensor({2, 4, 3}, rng);
  std::vector<double> w(4 * 5 * 3 * 3, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t d = 0; d < 3; ++d) w[((i * 5 + j) * 3 + d) * 3 + d] = 1.0;
  const Tensor uh = predict(u, Tensor::from({4, 5, 3, 3}, w)).u_hat;
  ASSERT_EQ(uh.shape(), (Shape{2, 4, 5, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(uh.at({n, i, j, d}), u.at({n, i, d}));
}

TEST(Predict, ZeroWeightsGiveZero) {
  Rng rng(9);
  const Tensor uh = predict(random_tensor({2, 4, 3}, rng), Tensor::zeros({4, 2, 2, 3})).u_hat;
  for (double x : uh.values()) EXPECT_EQ(x, 0.0);
}

TEST(Predict, MatchesExplicitLoop) {
  Rng rng(10);
  const Tensor u = random_tensor({3, 4, 3}, rng);
  const Tensor w = random_tensor({4, 2, 2, 3}, rng);
  const Tensor uh = predict(u, w).u_hat;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t e = 0; e < 2; ++e) {
          double acc = 0;
          for (std::size_t d = 0; d < 3; ++d) acc += w.at({i, j, e, d}) * u.at({n, i, d});
          EXPECT_NEAR(uh.at({n, i, j, e}), acc, 1e-13);
        }
}

TEST(Predict, ShapeMismatchThrows) {
  EXPECT_THROW(predict(Tensor::zeros({1, 4, 3}), Tensor::zeros({5, 2, 2, 3})), ShapeError);
  EXPECT_THROW(predict(Tensor::zeros({1, 4, 3}), Tensor::zeros({4, 2, 2, 4})), ShapeError);
}

TEST(Predict, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  const auto check = gradcheck({random_tensor({2, 4, 3}, rng), random_tensor({4, 2, 2, 3}, rng)},
                               [](const std::vector<Tensor>& in) { return probe(predict(in[0], in[1]).u_hat, 3); });
  EXPECT_LT(check.max_error, 1e-4) << check.worst;
}

TEST(Coupling, ZeroLogitsUpperPerLower) {
  const CouplingMatrix c = coupling_from_logits(zero_logits(2, 1152, 10), AxisMode::UpperPerLower);
  for (double x : c.c.values()) ASSERT_NEAR(x, 0.1, 1e-12);
}

TEST(Coupling, ZeroLogitsLowerPerUpper) {
  const CouplingMatrix c = coupling_from_logits(zero_logits(2, 1152, 10), AxisMode::LowerPerUpper);
  for (double x : c.c.values()) ASSERT_NEAR(x, 1.0 / 1152.0, 1e-12);
  EXPECT_NEAR(c.c.values()[0], 0.0008, 0.00007);
}

TEST(Coupling, ZeroLogitsLowerPerUpperWithinTypes) {
  const CouplingMatrix c =
      coupling_from_logits(zero_logits(2, 1152, 10), AxisMode::LowerPerUpper, TypePartition::uniform(32, 36));
  for (double x : c.c.values()) ASSERT_NEAR(x, 1.0 / 36.0, 1e-12);
  EXPECT_NEAR(c.c.values()[0], 0.028, 0.0003);
}

TEST(Coupling, NormalizationHoldsForRandomLogits) {
  Rng rng(12);
  const TypePartition parts = TypePartition::uniform(3, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const LogitMatrix b{random_tensor({2, 12, 5}, rng, -30, 30)};
    const Tensor up = coupling_from_logits(b, AxisMode::UpperPerLower).c;
    const Tensor up_sums = sum(up, 2);
    for (double s : up_sums.values()) ASSERT_NEAR(s, 1.0, 1e-9);
    const Tensor low = coupling_from_logits(b, AxisMode::LowerPerUpper).c;
    const Tensor low_sums = sum(low, 1);
    for (double s : low_sums.values()) ASSERT_NEAR(s, 1.0, 1e-9);
    const Tensor grouped = coupling_from_logits(b, AxisMode::LowerPerUpper, parts).c;
    for (const auto& g : parts.groups()) {
      const Tensor group_sums = sum(narrow(grouped, 1, g.begin, g.size()), 1);
      for (double s : group_sums.values()) ASSERT_NEAR(s, 1.0, 1e-9);
    }
    for (double x : grouped.values()) ASSERT_GE(x, 0.0);
  }
}

TEST(Coupling, ShiftInvariantWithinGroup) {
  Rng rng(13);
  const TypePartition parts = TypePartition::uniform(2, 3);
  const Tensor b = random_tensor({1, 6, 4}, rng, -3, 3);
  // Shift every logit of upper capsule j=1 inside group 0 (column shift for lower-per-upper).
  std::vector<double> shifted(b.values().begin(), b.values().end());
  for (std::size_t i = 0; i < 3; ++i) shifted[i * 4 + 1] += 17.0;
  const Tensor a = coupling_from_logits({b}, AxisMode::LowerPerUpper, parts).c;
  const Tensor s = coupling_from_logits({Tensor::from({1, 6, 4}, shifted)}, AxisMode::LowerPerUpper, parts).c;
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a.values()[k], s.values()[k], 1e-9);

  // Row shift for upper-per-lower.
  std::vector<double> row(b.values().begin(), b.values().end());
  for (std::size_t j = 0; j < 4; ++j) row[2 * 4 + j] -= 9.0;
  const Tensor c1 = coupling_from_logits({b}, AxisMode::UpperPerLower).c;
  const Tensor c2 = coupling_from_logits({Tensor::from({1, 6, 4}, row)}, AxisMode::UpperPerLower).c;
  for (std::size_t k = 0; k < c1.size(); ++k) EXPECT_NEAR(c1.values()[k], c2.values()[k], 1e-9);
}

TEST(Coupling, BadPartitionThrows) {
  const TypePartition gap({{0, 3}, {4, 6}});
  EXPECT_THROW(coupling_from_logits(zero_logits(1, 6, 2), AxisMode::LowerPerUpper, gap), std::invalid_argument);
  EXPECT_THROW(coupling_from_logits(zero_logits(1, 6, 2), AxisMode::LowerPerUpper, TypePartition::uniform(2, 4)),
               std::invalid_argument);
}

TEST(Coupling, GroupedSoftmaxGradientMatchesFiniteDifferences) {
  Rng rng(14);
  const TypePartition parts = TypePartition::uniform(2, 3);
  for (AxisMode mode : {AxisMode::UpperPerLower, AxisMode::LowerPerUpper}) {
    const auto check = gradcheck({random_tensor({2, 6, 3}, rng, -2, 2)}, [&](const std::vector<Tensor>& in) {
      return probe(coupling_from_logits({in[0]}, mode, parts).c, 5);
    });
    EXPECT_LT(check.max_error, 1e-4) << check.worst;
  }
}

TEST(WeightedSum, SingleLowerCapsule) {
  Rng rng(15);
  const Tensor uh = random_tensor({1, 1, 3, 4}, rng);
  const Tensor s = weighted_sum({Tensor::ones({1, 1, 3})}, {uh});
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(s.values()[k], uh.values()[k]);
}

TEST(WeightedSum, UniformCouplingOverIdenticalPredictions) {
  Rng rng(16);
  const Tensor one = random_tensor({1, 1, 2, 3}, rng);
  std::vector<double> v;
  for (int i = 0; i < 5; ++i) v.insert(v.end(), one.values().begin(), one.values().end());
  const Tensor s = weighted_sum({Tensor::full({1, 5, 2}, 0.2)}, {Tensor::from({1, 5, 2, 3}, v)});
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(s.values()[k], one.values()[k], 1e-15);
}

TEST(WeightedSum, MatchesDoubleLoopWithSubset) {
  Rng rng(17);
  const Tensor c = random_tensor({2, 6, 3}, rng, 0, 1);
  const Tensor uh = random_tensor({2, 6, 3, 4}, rng);
  const TypePartition::Group g{2, 5};
  const Tensor full = weighted_sum({c}, {uh});
  const Tensor part = weighted_sum({c}, {uh}, g);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t d = 0; d < 4; ++d) {
        double all = 0, sub = 0;
        for (std::size_t i = 0; i < 6; ++i) {
          const double term = c.at({n, i, j}) * uh.at({n, i, j, d});
          all += term;
          if (i >= g.begin && i < g.end) sub += term;
        }
        EXPECT_NEAR(full.at({n, j, d}), all, 1e-13);
        EXPECT_NEAR(part.at({n, j, d}), sub, 1e-13);
      }
}

TEST(WeightedSum, SubsetOutOfRangeThrows) {
  EXPECT_THROW(weighted_sum({Tensor::zeros({1, 4, 2})}, {Tensor::zeros({1, 4, 2, 3})}, TypePartition::Group{2, 5}),
               std::out_of_range);
}

TEST(WeightedSum, GroupedStacksSubsets) {
  Rng rng(18);
  const Tensor c = random_tensor({2, 6, 3}, rng, 0, 1);
  const Tensor uh = random_tensor({2, 6, 3, 4}, rng);
  const TypePartition parts = TypePartition::uniform(3, 2);
  const Tensor stacked = grouped_weighted_sum({c}, {uh}, parts);
  ASSERT_EQ(stacked.shape(), (Shape{2, 3, 3, 4}));
  for (std::size_t m = 0; m < 3; ++m) {
    const Tensor one = weighted_sum({c}, {uh}, parts.groups()[m]);
    const Tensor slice = narrow(stacked, 1, m, 1);
    for (std::size_t k = 0; k < one.size(); ++k) EXPECT_NEAR(slice.values()[k], one.values()[k], 1e-14);
  }
}

TEST(WeightedSum, GradientsMatchFiniteDifferences) {
  Rng rng(19);
  const TypePartition parts = TypePartition::uniform(2, 2);
  const auto check = gradcheck({random_tensor({2, 4, 3}, rng), random_tensor({2, 4, 3, 2}, rng)},
                               [&](const std::vector<Tensor>& in) {
                                 return probe(weighted_sum({in[0]}, {in[1]}), 1) +
                                        probe(grouped_weighted_sum({in[0]}, {in[1]}, parts), 2);
                               });
  EXPECT_LT(check.max_error, 1e-4) << check.worst;
}

TEST(Agreement, ZeroOutputLeavesLogits) {
  Rng rng(20);
  const Tensor b = random_tensor({1, 4, 2}, rng);
  const LogitMatrix out = agreement_update({b}, {random_tensor({1, 4, 2, 3}, rng)}, Tensor::zeros({1, 2, 3}));
  for (std::size_t k = 0; k < b.size(); ++k) EXPECT_EQ(out.b.values()[k], b.values()[k]);
}

TEST(Agreement, EqualVectorsOfHalfNorm) {
  const Tensor v = Tensor::from({1, 1, 2}, {0.3, 0.4});
  const LogitMatrix out = agreement_update(zero_logits(1, 1, 1), {Tensor::from({1, 1, 1, 2}, {0.3, 0.4})}, v);
  EXPECT_NEAR(out.b.item(), 0.25, 1e-15);
}

TEST(Agreement, MatchesExplicitLoop) {
  Rng rng(21);
  const Tensor b = random_tensor({2, 5, 3}, rng);
  const Tensor uh = random_tensor({2, 5, 3, 4}, rng);
  const Tensor v = random_tensor({2, 3, 4}, rng);
  const Tensor out = agreement_update({b}, {uh}, v).b;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double dot = 0;
        for (std::size_t d = 0; d < 4; ++d) dot += uh.at({n, i, j, d}) * v.at({n, j, d});
        EXPECT_NEAR(out.at({n, i, j}), b.at({n, i, j}) + dot, 1e-13);
      }
}

TEST(Agreement, ShapeMismatchThrows) {
  EXPECT_THROW(agreement_update(zero_logits(1, 4, 2), {Tensor::zeros({1, 4, 2, 3})}, Tensor::zeros({1, 3, 3})),
               ShapeError);
}

TEST(Agreement, GradientsMatchFiniteDifferences) {
  Rng rng(22);
  const auto check =
      gradcheck({random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 2, 3}, rng), random_tensor({2, 2, 3}, rng)},
                [](const std::vector<Tensor>& in) { return probe(agreement_update({in[0]}, {in[1]}, in[2]).b, 4); });
  EXPECT_LT(check.max_error, 1e-4) << check.worst;
}

TEST(MarginLoss, ExactMarginsGiveZero) {
  std::vector<double> len(10, 0.1);
  len[3] = 0.9;
  const std::vector<int> labels{3};
  EXPECT_NEAR(margin_loss(Tensor::from({1, 10}, len), one_hot(labels, 10)).item(), 0.0, 1e-15);
}

TEST(MarginLoss, ZeroLengthOnTrueClass) {
  const std::vector<int> labels{0};
  EXPECT_NEAR(margin_loss(Tensor::zeros({1, 10}), one_hot(labels, 10)).item(), 0.81, 1e-15);
}

TEST(MarginLoss, MatchesScalarFormula) {
  Rng rng(23);
  std::uniform_int_distribution<int> cls(0, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor len = random_tensor({4, 10}, rng, 0.0, 0.999);
    std::vector<int> labels(4);
    for (auto& l : labels) l = cls(rng);
    double want = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 10; ++k) {
        const double x = len.at({n, k});
        if (static_cast<int>(k) == labels[n]) {
          want += std::pow(std::max(0.0, 0.9 - x), 2);
        } else {
          want += 0.5 * std::pow(std::max(0.0, x - 0.1), 2);
        }
      }
    EXPECT_NEAR(margin_loss(len, one_hot(labels, 10)).item(), want / 4, 1e-14);
  }
}

TEST(MarginLoss, RejectsNonOneHotLabels) {
  EXPECT_THROW(margin_loss(Tensor::zeros({1, 3}), Tensor::from({1, 3}, {1, 1, 0})), std::invalid_argument);
  EXPECT_THROW(margin_loss(Tensor::zeros({1, 3}), Tensor::from({1, 3}, {0.5, 0.5, 0})), std::invalid_argument);
}

TEST(MarginLoss, GradientMatchesFiniteDifferences) {
  Rng rng(24);
  const std::vector<int> labels{1, 0, 2};
  const Tensor y = one_hot(labels, 4);
  const auto check = gradcheck({random_tensor({3, 4}, rng, 0.0, 0.99)},
                               [&](const std::vector<Tensor>& in) { return margin_loss(in[0], y); });
  EXPECT_LT(check.max_error, 1e-4) << check.worst;
}

TEST(ReconstructionLoss, IdenticalIsZero) {
  Rng rng(25);
  const Tensor x = random_tensor({2, 784}, rng, 0, 1);
  EXPECT_EQ(reconstruction_loss(x, x).item(), 0.0);
}

TEST(ReconstructionLoss, ZerosVersusOnes) {
  EXPECT_DOUBLE_EQ(reconstruction_loss(Tensor::zeros({1, 784}), Tensor::ones({1, 784})).item(), 784.0);
  EXPECT_DOUBLE_EQ(784.0 * kReconstructionWeight, 0.392);
}

TEST(ReconstructionLoss, MatchesDoubleLoop) {
  Rng rng(26);
  const Tensor a = random_tensor({3, 20}, rng, 0, 1);
  const Tensor b = random_tensor({3, 20}, rng, 0, 1);
  double want = 0;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t p = 0; p < 20; ++p) want += std::pow(a.at({n, p}) - b.at({n, p}), 2);
  EXPECT_NEAR(reconstruction_loss(a, b).item(), want / 3, 1e-14);
}

TEST(ReconstructionLoss, ShapeMismatchThrows) {
  EXPECT_THROW(reconstruction_loss(Tensor::zeros({1, 4}), Tensor::zeros({1, 5})), ShapeError);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  Rng rng(27);
  const auto check = gradcheck({random_tensor({2, 6}, rng, 0, 1), random_tensor({2, 6}, rng, 0, 1)},
                               [](const std::vector<Tensor>& in) { return reconstruction_loss(in[0], in[1]); });
  EXPECT_LT(check.max_error, 1e-4) << check.worst;
}

TEST(CapsLayerSpec, ReferenceCountsAndValidation) {
  const CapsLayerSpec spec;
  EXPECT_NO_THROW(spec.validate());
  EXPECT_EQ(spec.num_types * spec.caps_per_type, spec.num_lower);
  const auto parts = spec.partition();
  ASSERT_EQ(parts.size(), 32u);
  EXPECT_EQ(parts.groups()[5].begin, 180u);
  EXPECT_EQ(parts.groups()[5].end, 216u);
  CapsLayerSpec bad = spec;
  bad.caps_per_type = 35;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.dim_upper = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
