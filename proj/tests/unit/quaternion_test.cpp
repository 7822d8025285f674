#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "oracles.hpp"
#include "qbn/gradcheck.hpp"
#include "qbn/quaternion.hpp"
#include "test_util.hpp"

using namespace qbn;
using test::random_tensor;

namespace {

Quaternion random_quaternion(CounterRng& rng) {
  return {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2),
          rng.uniform(-2, 2)};
}

std::array<double, 4> as_array(const Quaternion& q) {
  return {q.r, q.i, q.j, q.k};
}

QuaternionFeatureStack<double> random_stack(const Shape& shape,
                                            std::uint64_t seed) {
  QuaternionFeatureStack<double> s;
  for (std::size_t c = 0; c < 4; ++c) s[c] = random_tensor(shape, seed + c);
  return s;
}

QuaternionFeatureStack<double> constant_stack(const Shape& shape, double v) {
  QuaternionFeatureStack<double> s;
  for (std::size_t c = 0; c < 4; ++c) s[c] = TensorD::full(shape, v, true);
  return s;
}

// coefficient[c][a][b]: contribution of (v_a * w_b) to output component c,
// read off the basis table by multiplying unit quaternions.
std::array<std::array<std::array<double, 4>, 4>, 4> basis_coefficients() {
  std::array<std::array<std::array<double, 4>, 4>, 4> coef{};
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) {
      std::array<double, 4> ea{}, eb{};
      ea[a] = 1.0;
      eb[b] = 1.0;
      const auto p = oracle::quaternion_basis_product(ea, eb);
      for (std::size_t c = 0; c < 4; ++c) coef[c][a][b] = p[c];
    }
  return coef;
}

}  // namespace

TEST(HamiltonProduct, RealUnitIsLeftIdentityAndRealPartScales) {
  CounterRng rng(5);
  for (int n = 0; n < 200; ++n) {
    const Quaternion w = random_quaternion(rng);
    EXPECT_EQ(hamilton_product({1, 0, 0, 0}, w), w);
    const double r = rng.uniform(-3, 3);
    const Quaternion scaled = hamilton_product({r, 0, 0, 0}, w);
    EXPECT_DOUBLE_EQ(scaled.r, r * w.r);
    EXPECT_DOUBLE_EQ(scaled.i, r * w.i);
    EXPECT_DOUBLE_EQ(scaled.j, r * w.j);
    EXPECT_DOUBLE_EQ(scaled.k, r * w.k);
  }
}

TEST(HamiltonProduct, BasisIJGivesK) {
  EXPECT_EQ(hamilton_product({0, 1, 0, 0}, {0, 0, 1, 0}),
            (Quaternion{0, 0, 0, 1}));
}

TEST(HamiltonProduct, SwappingOperandsFlipsK) {
  const Quaternion ij = hamilton_product({0, 1, 0, 0}, {0, 0, 1, 0});
  const Quaternion ji = hamilton_product({0, 0, 1, 0}, {0, 1, 0, 0});
  EXPECT_EQ(ji.k, -ij.k);
  EXPECT_EQ(ji.r, 0.0);
  EXPECT_EQ(ji.i, 0.0);
  EXPECT_EQ(ji.j, 0.0);
}

TEST(HamiltonProduct, WorkedExample) {
  const Quaternion p = hamilton_product({1, 2, 3, 4}, {5, 6, 7, 8});
  EXPECT_EQ(p, (Quaternion{-60, 12, 30, 24}));
  const auto expected =
      oracle::quaternion_basis_product({1, 2, 3, 4}, {5, 6, 7, 8});
  EXPECT_EQ(as_array(p), expected);
}

TEST(HamiltonProduct, MatchesBasisTableOracle) {
  CounterRng rng(9);
  for (int n = 0; n < 500; ++n) {
    const Quaternion v = random_quaternion(rng), w = random_quaternion(rng);
    const auto expected =
        oracle::quaternion_basis_product(as_array(v), as_array(w));
    const auto got = as_array(hamilton_product(v, w));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got[c], expected[c], 1e-12);
  }
}

TEST(HamiltonProduct, NormIsMultiplicative) {
  CounterRng rng(11);
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const Quaternion v = random_quaternion(rng), w = random_quaternion(rng);
    worst = std::max(worst, test::rel_err(hamilton_product(v, w).norm(),
                                          v.norm() * w.norm()));
  }
  EXPECT_LT(worst, 1e-5);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          start).count(),
            1.0);
}

TEST(HamiltonProduct, TensorFormAgreesElementwise) {
  const auto v = random_stack({3, 5}, 20), w = random_stack({3, 5}, 40);
  const auto p = hamilton_product(v, w);
  for (std::size_t e = 0; e < 15; ++e) {
    const Quaternion qv{v[0].values()[e], v[1].values()[e], v[2].values()[e],
                        v[3].values()[e]};
    const Quaternion qw{w[0].values()[e], w[1].values()[e], w[2].values()[e],
                        w[3].values()[e]};
    const Quaternion q = hamilton_product(qv, qw);
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(p[c].values()[e], q[c], 1e-14);
  }
}

TEST(HamiltonProduct, TensorFormPassesGradcheck) {
  const auto v = random_stack({2, 3}, 60), w = random_stack({2, 3}, 70);
  NamedTensors<double> inputs;
  for (std::size_t c = 0; c < 4; ++c) {
    inputs.emplace_back(std::string("v.") + kComponentNames[c], v[c]);
    inputs.emplace_back(std::string("w.") + kComponentNames[c], w[c]);
  }
  const auto report = gradcheck<double>(
      [&] {
        const auto p = hamilton_product(v, w);
        return concat<double>({p[0], p[1], p[2], p[3]}, 0);
      },
      inputs, {.eps = 1e-4, .tol = 1e-3});
  EXPECT_TRUE(report.passed) << report.max_rel_error << " at "
                             << report.worst_input;
}

TEST(QuaternionScores, AllOnesGivesSignSums) {
  const auto g = quaternion_scores(constant_stack({1, 1}, 1.0),
                                   constant_stack({1, 1}, 1.0));
  EXPECT_DOUBLE_EQ(g.score[kReal].item(), -2.0);
  EXPECT_DOUBLE_EQ(g.score[kI].item(), 2.0);
  EXPECT_DOUBLE_EQ(g.score[kJ].item(), 2.0);
  EXPECT_DOUBLE_EQ(g.score[kK].item(), 2.0);
}

TEST(QuaternionScores, ZeroTextStackGivesZeroMaps) {
  const auto g = quaternion_scores(random_stack({2, 4}, 1),
                                   constant_stack({3, 4}, 0.0));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(g.score[c].shape(), (Shape{2, 3}));
    for (double x : g.score[c].values()) EXPECT_EQ(x, 0.0);
  }
}

TEST(QuaternionScores, MatchesBruteForcePairExpansion) {
  const std::size_t nq = 2, nk = 3, d = 4;
  const auto v = random_stack({nq, d}, 100), w = random_stack({nk, d}, 200);
  const auto g = quaternion_scores(v, w);
  const auto coef = basis_coefficients();
  double worst = 0.0;
  for (std::size_t a = 0; a < nq; ++a)
    for (std::size_t b = 0; b < nk; ++b) {
      // Per-pair scaled dot products of every (visual layer, text layer).
      double pair[4][4];
      for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t y = 0; y < 4; ++y) {
          const auto vm = test::to_matrix(v[x], nq, d);
          const auto wm = test::to_matrix(w[y], nk, d);
          pair[x][y] = oracle::dot(vm[a], wm[b]) / std::sqrt(double(d));
        }
      for (std::size_t c = 0; c < 4; ++c) {
        double expected = 0.0;
        for (std::size_t x = 0; x < 4; ++x)
          for (std::size_t y = 0; y < 4; ++y)
            expected += coef[c][x][y] * pair[x][y];
        worst = std::max(worst,
                         test::rel_err(g.score[c].at({a, b}), expected));
      }
    }
  EXPECT_LT(worst, 1e-6);
}

TEST(QuaternionScores, BilinearInEachStack) {
  const auto v = random_stack({3, 4}, 300), w = random_stack({5, 4}, 400);
  const auto base = quaternion_scores(v, w);
  QuaternionFeatureStack<double> v2, w2;
  for (std::size_t c = 0; c < 4; ++c) {
    v2[c] = scale(v[c], 2.0);
    w2[c] = scale(w[c], 2.0);
  }
  for (const auto& scaled : {quaternion_scores(v2, w), quaternion_scores(v, w2)})
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t e = 0; e < base.score[c].numel(); ++e)
        EXPECT_EQ(scaled.score[c].values()[e], 2.0 * base.score[c].values()[e]);
}

TEST(QuaternionScores, ChannelMismatchIsDimensionError) {
  EXPECT_THROW(quaternion_scores(random_stack({2, 4}, 1), random_stack({2, 3}, 2)),
               DimensionError);
  auto ragged = random_stack({2, 4}, 3);
  ragged[kJ] = random_tensor({2, 5}, 9);
  EXPECT_THROW(quaternion_scores(ragged, random_stack({2, 4}, 2)),
               DimensionError);
}

TEST(QuaternionScores, BatchedMatchesPerExample) {
  const auto v = random_stack({2, 3, 4}, 500), w = random_stack({2, 5, 4}, 600);
  const auto g = quaternion_scores(v, w);
  for (std::size_t b = 0; b < 2; ++b) {
    QuaternionFeatureStack<double> vb, wb;
    for (std::size_t c = 0; c < 4; ++c) {
      vb[c] = reshape(slice(v[c], 0, b, b + 1), {3, 4});
      wb[c] = reshape(slice(w[c], 0, b, b + 1), {5, 4});
    }
    const auto gb = quaternion_scores(vb, wb);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t e = 0; e < 15; ++e)
        EXPECT_NEAR(g.score[c].values()[b * 15 + e], gb.score[c].values()[e],
                    1e-14);
  }
}

TEST(QuaternionSoftmax, ClosedFormRows) {
  QuaternionGate<double> s;
  s.score[kReal] = TensorD({1, 1}, {42.0});
  s.score[kI] = TensorD({1, 2}, {-3.5, -3.5});
  s.score[kJ] = TensorD({1, 2}, {0.0, std::log(3.0)});
  s.score[kK] = TensorD({1, 1}, {-1e4});
  const auto g = quaternion_softmax(s);
  EXPECT_DOUBLE_EQ(g.gate[kReal].item(), 1.0);
  EXPECT_DOUBLE_EQ(g.gate[kI].at({0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(g.gate[kI].at({0, 1}), 0.5);
  EXPECT_NEAR(g.gate[kJ].at({0, 0}), 0.25, 1e-15);
  EXPECT_NEAR(g.gate[kJ].at({0, 1}), 0.75, 1e-15);
  EXPECT_DOUBLE_EQ(g.gate[kK].item(), 1.0);
}

TEST(QuaternionSoftmax, GatesRowStochasticAndMaskedKeysZero) {
  const auto v = random_stack({2, 4, 6}, 700), w = random_stack({2, 5, 6}, 800);
  const KeyMask mask(2, 5, {1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
  const auto g = quaternion_softmax(quaternion_scores(v, w), &mask);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t row = 0; row < 4; ++row) {
        double total = 0.0;
        for (std::size_t key = 0; key < 5; ++key) {
          const double x = g.gate[c].at({b, row, key});
          EXPECT_GE(x, 0.0);
          if (!mask.valid(b, key)) {
            EXPECT_EQ(x, 0.0);
          }
          total += x;
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(QuaternionSoftmax, FullyMaskedRowIsContractError) {
  const auto v = random_stack({1, 2, 3}, 1), w = random_stack({1, 2, 3}, 2);
  const KeyMask mask(1, 2, {0, 0});
  EXPECT_THROW(quaternion_softmax(quaternion_scores(v, w), &mask),
               ContractError);
}

TEST(QuaternionSoftmax, ScorePipelinePassesGradcheck) {
  const auto v = random_stack({3, 4}, 900), w = random_stack({2, 4}, 1000);
  NamedTensors<double> inputs;
  for (std::size_t c = 0; c < 4; ++c) {
    inputs.emplace_back(std::string("v.") + kComponentNames[c], v[c]);
    inputs.emplace_back(std::string("w.") + kComponentNames[c], w[c]);
  }
  const auto report = gradcheck<double>(
      [&] {
        const auto g = quaternion_softmax(quaternion_scores(v, w));
        return concat<double>({g.gate[0], g.gate[1], g.gate[2], g.gate[3]}, 0);
      },
      inputs, {.eps = 1e-4, .tol = 1e-3});
  EXPECT_TRUE(report.passed) << report.max_rel_error << " at "
                             << report.worst_input;
}
