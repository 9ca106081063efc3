#include <gtest/gtest.h>

#include "cdcnas/cdc.hpp"
#include "cdcnas/gradcheck.hpp"
#include "oracles.hpp"

namespace cdcnas {
namespace {

using Tf = Tensor<float>;
using Td = Tensor<double>;

Tf run_cdc(const Tf& x, const Tf& w, const CdcConfig& cfg) {
  Tape<float> tape(false);
  return cdc_forward(tape.constant(x), tape.constant(w), cfg).value();
}

Tf run_conv(const Tf& x, const Tf& w, const Conv3dOptions& o) {
  Tape<float> tape(false);
  return conv3d(tape.constant(x), tape.constant(w), o).value();
}

oracle::Kind kind_of(CdcVariant v) {
  return v == CdcVariant::ST ? oracle::Kind::ST : v == CdcVariant::T ? oracle::Kind::T : oracle::Kind::TR;
}

TEST(Geometry, Cube3Offsets) {
  const auto g = make_geometry(3, 3, 3);
  ASSERT_EQ(g.kernel.offsets.size(), 27u);
  EXPECT_EQ(g.kernel.offsets.front(), (Offset{-1, -1, -1}));
  EXPECT_EQ(g.kernel.offsets[1], (Offset{-1, -1, 0}));
  EXPECT_EQ(g.kernel.offsets.back(), (Offset{1, 1, 1}));
  ASSERT_TRUE(g.kernel.center_index.has_value());
  EXPECT_EQ(*g.kernel.center_index, 13u);
  EXPECT_EQ(g.partition.current_step.size(), 9u);
  EXPECT_EQ(g.partition.adjacent_steps.size(), 18u);
  EXPECT_EQ(g.partition.temporal_centers.size(), 3u);
  for (std::size_t i = 0; i < 27; ++i) {
    const auto& a = g.kernel.offsets[i];
    EXPECT_EQ(g.kernel.offsets[26 - i], (Offset{-a.t, -a.h, -a.w}));
  }
}

TEST(Geometry, SpatialOnlyKernelHasNoAdjacentSteps) {
  const auto g = make_geometry(1, 3, 3);
  EXPECT_TRUE(g.partition.adjacent_steps.empty());
  Rng rng(1);
  const Tf x = Tf::randn({1, 2, 4, 5, 5}, rng), w = Tf::randn({2, 2, 1, 3, 3}, rng);
  const auto cfg = CdcConfig::make(CdcVariant::T, 0.8, {1, 3, 3});
  EXPECT_EQ(run_cdc(x, w, cfg), run_conv(x, w, cfg.conv));
}

TEST(Geometry, FiveTapTemporal) {
  const auto g = make_geometry(5, 1, 1);
  std::vector<Offset> adj;
  for (int i : g.partition.adjacent_steps) adj.push_back(g.kernel.offsets[i]);
  EXPECT_EQ(adj, (std::vector<Offset>{{-2, 0, 0}, {-1, 0, 0}, {1, 0, 0}, {2, 0, 0}}));
  EXPECT_EQ(g.partition.temporal_centers.size(), 5u);
}

TEST(Geometry, DilationScalesOffsets) {
  const auto g = make_geometry(3, 1, 3, {2, 1, 3});
  EXPECT_EQ(g.kernel.offsets.front(), (Offset{-2, 0, -3}));
}

TEST(Geometry, PartitionIsDisjointCover) {
  for (auto e : std::vector<std::array<int, 3>>{{3, 3, 3}, {5, 1, 1}, {1, 3, 3}, {3, 1, 1}, {2, 2, 2}}) {
    const auto g = make_geometry(e[0], e[1], e[2]);
    std::vector<int> seen(g.kernel.offsets.size(), 0);
    for (int i : g.partition.current_step) ++seen[i];
    for (int i : g.partition.adjacent_steps) ++seen[i];
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(CdcConfig, RejectsEvenExtentsAndBadTheta) {
  EXPECT_THROW(CdcConfig::make(CdcVariant::ST, 0.5, {3, 2, 3}), ShapeError);
  EXPECT_THROW(CdcConfig::make(CdcVariant::TR, 0.5, {2, 1, 1}), ShapeError);
  EXPECT_THROW(CdcConfig::make(CdcVariant::T, 1.5, {3, 3, 3}), ConfigError);
  EXPECT_THROW(CdcConfig::make(CdcVariant::T, -0.1, {3, 3, 3}), ConfigError);
  EXPECT_NO_THROW(CdcConfig::make(CdcVariant::Vanilla, 0.0, {2, 2, 2}));
}

TEST(CdcConfig, WrongVariantEntryPointRejected) {
  Tape<float> tape(false);
  auto x = tape.constant(Tf({1, 1, 3, 3, 3}));
  auto w = tape.constant(Tf({1, 1, 3, 3, 3}));
  EXPECT_THROW(cdc_st_forward(x, w, CdcConfig::make(CdcVariant::T, 0.5, {3, 3, 3})), ConfigError);
  EXPECT_NO_THROW(cdc_t_forward(x, w, CdcConfig::make(CdcVariant::T, 0.5, {3, 3, 3})));
}

TEST(CdcDegeneracy, ThetaZeroIsBitIdenticalToConv) {
  Rng rng(2);
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (auto k : std::vector<std::array<int, 3>>{{3, 3, 3}, {3, 1, 1}, {5, 1, 1}}) {
      const Tf x = Tf::randn({2, 3, 6, 5, 5}, rng), w = Tf::randn({4, 3, k[0], k[1], k[2]}, rng);
      const auto cfg = CdcConfig::make(v, 0.0, k, {2, 1, 1});
      EXPECT_EQ(run_cdc(x, w, cfg), run_conv(x, w, cfg.conv)) << to_string(v);
    }
  }
}

TEST(CdcSt, ConstantInputThetaOneVanishesInInterior) {
  Rng rng(3);
  const Tf x = Tf::full({1, 2, 5, 6, 6}, 1.7f), w = Tf::randn({3, 2, 3, 3, 3}, rng);
  const Tf y = run_cdc(x, w, CdcConfig::make(CdcVariant::ST, 1.0, {3, 3, 3}));
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t t = 1; t < 4; ++t)
      for (std::int64_t h = 1; h < 5; ++h)
        for (std::int64_t v = 1; v < 5; ++v) EXPECT_NEAR(y.at(0, c, t, h, v), 0.0f, 1e-5);
}

TEST(CdcT, TemporallyConstantInputKeepsCentreTap) {
  Rng rng(4);
  Tf x({1, 1, 6, 3, 3});
  for (std::int64_t h = 0; h < 3; ++h)
    for (std::int64_t v = 0; v < 3; ++v) {
      const float val = static_cast<float>(rng.normal());
      for (std::int64_t t = 0; t < 6; ++t) x.at(0, 0, t, h, v) = val;
    }
  const Tf w = Tf::randn({1, 1, 3, 1, 1}, rng);
  const Tf y = run_cdc(x, w, CdcConfig::make(CdcVariant::T, 1.0, {3, 1, 1}));
  for (std::int64_t t = 1; t < 5; ++t)
    for (std::int64_t h = 0; h < 3; ++h)
      for (std::int64_t v = 0; v < 3; ++v) EXPECT_NEAR(y.at(0, 0, t, h, v), w[1] * x.at(0, 0, t, h, v), 1e-5);
}

TEST(CdcTr, ConstantInputMatchesTInInterior) {
  Rng rng(5);
  const Tf x = Tf::full({1, 2, 6, 5, 5}, -0.4f), w = Tf::randn({2, 2, 3, 3, 3}, rng);
  const Tf tr = run_cdc(x, w, CdcConfig::make(CdcVariant::TR, 0.45, {3, 3, 3}));
  const Tf t = run_cdc(x, w, CdcConfig::make(CdcVariant::T, 0.45, {3, 3, 3}));
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t tt = 1; tt < 5; ++tt)
      for (std::int64_t h = 0; h < 5; ++h)
        for (std::int64_t v = 0; v < 5; ++v) EXPECT_NEAR(tr.at(0, c, tt, h, v), t.at(0, c, tt, h, v), 1e-5);
}

struct LiteralCase {
  CdcVariant variant;
  Shape5 x;
  double theta;
};

class CdcLiteral : public ::testing::TestWithParam<LiteralCase> {};

TEST_P(CdcLiteral, MatchesNestedLoopDefinition) {
  const auto& p = GetParam();
  Rng rng(6);
  const Tf x = Tf::randn(p.x, rng), w = Tf::randn({3, p.x.c(), 3, 3, 3}, rng);
  const Tf y = run_cdc(x, w, CdcConfig::make(p.variant, p.theta, {3, 3, 3}));
  EXPECT_LE(max_rel_diff(y, oracle::cdc_literal(x, w, kind_of(p.variant), p.theta)), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Examples, CdcLiteral,
                         ::testing::Values(LiteralCase{CdcVariant::ST, {1, 2, 5, 6, 6}, 0.7},
                                           LiteralCase{CdcVariant::T, {1, 2, 6, 5, 5}, 0.6},
                                           LiteralCase{CdcVariant::TR, {1, 2, 6, 5, 5}, 0.3}),
                         [](const auto& info) { return std::string(to_string(info.param.variant)); });

// Property: 200 random (x, w, theta, shape, stride) per variant.
TEST(CdcLiteralProperty, DecomposedEqualsLiteral) {
  Rng rng(7);
  const std::vector<std::array<int, 3>> kernels{{3, 3, 3}, {3, 1, 1}, {5, 1, 1}, {1, 3, 3}, {3, 3, 1}};
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (int i = 0; i < 200; ++i) {
      const auto k = kernels[rng.below(kernels.size())];
      const std::array<int, 3> stride{1 + static_cast<int>(rng.below(2)), 1 + static_cast<int>(rng.below(2)),
                                      1 + static_cast<int>(rng.below(2))};
      const Shape5 xs{1 + static_cast<std::int64_t>(rng.below(2)), 1 + static_cast<std::int64_t>(rng.below(3)),
                      1 + static_cast<std::int64_t>(rng.below(7)), 1 + static_cast<std::int64_t>(rng.below(6)),
                      1 + static_cast<std::int64_t>(rng.below(6))};
      const double theta = rng.uniform();
      const Tf x = Tf::randn(xs, rng);
      const Tf w = Tf::randn({1 + static_cast<std::int64_t>(rng.below(3)), xs.c(), k[0], k[1], k[2]}, rng);
      const Tf y = run_cdc(x, w, CdcConfig::make(v, theta, k, stride));
      const Tf ref = oracle::cdc_literal(x, w, kind_of(v), theta, stride);
      ASSERT_LE(max_rel_diff(y, ref), 1e-5) << to_string(v) << " case " << i << " x " << xs.str();
    }
  }
}

TEST(CdcTheta, OutputIsAffineInTheta) {
  Rng rng(8);
  const Tf x = Tf::randn({1, 2, 5, 6, 6}, rng), w = Tf::randn({3, 2, 3, 3, 3}, rng);
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    const Tf y0 = run_cdc(x, w, CdcConfig::make(v, 0.0, {3, 3, 3}));
    const Tf y1 = run_cdc(x, w, CdcConfig::make(v, 1.0, {3, 3, 3}));
    for (double theta : {0.25, 0.6, 0.9}) {
      const Tf y = run_cdc(x, w, CdcConfig::make(v, theta, {3, 3, 3}));
      Tf blend(y.shape());
      for (std::int64_t i = 0; i < y.numel(); ++i)
        blend[i] = static_cast<float>((1.0 - theta) * y0[i] + theta * y1[i]);
      EXPECT_LE(max_rel_diff(y, blend), 1e-5) << to_string(v) << " theta " << theta;
    }
  }
}

TEST(CdcParameters, KernelShapeMatchesVanilla) {
  Tape<float> tape(false);
  auto x = tape.constant(Tf({1, 2, 4, 4, 4}));
  for (auto v : {CdcVariant::Vanilla, CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (double theta : {0.0, 0.3, 0.6, 1.0}) {
      const auto cfg = CdcConfig::make(v, theta, {3, 3, 3});
      // Only a vanilla-shaped kernel is accepted.
      EXPECT_NO_THROW(cdc_forward(x, tape.constant(Tf({3, 2, 3, 3, 3})), cfg));
      EXPECT_THROW(cdc_forward(x, tape.constant(Tf({3, 2, 3, 1, 1})), cfg), ShapeError);
    }
  }
}

TEST(CdcBackward, ThetaZeroGradientsEqualConv) {
  Rng rng(9);
  const Tf x0 = Tf::randn({1, 2, 5, 5, 5}, rng), w0 = Tf::randn({3, 2, 3, 3, 3}, rng);
  const Tf r = Tf::randn({1, 3, 5, 5, 5}, rng);
  auto grads = [&](bool cdc) {
    Tape<float> tape;
    auto x = tape.leaf(x0);
    auto w = tape.leaf(w0);
    const auto cfg = CdcConfig::make(CdcVariant::TR, 0.0, {3, 3, 3});
    auto y = cdc ? cdc_forward(x, w, cfg) : conv3d(x, w, cfg.conv);
    tape.backward(dot_const(y, r));
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  EXPECT_EQ(grads(true), grads(false));
}

TEST(CdcBackward, SingleVoxelColumnMatchesFiniteDifference) {
  Rng rng(10);
  const Td x0 = Td::randn({1, 2, 5, 4, 4}, rng), w = Td::randn({2, 2, 3, 3, 3}, rng);
  const auto cfg = CdcConfig::make(CdcVariant::T, 0.6, {3, 3, 3});
  const std::int64_t probe = x0.offset(0, 1, 2, 1, 2);
  // d out / d x[probe] for every output element, by autodiff (sum of one-hot projections) and by FD.
  Tape<double> tape(false);
  const Td y0 = cdc_forward(tape.constant(x0), tape.constant(w), cfg).value();
  for (std::int64_t o = 0; o < y0.numel(); ++o) {
    Td onehot(y0.shape());
    onehot[o] = 1.0;
    Tape<double> t2;
    auto x = t2.leaf(x0);
    t2.backward(dot_const(cdc_forward(x, t2.constant(w), cfg), onehot));
    const double ad = t2.grad(x)[probe];
    Td xp = x0, xm = x0;
    xp[probe] += 1e-4;
    xm[probe] -= 1e-4;
    Tape<double> t3(false);
    const double fd = (cdc_forward(t3.constant(xp), t3.constant(w), cfg).value()[o] -
                       cdc_forward(t3.constant(xm), t3.constant(w), cfg).value()[o]) /
                      2e-4;
    ASSERT_NEAR(ad, fd, 1e-6) << "output " << o;
  }
}

// grad(w) of the fused path against the hand-derived gradient of the literal form.
TEST(CdcBackward, WeightGradientMatchesLiteralForm) {
  Rng rng(11);
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (double theta : {0.3, 0.6, 1.0}) {
      const Td x = Td::randn({2, 2, 6, 5, 5}, rng), w0 = Td::randn({3, 2, 3, 3, 3}, rng);
      const auto cfg = CdcConfig::make(v, theta, {3, 3, 3}, {1, 2, 1});
      const Td g = Td::randn(conv3d_output_shape(x.shape(), w0.shape(), cfg.conv), rng);
      Tape<double> tape;
      auto w = tape.leaf(w0);
      tape.backward(dot_const(cdc_forward(tape.constant(x), w, cfg), g));
      const Td ref = oracle::cdc_literal_grad_w(x, w0, g, kind_of(v), theta, {1, 2, 1});
      EXPECT_LE(max_rel_diff(tape.grad(w), ref), 1e-10) << to_string(v) << " theta " << theta;
    }
  }
}

TEST(CdcBackward, FiniteDifferenceAllVariantsAndThetas) {
  int cdc_cases = 0;
  for (const auto& c : run_gradcheck_suite(13)) {
    if (c.name.rfind("cdc_", 0) != 0) continue;
    ++cdc_cases;
    EXPECT_LE(c.result.max_rel_error, 1e-3) << c.name;
  }
  EXPECT_EQ(cdc_cases, 16);
}

}  // namespace
}  // namespace cdcnas
