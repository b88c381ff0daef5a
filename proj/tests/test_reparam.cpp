#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "lkconv/io.hpp"
#include "lkconv/ops.hpp"
#include "lkconv/reparam.hpp"
#include "test_util.hpp"

namespace lkc {
namespace {

using testing::random_tensor;

// Independent oracle for one grid value.
double prior_oracle(std::int64_t x, std::int64_t y, std::int64_t z, std::int64_t k, double alpha) {
  const double c = (k - 1) / 2.0;
  const double d = std::sqrt((x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c));
  return alpha / (d + alpha);
}

TEST(Distance, Examples) {
  EXPECT_EQ(distance(10, 10, 10, 10.0), 0.0);
  EXPECT_EQ(distance(11, 10, 10, 10.0), 1.0);
  EXPECT_NEAR(distance(0, 0, 0, 10.0), std::sqrt(300.0), 1e-12);
  EXPECT_NEAR(distance(0, 0, 0, 10.0), 17.320508075688772, 1e-12);
}

TEST(FrequencyPrior, SpotValues) {
  for (double alpha : {0.5, 1.0, 8.0}) EXPECT_EQ(frequency_prior(21, alpha).grid.at({10, 10, 10}), 1.0);
  EXPECT_NEAR(frequency_prior(3, 1.0).grid.at({0, 0, 0}), 0.3660254037844386, 1e-9);
  EXPECT_NEAR(frequency_prior(3, 8.0).grid.at({1, 1, 2}), 8.0 / 9.0, 1e-9);
  auto p1 = frequency_prior(1, 1.0);
  EXPECT_EQ(p1.grid.size(), 1u);
  EXPECT_EQ(p1.grid[0], 1.0);
  EXPECT_EQ(frequency_prior(21, 1.0).center, 10);
}

TEST(FrequencyPrior, Errors) {
  EXPECT_THROW(frequency_prior(4, 1.0), DomainError);
  EXPECT_THROW(frequency_prior(3, 0.0), DomainError);
  EXPECT_THROW(frequency_prior(3, -1.0), DomainError);
}

TEST(FrequencyPrior, InvariantsHoldAcrossSweep) {
  for (std::int64_t k = 1; k <= 21; k += 2) {
    for (double alpha : {0.5, 1.0, 8.0}) {
      const auto p = frequency_prior(k, alpha);
      const auto& g = p.grid;
      ASSERT_EQ(g.shape(), (Shape{k, k, k}));
      ASSERT_EQ(g.at({p.center, p.center, p.center}), 1.0);
      for (std::int64_t x = 0; x < k; ++x)
        for (std::int64_t y = 0; y < k; ++y)
          for (std::int64_t z = 0; z < k; ++z) {
            const double v = g.at({x, y, z});
            ASSERT_GT(v, 0.0);
            ASSERT_LE(v, 1.0);
            ASSERT_NEAR(v, prior_oracle(x, y, z, k, alpha), 1e-15);
            // 6 axis permutations times 8 reflections about the center.
            const std::array<std::int64_t, 3> idx{x, y, z};
            constexpr std::array<std::array<int, 3>, 6> perms{
                {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
            for (const auto& pm : perms)
              for (int refl = 0; refl < 8; ++refl) {
                std::array<std::int64_t, 3> q{idx[pm[0]], idx[pm[1]], idx[pm[2]]};
                for (int a = 0; a < 3; ++a)
                  if (refl >> a & 1) q[a] = k - 1 - q[a];
                ASSERT_EQ(g.at({q[0], q[1], q[2]}), v);
              }
          }
      // Strictly decreasing in distance from the center.
      std::vector<std::pair<double, double>> dv;
      for (std::int64_t x = 0; x < k; ++x)
        for (std::int64_t y = 0; y < k; ++y)
          for (std::int64_t z = 0; z < k; ++z) dv.emplace_back(distance(x, y, z, p.center), g.at({x, y, z}));
      std::sort(dv.begin(), dv.end());
      for (std::size_t i = 1; i < dv.size(); ++i) {
        if (dv[i].first > dv[i - 1].first + 1e-12) ASSERT_LT(dv[i].second, dv[i - 1].second);
      }
    }
  }
}

TEST(Bfr, EffectiveWeightExamples) {
  auto w = random_tensor({2, 5, 5, 5}, 1);
  auto v = bfr_effective_weight(DepthwiseKernel<double>(w), frequency_prior(5, 1e9));
  EXPECT_LT(max_rel_diff(v.weights(), w), 1e-8);

  auto ones = bfr_effective_weight(DepthwiseKernel<double>(Tensor<double>::ones({1, 3, 3, 3})), frequency_prior(3, 1.0));
  EXPECT_EQ(ones.weights().at({0, 1, 1, 1}), 1.0);
  EXPECT_NEAR(ones.weights().at({0, 0, 0, 0}), 0.3660254, 1e-7);

  auto r = random_tensor({3, 7, 7, 7}, 2);
  auto rv = bfr_effective_weight(DepthwiseKernel<double>(r), frequency_prior(7, 0.5));
  for (std::int64_t c = 0; c < 3; ++c) EXPECT_EQ(rv.weights().at({c, 3, 3, 3}), r.at({c, 3, 3, 3}));

  EXPECT_THROW(bfr_effective_weight(DepthwiseKernel<double>(r), frequency_prior(5, 1.0)), ShapeError);
}

TEST(Bfr, ExportReproducesForward) {
  BfrConv<double> layer(random_tensor({2, 5, 5, 5}, 3), frequency_prior(5, 1.0));
  auto x = random_tensor({2, 2, 7, 6, 5}, 4);
  auto plain = dwconv3d_forward(x, bfr_export(layer));
  EXPECT_LT(max_rel_diff(layer.forward(x), plain), 1e-12);

  ad::Tape<double> t;
  auto y = layer.forward(t.constant(x), t.parameter(layer.latent, "w"));
  EXPECT_LT(max_rel_diff(y.value(), plain), 1e-12);

  BfrConv<double> zero(Tensor<double>::zeros({1, 3, 3, 3}), frequency_prior(3, 1.0));
  EXPECT_EQ(max_abs(bfr_export(zero).weights()), 0.0);

  Checkpoint ck;
  ck.put("kernel", bfr_export(layer).weights());
  auto back = Checkpoint::deserialize(ck.serialize());
  EXPECT_TRUE(back.get<double>("kernel").bitwise_equal(bfr_export(layer).weights()));
}

TEST(Bfr, UnitPriorMatchesPlainConvBitwise) {
  FrequencyPrior unit = frequency_prior(5, 1.0);
  unit.grid.fill(1.0);
  BfrConv<double> layer(random_tensor({2, 5, 5, 5}, 5, 0.2), unit);
  auto plain = layer.latent;
  Optimizer<double> opt_bfr(OptimKind::adamw, 1e-3), opt_plain(OptimKind::adamw, 1e-3);
  for (int step = 0; step < 5; ++step) {
    auto x = random_tensor({1, 2, 6, 6, 6}, 100 + step);
    auto target = random_tensor({1, 2, 6, 6, 6}, 200 + step);
    LayerLoss<double> loss = [&](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_error(y, target); };
    bfr_train_step(layer, x, loss, opt_bfr);
    ad::Tape<double> t;
    auto w = t.parameter(plain, "w");
    opt_plain.step({{"w", &plain}}, t.backward(loss(t, ad::dwconv3d(t.constant(x), w))));
  }
  EXPECT_TRUE(layer.latent.bitwise_equal(plain));
}

TEST(Bfr, ScalarToyMatchesSgdStep) {
  BfrConv<double> layer(Tensor<double>({1, 1, 1, 1}, 0.7), frequency_prior(1, 1.0));
  auto x = Tensor<double>({1, 1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  LayerLoss<double> loss = [](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_norm(y); };
  Optimizer<double> opt(OptimKind::sgd, 0.01);
  bfr_train_step(layer, x, loss, opt);
  // dL/dw = w * sum(x^2) = 0.7 * 204.
  EXPECT_DOUBLE_EQ(layer.latent[0], sgd_step(Tensor<double>({1}, 0.7), Tensor<double>({1}, 0.7 * 204.0), 0.01)[0]);
}

TEST(Bfr, EffectiveStepScalesWithDeltaSquared) {
  // W' = 0 and a constant target under an impulse input give dL/dV = -1 on every tap.
  const auto prior = frequency_prior(3, 1.0);
  BfrConv<double> layer(Tensor<double>::zeros({1, 3, 3, 3}), prior);
  auto x = Tensor<double>::zeros({1, 1, 3, 3, 3});
  x.at({0, 0, 1, 1, 1}) = 1.0;
  const auto target = Tensor<double>::ones({1, 1, 3, 3, 3});
  LayerLoss<double> loss = [&](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_error(y, target); };
  const auto v0 = layer.effective();
  Optimizer<double> opt(OptimKind::sgd, 0.05);
  bfr_train_step(layer, x, loss, opt);
  const auto dv = sub(layer.effective(), v0);
  const double ratio = dv.at({0, 0, 0, 0}) / dv.at({0, 1, 1, 1});
  const double corner = 1.0 / (1.0 + std::sqrt(3.0));
  EXPECT_NEAR(ratio, corner * corner, 1e-12);
  EXPECT_NEAR(ratio, 0.133975, 1e-6);
}

TEST(Bfr, LiteralUpdateDecaysOffCenterWeights) {
  const auto prior = frequency_prior(3, 1.0);
  BfrConv<double> layer(Tensor<double>::ones({1, 3, 3, 3}), prior);
  layer.literal_update = true;
  LayerLoss<double> zero_loss = [](ad::Tape<double>&, ad::Var<double> y) { return ad::scale(ad::sum(y), 0.0); };
  Optimizer<double> opt(OptimKind::sgd, 0.1);
  bfr_train_step(layer, random_tensor({1, 1, 4, 4, 4}, 6), zero_loss, opt);
  bfr_train_step(layer, random_tensor({1, 1, 4, 4, 4}, 7), zero_loss, opt);
  EXPECT_EQ(layer.latent.at({0, 1, 1, 1}), 1.0);
  EXPECT_NEAR(layer.latent.at({0, 0, 0, 0}), std::pow(prior.grid.at({0, 0, 0}), 2), 1e-15);
  Optimizer<double> adam(OptimKind::adamw, 0.1);
  EXPECT_THROW(bfr_train_step(layer, random_tensor({1, 1, 4, 4, 4}, 8), zero_loss, adam), DomainError);
}

TEST(Csla, ForwardExamples) {
  CslaBlock<double> b{random_tensor({2, 5, 5, 5}, 10), random_tensor({2, 3, 3, 3}, 11), 1.0, 0.0};
  auto x = random_tensor({1, 2, 6, 6, 6}, 12);
  EXPECT_TRUE(csla_forward(b, x).bitwise_equal(dwconv3d_forward(x, b.w_large)));
  b.alpha_small = 1.5;
  EXPECT_EQ(max_abs(csla_forward(b, Tensor<double>::zeros({1, 2, 4, 4, 4}))), 0.0);
}

// Direct sum over in-bounds taps, independent of the library kernels.
Tensor<double> brute_conv(const Tensor<double>& x, const Tensor<double>& w) {
  const auto n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4), k = w.dim(1), p = (k - 1) / 2;
  Tensor<double> out(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t z = 0; z < d; ++z)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < wd; ++xx) {
            double s = 0.0;
            for (std::int64_t a = 0; a < k; ++a)
              for (std::int64_t b = 0; b < k; ++b)
                for (std::int64_t e = 0; e < k; ++e) {
                  const auto zi = z + a - p, yi = y + b - p, xi = xx + e - p;
                  if (zi < 0 || zi >= d || yi < 0 || yi >= h || xi < 0 || xi >= wd) continue;
                  s += x.at({i, ch, zi, yi, xi}) * w.at({ch, a, b, e});
                }
            out.at({i, ch, z, y, xx}) = s;
          }
  return out;
}

TEST(Csla, EmbeddedSmallKernelDoublesItsTaps) {
  auto sub_k = random_tensor({1, 3, 3, 3}, 13);
  auto rest = random_tensor({1, 5, 5, 5}, 14);
  auto wl = rest;
  for (std::int64_t a = 0; a < 3; ++a)
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t e = 0; e < 3; ++e) wl.at({0, a + 1, b + 1, e + 1}) = sub_k.at({0, a, b, e});
  CslaBlock<double> blk{wl, sub_k, 1.0, 1.0};
  auto expected_w = wl;
  for (std::int64_t a = 0; a < 3; ++a)
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t e = 0; e < 3; ++e) expected_w.at({0, a + 1, b + 1, e + 1}) = 2.0 * sub_k.at({0, a, b, e});
  auto x = random_tensor({1, 1, 4, 4, 4}, 15);
  EXPECT_LT(max_rel_diff(csla_forward(blk, x), brute_conv(x, expected_w)), 1e-12);
}

TEST(Csla, MergeExamples) {
  CslaBlock<double> b{random_tensor({1, 3, 3, 3}, 16), Tensor<double>({1, 1, 1, 1}, 0.5), 1.0, 2.0};
  auto m = merge_csla(b).weights();
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i], i == 13 ? b.w_large[i] + 1.0 : b.w_large[i]);
  b.alpha_small = 0.0;
  b.alpha_large = 0.75;
  EXPECT_TRUE(merge_csla(b).weights().bitwise_equal(scale(b.w_large, 0.75)));
  CslaBlock<double> even{Tensor<double>::ones({1, 4, 4, 4}), Tensor<double>::ones({1, 1, 1, 1})};
  EXPECT_THROW(merge_csla(even), DomainError);
  CslaBlock<double> inverted{Tensor<double>::ones({1, 3, 3, 3}), Tensor<double>::ones({1, 5, 5, 5})};
  EXPECT_THROW(merge_csla(inverted), ShapeError);
}

TEST(Csla, MergeIdentityOnRandomBlocks) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t kl = 3 + 2 * static_cast<std::int64_t>(rng.below(3));
    const std::int64_t ks = 1 + 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>((kl + 1) / 2)));
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(3));
    CslaBlock<double> b{Tensor<double>::randn({c, kl, kl, kl}, rng), Tensor<double>::randn({c, ks, ks, ks}, rng),
                        rng.uniform(-2, 2), rng.uniform(-2, 2)};
    auto x = Tensor<double>::randn({1, c, 6, 6, 6}, rng);
    ASSERT_LT(max_rel_diff(dwconv3d_forward(x, merge_csla(b)), csla_forward(b, x)), 1e-12) << trial;
  }
}

TEST(Csla, ZeroSmallLrFreezesBranch) {
  CslaBlock<double> b{random_tensor({1, 5, 5, 5}, 18), random_tensor({1, 3, 3, 3}, 19), 1.0, 1.0, 0.001, 0.0};
  const auto ws = b.w_small, wl = b.w_large;
  auto x = random_tensor({1, 1, 6, 6, 6}, 20);
  LayerLoss<double> loss = [](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_norm(y); };
  csla_train_step(b, x, loss);
  EXPECT_TRUE(b.w_small.bitwise_equal(ws));
  EXPECT_FALSE(b.w_large.bitwise_equal(wl));
}

TEST(GrMask, Examples) {
  auto m = gr_mask(5, 3, 1.0, 1.0, 0.1, 0.1);
  for (std::int64_t a = 0; a < 5; ++a)
    for (std::int64_t b = 0; b < 5; ++b)
      for (std::int64_t e = 0; e < 5; ++e) {
        const bool inner = a >= 1 && a <= 3 && b >= 1 && b <= 3 && e >= 1 && e <= 3;
        EXPECT_NEAR(m.at({a, b, e}), inner ? 0.2 : 0.1, 1e-15);
      }
  auto uniform = gr_mask(5, 3, 1.5, 0.0, 0.1, 0.3);
  for (double v : uniform.data()) EXPECT_EQ(v, 0.1 * 1.5 * 1.5);
  EXPECT_THROW(gr_mask(4, 3, 1, 1, 1, 1), DomainError);
  EXPECT_THROW(gr_mask(5, 2, 1, 1, 1, 1), DomainError);
}

TEST(GrMask, UnitMaskIsPlainSgd) {
  SoBlock<double> so{random_tensor({2, 3, 3, 3}, 21), gr_mask(3, 1, 1.0, 0.0, 0.01, 0.01)};
  auto w0 = so.weight;
  auto x = random_tensor({1, 2, 5, 5, 5}, 22);
  LayerLoss<double> loss = [](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_norm(y); };
  so_train_step(so, x, loss);
  ad::Tape<double> t;
  auto w = t.parameter(w0, "w");
  auto g = t.backward(ad::half_sq_norm(ad::dwconv3d(t.constant(x), w)));
  EXPECT_TRUE(so.weight.bitwise_equal(sgd_step(w0, g["w"], 0.01)));
}

TEST(Equivalence, HundredStepsStayWithinRounding) {
  EquivalenceConfig cfg;
  auto r = check_equivalence<double>(cfg);
  ASSERT_EQ(r.records.size(), 101u);
  EXPECT_EQ(r.records.front().max_w_dev, 0.0);
  EXPECT_LE(r.records.front().max_out_dev, 1e-12);
  EXPECT_LE(r.max_out_dev(), 1e-8);
  EXPECT_LE(r.max_w_dev(), 1e-8);
  EXPECT_EQ(r.records[3].to_json_line().rfind("{\"step\":3,\"max_out_dev\":", 0), 0u);
}

TEST(Equivalence, ZeroStepsIsTheInitialization) {
  EquivalenceConfig cfg;
  cfg.steps = 0;
  auto r = check_equivalence<double>(cfg);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].max_w_dev, 0.0);
}

TEST(Equivalence, UniformMaskDiverges) {
  EquivalenceConfig cfg;
  cfg.steps = 10;
  cfg.uniform_mask = true;
  auto r = check_equivalence<double>(cfg);
  EXPECT_GT(r.max_out_dev(), 1e-3);
  EXPECT_GE(r.first_step_above(1e-3), 1);
}

TEST(Equivalence, FloatWithinLooserTolerance) {
  auto r = check_equivalence<float>(EquivalenceConfig{});
  EXPECT_LE(r.max_out_dev(), 1e-4);
}

TEST(Equivalence, NonUnitScalesNeedTheSquaredFactors) {
  EquivalenceConfig cfg;
  cfg.alpha_large = 0.7;
  cfg.alpha_small = 1.8;
  cfg.steps = 30;
  EXPECT_LE(check_equivalence<double>(cfg).max_out_dev(), 1e-8);
}

}  // namespace
}  // namespace lkc
