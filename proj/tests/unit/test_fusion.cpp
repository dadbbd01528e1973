#include "scenectx/fusion/cost_model.hpp"
#include "scenectx/fusion/fusion.hpp"

#include "../support/fusion_oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace scenectx;
using namespace scenectx::fusion;

namespace {

MatF random_f(Index r, Index c, std::mt19937_64& rng) { return oracle::random_mat(r, c, rng).cast<float>(); }

}  // namespace

TEST(Presets, TableValues) {
  const auto t = FusionConfig::mhca(Preset::tiny, 48, 64);
  const auto m = FusionConfig::mhca(Preset::mini, 48, 64);
  const auto s = FusionConfig::mhca(Preset::small, 48, 64);
  EXPECT_EQ(std::vector<Index>({t.heads, t.layers, t.hidden_size, t.intermediate_size}), std::vector<Index>({2, 2, 128, 512}));
  EXPECT_EQ(std::vector<Index>({m.heads, m.layers, m.hidden_size, m.intermediate_size}), std::vector<Index>({4, 4, 256, 1024}));
  EXPECT_EQ(std::vector<Index>({s.heads, s.layers, s.hidden_size, s.intermediate_size}), std::vector<Index>({8, 4, 512, 2048}));
  EXPECT_DOUBLE_EQ(reference_learning_rate(FusionConfig::gated(48, 64)), 2e-5);
  EXPECT_DOUBLE_EQ(reference_learning_rate(t), 3e-5);
  EXPECT_DOUBLE_EQ(reference_learning_rate(m), 3e-5);
  EXPECT_DOUBLE_EQ(reference_learning_rate(s), 1e-5);
}

TEST(Presets, JsonRoundTripAndValidation) {
  for (const auto& c : {FusionConfig::gated(48, 64), FusionConfig::mhca(Preset::mini, 48, 64)}) {
    EXPECT_EQ(FusionConfig::from_json(c.to_json()).to_json(), c.to_json());
  }
  auto bad = FusionConfig::mhca(Preset::tiny, 48, 64);
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Params, GatedDeskCountByHand) {
  // [local; global] 96 -> 48 gate, then 64 -> 48 projection.
  EXPECT_EQ(count_params(FusionConfig::gated(48, 64)), 48u * 96 + 48 + 48 * 64 + 48);
}

TEST(Params, MatchEnumerationForEveryPreset) {
  for (const auto& c : {FusionConfig::gated(48, 64), FusionConfig::mhca(Preset::tiny, 48, 64),
                        FusionConfig::mhca(Preset::mini, 48, 64), FusionConfig::mhca(Preset::small, 48, 64)}) {
    EXPECT_EQ(count_params(c), oracle::enumerated_params(c)) << to_string(c.preset);
  }
}

TEST(Flops, MatchLoopCountingOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> n(1, 40), dim(8, 96);
  for (int trial = 0; trial < 5; ++trial) {
    const Index d = 8 * (dim(rng) / 8);
    const Index dg = dim(rng);
    const auto nl = static_cast<std::uint64_t>(n(rng));
    const auto ng = static_cast<std::uint64_t>(n(rng));
    for (const auto& c : {FusionConfig::gated(d, dg), FusionConfig::mhca(Preset::tiny, d, dg)}) {
      const auto est = estimate_flops(c, nl, ng, static_cast<std::uint64_t>(d));
      EXPECT_EQ(est.total_macs(), oracle::naive_fusion_macs(c, nl, ng, static_cast<std::uint64_t>(d)));
      EXPECT_EQ(est.total_flops(), 2 * est.total_macs());
    }
  }
}

TEST(Flops, AttentionTermIsQuadraticInTokens) {
  EXPECT_EQ(attention_flops_per_layer(10, 20, 8), 2u * 2 * 10 * 20 * 8);
  const auto c = FusionConfig::mhca(Preset::tiny, 48, 64);
  const auto a = estimate_flops(c, 10, 17, 48);
  EXPECT_EQ(2 * (a.scores + a.weighted_sum), static_cast<std::uint64_t>(c.layers) * attention_flops_per_layer(10, 17, 128));
}

TEST(Gated, MatchesPlainLoopOracle) {
  std::mt19937_64 rng(2);
  const Index groups = 2, n = 3, d = 6;
  const MatF local = random_f(n * groups, d, rng);
  const MatF global = random_f(groups, d, rng);
  const MatF w = random_f(d, 2 * d, rng);
  const MatF b = random_f(1, d, rng);
  diff::Graph<float> g;
  const MatF got = gated_attention(g.constant(local), g.constant(global), g.constant(w), g.constant(b), groups).value();
  for (Index r = 0; r < n * groups; ++r) {
    const Index item = r % groups;
    std::vector<double> logits(static_cast<std::size_t>(d));
    double mx = -1e300;
    for (Index o = 0; o < d; ++o) {
      double z = b(0, o);
      for (Index i = 0; i < d; ++i) z += double(w(o, i)) * local(r, i) + double(w(o, d + i)) * global(item, i);
      logits[static_cast<std::size_t>(o)] = z;
      mx = std::max(mx, z);
    }
    double sum = 0;
    for (auto& z : logits) sum += (z = std::exp(z - mx));
    for (Index o = 0; o < d; ++o) {
      const double gate = logits[static_cast<std::size_t>(o)] / sum;
      EXPECT_NEAR(got(r, o), gate * local(r, o) + (1 - gate) * global(item, o), 1e-5);
    }
  }
}

TEST(Gated, RejectsMoreThanOneGlobalToken) {
  diff::Graph<float> g;
  const MatF z = MatF::Zero(4, 6);
  EXPECT_THROW(gated_attention(g.constant(z), g.constant(MatF::Zero(2, 6)), g.constant(MatF::Zero(6, 12)),
                               g.constant(MatF::Zero(1, 6)), 1),
               ConfigError);
}

TEST(TanhGate, IdentityAtZeroAndBlendOtherwise) {
  std::mt19937_64 rng(3);
  const auto local = FeatureSequence(random_f(5, 4, rng), Role::local);
  const auto mixed = FeatureSequence(random_f(5, 4, rng), Role::mixed);
  EXPECT_EQ(tanh_gate(local, mixed, 0.0f).tokens, local.tokens);
  const float a = 0.7f;
  const MatF want = (1 - std::tanh(a)) * local.tokens + std::tanh(a) * mixed.tokens;
  EXPECT_LT((tanh_gate(local, mixed, a).tokens - want).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Mhca, AttentionRowsStochasticAndShapes) {
  const auto c = FusionConfig::mhca(Preset::tiny, 48, 48);
  diff::ModelState s;
  nn::Rng rng(1);
  add_fusion(s, c, "f", rng);
  std::mt19937_64 r(4);
  const FeatureSequence local(random_f(7, 48, r), Role::local);
  const FeatureSequence global(random_f(5, 48, r), Role::global);
  std::vector<nn::AttentionMaps<float>> maps;
  const auto out = mhca_block(local, global, c, s, "f", &maps);
  EXPECT_EQ(out.length(), 7);
  EXPECT_EQ(out.dim(), 48);
  ASSERT_EQ(maps.size(), 2u);
}

class FusionGrad : public ::testing::TestWithParam<int> {};

TEST_P(FusionGrad, FiniteDifferences) {
  for (const auto& [name, rep] : oracle::fusion_grad_checks(static_cast<std::uint64_t>(GetParam()))) {
    EXPECT_TRUE(rep.pass) << name << " worst " << rep.worst_parameter << " " << rep.max_relative_error;
    EXPECT_GT(rep.entries_checked, 0u) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FusionGrad, ::testing::Range(0, 5));
