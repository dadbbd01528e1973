#include "scenectx/diffcore/binary_io.hpp"
#include "scenectx/diffcore/checkpoint.hpp"
#include "scenectx/diffcore/grad_check.hpp"
#include "scenectx/diffcore/ops.hpp"
#include "scenectx/diffcore/optimizer.hpp"
#include "scenectx/nn/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace scenectx;
using namespace scenectx::diff;

namespace {

MatD random_mat(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  MatD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

// Probe loss: sum(out .* R) for a fixed random R.
Var<double> probe(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return weighted_sum(out, random_mat(out.rows(), out.cols(), rng));
}

GradReport check(const Computation<double>& fn, const ParameterSet<double>& ps) {
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.tol = 1e-4;
  return grad_check(fn, ps, opt);
}

}  // namespace

TEST(DiffCore, SquareHasAnalyticDerivative) {
  ParameterSet<double> ps;
  ps.add("w", MatD::Constant(1, 1, 3.0));
  auto res = forward_with_grads<double>([](Graph<double>& g) { auto w = g.param("w"); return w * w; }, ps);
  EXPECT_DOUBLE_EQ(res.output(0, 0), 9.0);
  EXPECT_DOUBLE_EQ(res.gradients.at("w")(0, 0), 6.0);
}

TEST(DiffCore, FrozenParameterIsExcludedFromGradients) {
  ParameterSet<double> ps;
  ps.add("w", MatD::Constant(1, 1, 2.0));
  ps.add("frozen", MatD::Constant(1, 1, 5.0), true);
  auto res = forward_with_grads<double>(
      [](Graph<double>& g) { return g.param("w") * g.param("frozen"); }, ps);
  EXPECT_EQ(res.gradients.count("frozen"), 0u);
  EXPECT_DOUBLE_EQ(res.gradients.at("w")(0, 0), 5.0);
}

TEST(DiffCore, TanhGateAlphaDerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const MatD local = random_mat(4, 6, rng);
  const MatD mixed = random_mat(4, 6, rng);
  ParameterSet<double> ps;
  ps.add("alpha", MatD::Zero(1, 1));
  auto res = forward_with_grads<double>(
      [&](Graph<double>& g) {
        auto c = diff::tanh(g.param("alpha"));
        return sum_all(scalar_mul(one_minus(c), g.constant(local)) + scalar_mul(c, g.constant(mixed)));
      },
      ps);
  // Independent oracle: plain arithmetic, central differences at eps=1e-5.
  auto loss = [&](double a) { return ((1.0 - std::tanh(a)) * local + std::tanh(a) * mixed).sum(); };
  const double eps = 1e-5;
  const double numeric = (loss(eps) - loss(-eps)) / (2 * eps);
  EXPECT_NEAR(res.gradients.at("alpha")(0, 0), numeric, 1e-8);
  EXPECT_NEAR(res.gradients.at("alpha")(0, 0), (mixed - local).sum(), 1e-12);
}

TEST(DiffCore, SoftmaxCrossEntropyPassesGradCheck) {
  std::mt19937_64 rng(3);
  ParameterSet<double> ps;
  ps.add("w", random_mat(5, 4, rng));
  ps.add("b", random_mat(1, 5, rng));
  const MatD x = random_mat(6, 4, rng);
  const std::vector<int> targets{0, 4, 2, -1, 1, 3};
  auto fn = [&](Graph<double>& g) { return cross_entropy(linear(g.constant(x), g.param("w"), g.param("b")), targets); };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.max_relative_error;
}

TEST(DiffCore, CorruptedGradientIsCaught) {
  std::mt19937_64 rng(5);
  ParameterSet<double> ps;
  ps.add("w", random_mat(3, 4, rng));
  const MatD x = random_mat(2, 4, rng);
  auto fn = [&](Graph<double>& g) { return probe(diff::tanh(matmul_nt(g.constant(x), g.param("w"))), 1); };
  auto fwd = forward_with_grads<double>(fn, ps);
  auto good = compare_gradients(fn, ps, fwd.gradients);
  EXPECT_TRUE(good.pass);
  for (auto& [name, grad] : fwd.gradients) grad *= 1.01;
  auto bad = compare_gradients(fn, ps, fwd.gradients);
  EXPECT_FALSE(bad.pass);
  EXPECT_GT(bad.max_relative_error, 5e-3);
}

TEST(DiffCore, EpsOutsideRangeIsRejected) {
  ParameterSet<double> ps;
  ps.add("w", MatD::Ones(1, 1));
  GradCheckOptions opt;
  opt.eps = 1e-3;
  EXPECT_THROW(grad_check([](Graph<double>& g) { return sum_all(g.param("w")); }, ps, opt), std::invalid_argument);
}

TEST(DiffCore, NonFiniteValueNamesTheOp) {
  Graph<float> g;
  auto x = g.constant(MatF::Constant(1, 1, 1e30f));
  try {
    scale(x, 1e30f);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.op(), "scale");
  }
}

TEST(DiffCore, RelativeErrorUsesDenominatorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

// Every primitive passes central-difference checks for several seeds.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, ElementwiseAndShapeOps) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed);
  ParameterSet<double> ps;
  ps.add("a", random_mat(4, 6, rng));
  ps.add("b", random_mat(4, 6, rng));
  ps.add("row", random_mat(1, 6, rng));
  ps.add("s", random_mat(1, 1, rng));
  auto fn = [&](Graph<double>& g) {
    auto a = g.param("a");
    auto b = g.param("b");
    auto x = add_row(a * b - sigmoid(b), g.param("row"));
    x = scalar_mul(g.param("s"), gelu(x)) + one_minus(diff::tanh(a));
    x = add_scalar(scale(x, 0.7), 0.1);
    auto y = concat_cols<double>({slice_cols(x, 1, 3), slice_rows(b, 0, 4)});
    auto z = concat_rows<double>({y, tile_rows(slice_rows(y, 1, 2), 2), repeat_rows(slice_rows(y, 2, 1), 3)});
    z = gather_rows(z, {0, 3, 3, 8, 1});
    z = reshape(transpose(z), 9, 5);
    return add(probe(softmax_rows(z), seed), probe(log_softmax_rows(z), seed + 1));
  };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_parameter << " " << rep.max_relative_error;
}

TEST_P(OpGradients, MatrixOpsAndLayerNorm) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed + 100);
  ParameterSet<double> ps;
  ps.add("x", random_mat(5, 4, rng));
  ps.add("w", random_mat(3, 4, rng));
  ps.add("bias", random_mat(1, 3, rng));
  ps.add("m", random_mat(3, 7, rng));
  ps.add("gain", random_mat(1, 7, rng));
  ps.add("shift", random_mat(1, 7, rng));
  auto fn = [&](Graph<double>& g) {
    auto h = linear(g.param("x"), g.param("w"), g.param("bias"));
    auto k = matmul(h, g.param("m"));
    auto n = layer_norm(k, g.param("gain"), g.param("shift"));
    auto o = matmul_nt(n, k);
    return add(probe(o, seed), mean_all(relu(add_scalar(n, 3.0))));
  };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_parameter << " " << rep.max_relative_error;
}

TEST_P(OpGradients, ConvolutionAndPooling) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed + 200);
  ConvGeometry geo;
  geo.batch = 2;
  geo.height = 4;
  geo.width = 6;
  geo.channels = 2;
  ParameterSet<double> ps;
  ps.add("img", random_mat(geo.height * geo.width * geo.batch, geo.channels, rng));
  ps.add("k", random_mat(3, 9 * geo.channels, rng));
  auto fn = [&](Graph<double>& g) {
    auto cols = im2col(g.param("img"), geo);
    auto fmap = matmul_nt(cols, g.param("k"));
    auto pooled = avg_pool(fmap, geo.batch, geo.height, geo.width, 2, 3);
    ConvGeometry strided{geo.batch, geo.height, geo.width, 3, 2, 3, 2, 3, 0, 0};
    auto patches = im2col(fmap, strided);
    return add(probe(pooled, seed), probe(patches, seed + 7));
  };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_parameter << " " << rep.max_relative_error;
}

TEST_P(OpGradients, GroupedAttentionAndCrossEntropy) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed + 300);
  ParameterSet<double> ps;
  ps.add("q", random_mat(3 * 2, 4, rng));
  ps.add("k", random_mat(5 * 2, 4, rng));
  ps.add("v", random_mat(5 * 2, 3, rng));
  auto fn = [&](Graph<double>& g) {
    auto out = grouped_attention(g.param("q"), g.param("k"), g.param("v"), 2, 0.5);
    return cross_entropy(out, {0, 1, 2, -1, 2, 0});
  };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_parameter << " " << rep.max_relative_error;
}

TEST_P(OpGradients, RecurrentAndTransformerLayers) {
  const std::uint64_t seed = GetParam();
  nn::Rng rng(seed + 400);
  ModelState state;
  nn::add_lstm(state, "rnn.fw", 3, 4, rng);
  nn::add_lstm(state, "rnn.bw", 3, 4, rng);
  nn::add_encoder_layer(state, "enc", 8, 12, rng);
  auto ps = state.cast<double>();
  std::mt19937_64 drng(seed);
  const MatD seq = random_mat(3 * 2, 3, drng);
  auto fn = [&](Graph<double>& g) {
    auto h = nn::bidirectional_lstm(g, "rnn", g.constant(seq), 2, 4);
    auto e = nn::encoder_layer(g, "enc", h, 2, 2);
    return probe(e, seed);
  };
  auto rep = check(fn, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_parameter << " " << rep.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Values(1u, 2u, 3u, 4u, 5u));

TEST(DiffCore, GroupedAttentionRowsAreStochasticAndGroupsIndependent) {
  std::mt19937_64 rng(9);
  Graph<double> g;
  const MatD q = random_mat(4 * 3, 5, rng), k = random_mat(6 * 3, 5, rng), v = random_mat(6 * 3, 2, rng);
  std::vector<MatD> w;
  auto out = grouped_attention(g.constant(q), g.constant(k), g.constant(v), 3, 1.0, &w);
  ASSERT_EQ(w.size(), 3u);
  for (const auto& a : w) {
    for (Index r = 0; r < a.rows(); ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-12);
    EXPECT_GE(a.minCoeff(), 0.0);
  }
  // Group 1 alone gives the same rows.
  Graph<double> g1;
  MatD q1(4, 5), k1(6, 5), v1(6, 2);
  for (Index i = 0; i < 4; ++i) q1.row(i) = q.row(i * 3 + 1);
  for (Index i = 0; i < 6; ++i) k1.row(i) = k.row(i * 3 + 1), v1.row(i) = v.row(i * 3 + 1);
  auto out1 = grouped_attention(g1.constant(q1), g1.constant(k1), g1.constant(v1), 1, 1.0);
  for (Index i = 0; i < 4; ++i) EXPECT_TRUE(out.value().row(i * 3 + 1).isApprox(out1.value().row(i), 1e-12));
}

TEST(DiffCore, AdamNeverTouchesFrozenParameters) {
  nn::Rng rng(1);
  ModelState state;
  nn::add_linear(state, "a", 3, 2, rng);
  nn::add_linear(state, "b", 2, 2, rng, true);
  const ModelState before = state;
  Adam opt(AdamConfig{});
  std::map<std::string, MatF> grads;
  for (const auto& p : state) grads[p.name] = MatF::Ones(p.value.rows(), p.value.cols());
  opt.step(state, grads);
  EXPECT_TRUE(state.at("b.weight").value == before.at("b.weight").value);
  EXPECT_FALSE(state.at("a.weight").value == before.at("a.weight").value);

  ModelState all_frozen = before;
  all_frozen.set_frozen("", true);
  const ModelState snapshot = all_frozen;
  for (int i = 0; i < 3; ++i) opt.step(all_frozen, grads);
  EXPECT_TRUE(all_frozen.identical(snapshot));
}

TEST(DiffCore, CheckpointRoundTripIsBitExact) {
  nn::Rng rng(7);
  ModelState state;
  nn::add_linear(state, "enc.proj", 5, 3, rng, true);
  nn::add_layer_norm(state, "rec.ln", 3);
  const auto path = (std::filesystem::temp_directory_path() / "scenectx_ckpt_test.bin").string();
  save_checkpoint(path, state, {{"arch", "ar"}});
  auto ck = load_checkpoint(path);
  EXPECT_TRUE(ck.state.identical(state));
  EXPECT_EQ(ck.meta.at("arch"), "ar");

  auto bytes = io::read_file(path);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), io::FormatError);
  std::filesystem::remove(path);
}

TEST(DiffCore, ForwardIsDeterministicForAFixedSeed) {
  auto run = [] {
    nn::Rng rng(42);
    ModelState state;
    nn::add_encoder_layer(state, "enc", 8, 16, rng);
    Graph<float> g(&state);
    std::mt19937_64 drng(1);
    MatF x = random_mat(5, 8, drng).cast<float>();
    return nn::encoder_layer(g, "enc", g.constant(x), 2, 1).value();
  };
  const MatF a = run(), b = run();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()), 0);
}
