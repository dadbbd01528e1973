#include "scenectx/global_encoder/cache.hpp"
#include "scenectx/global_encoder/encoder.hpp"
#include "scenectx/global_encoder/pooling.hpp"
#include "scenectx/util/seed.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace scenectx;
using namespace scenectx::encoder;

namespace {

ModelState random_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  ModelState s;
  nn::Rng rng(seed);
  add_encoder(s, cfg, rng);
  return s;
}

GlobalFeatures random_grid(Index h, Index w, Index d, std::uint64_t seed) {
  nn::Rng rng(seed);
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  GlobalFeatures f;
  f.grid_h = h;
  f.grid_w = w;
  f.tokens.resize(1 + h * w, d);
  for (Index i = 0; i < f.tokens.size(); ++i) f.tokens.data()[i] = u(rng);
  return f;
}

std::filesystem::path temp_file(const std::string& tag) {
  return std::filesystem::temp_directory_path() / ("scenectx_" + tag + "_" + std::to_string(::getpid()) + ".cltc");
}

}  // namespace

TEST(Encoder, TokenShapeAndDeterminism) {
  EncoderConfig cfg;
  SceneEncoder enc(cfg, random_encoder(cfg, 1));
  MatF img = MatF::Random(96, 96).cwiseAbs();
  const auto a = enc.encode(img);
  const auto b = enc.encode(img);
  EXPECT_EQ(a.tokens.rows(), 145);
  EXPECT_EQ(a.tokens.cols(), 64);
  EXPECT_EQ(a.grid_h, 12);
  EXPECT_TRUE((a.tokens.array() == b.tokens.array()).all());
  EXPECT_EQ(enc.invocations(), 2u);
  EXPECT_THROW(enc.encode(MatF::Zero(90, 96)), ShapeError);
}

TEST(Encoder, BatchedTokensMatchSingleSceneWithinTolerance) {
  EncoderConfig cfg;
  const auto state = random_encoder(cfg, 2);
  MatF a = MatF::Random(96, 96).cwiseAbs();
  MatF b = MatF::Random(96, 96).cwiseAbs();
  diff::Graph<float> g(&state);
  const MatF both = encoder_tokens(g, cfg, {&a, &b}).value();
  SceneEncoder enc(cfg, state);
  const MatF single = enc.encode(b).tokens;
  for (Index t = 0; t < cfg.tokens(); ++t) {
    EXPECT_LT((both.row(t * 2 + 1) - single.row(t)).cwiseAbs().maxCoeff(), 1e-4f);
  }
}

TEST(Encoder, FrozenEncoderReceivesNoGradients) {
  EncoderConfig cfg;
  SceneEncoder enc(cfg, random_encoder(cfg, 3));
  MatF img = MatF::Random(96, 96).cwiseAbs();
  diff::Graph<float> g(&enc.state());
  ASSERT_TRUE(g.grad_enabled());
  auto tokens = encoder_tokens(g, cfg, {&img});
  auto loss = diff::sum_all(tokens);
  g.backward(loss);
  EXPECT_TRUE(g.parameter_grads().empty());
}

TEST(Encoder, FingerprintTracksParametersAndConfig) {
  EncoderConfig cfg;
  auto state = random_encoder(cfg, 4);
  const auto fp = fingerprint(cfg, state);
  EXPECT_EQ(fp, fingerprint(cfg, state));
  state.at("encoder.pos").value(3, 5) += 1e-6f;
  EXPECT_NE(fp, fingerprint(cfg, state));
  state.at("encoder.pos").value(3, 5) -= 1e-6f;
  auto other = cfg;
  other.mlp = 96;
  EXPECT_NE(fp, fingerprint(other, state));
}

TEST(Encoder, PretrainRejectsEmptyTrainSplitAndLearns) {
  const auto spec = data::ContextSpec::generate(4, 60, 20, 5);
  data::DatasetCounts counts{.train = 256, .val = 64, .eval_iv = 10, .eval_oov = 10};
  const auto ds = data::generate_dataset(spec, counts, 5);
  data::Dataset empty = ds;
  empty.scenes.clear();
  EncoderConfig cfg;
  EXPECT_THROW(pretrain_encoder(empty, cfg, {}), std::invalid_argument);

  EncoderTrainConfig train;
  train.epochs = 3;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = pretrain_encoder(ds, cfg, train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  RecordProperty("pretrain_seconds", std::to_string(secs));
  ASSERT_EQ(r.epoch_loss.size(), 3u);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
  EXPECT_GT(r.val_accuracy, 0.5);
  for (const auto& p : r.state) EXPECT_TRUE(p.frozen) << p.name;

  const auto again = pretrain_encoder(ds, cfg, train);
  EXPECT_TRUE(again.state.identical(r.state));
  SceneEncoder e1(cfg, r.state), e2(cfg, again.state);
  EXPECT_TRUE((e1.encode(ds.scenes[0].pixels).tokens.array() == e2.encode(ds.scenes[0].pixels).tokens.array()).all());
}

TEST(Pooling, LengthLawAndClassTokenPassthrough) {
  const auto f = random_grid(12, 12, 16, 6);
  for (int k : {1, 2, 3, 4, 6, 12}) {
    const auto p = pool_features(f, PoolKernel::of(k));
    EXPECT_EQ(p.length(), 1 + (12 / k) * (12 / k)) << k;
    EXPECT_EQ(std::memcmp(p.tokens.row(0).data(), f.tokens.row(0).data(), 16 * sizeof(float)), 0);
    EXPECT_EQ(p.role, fusion::Role::global);
  }
  const auto inf = pool_features(f, PoolKernel::infinite());
  EXPECT_EQ(inf.length(), 1);
  EXPECT_TRUE((inf.tokens.row(0).array() == f.tokens.row(0).array()).all());
  EXPECT_EQ(pool_features(f, PoolKernel::of(4)).length(), 10);
  for (int k : {5, 7, 8, 24}) EXPECT_THROW(pool_features(f, PoolKernel::of(k)), ConfigError) << k;
  EXPECT_THROW(PoolKernel::of(0), ConfigError);
  EXPECT_THROW(PoolKernel::parse("x3"), ConfigError);
  EXPECT_TRUE(PoolKernel::parse("inf").is_infinite());
  EXPECT_EQ(PoolKernel::parse("6").k(), 6);
}

TEST(Pooling, ConstantGridAndContraction) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto f = random_grid(12, 12, 8, seed + 10);
    const auto original = f;
    f.tokens.bottomRows(144).rowwise() = f.tokens.row(7);
    for (int k : {1, 2, 3, 4, 6, 12}) {
      const auto p = pool_features(f, PoolKernel::of(k));
      for (Index r = 1; r < p.length(); ++r) EXPECT_TRUE((p.tokens.row(r).array() == f.tokens.row(7).array()).all());
      // Every pooled value lies within its source window's range.
      const auto q = pool_features(original, PoolKernel::of(k));
      const Index ow = 12 / k;
      for (Index oy = 0; oy < ow; ++oy) {
        for (Index ox = 0; ox < ow; ++ox) {
          for (Index c = 0; c < 8; ++c) {
            float lo = 1e30f, hi = -1e30f;
            for (Index y = oy * k; y < (oy + 1) * k; ++y) {
              for (Index x = ox * k; x < (ox + 1) * k; ++x) {
                lo = std::min(lo, original.tokens(1 + y * 12 + x, c));
                hi = std::max(hi, original.tokens(1 + y * 12 + x, c));
              }
            }
            const float v = q.tokens(1 + oy * ow + ox, c);
            EXPECT_GE(v, lo);
            EXPECT_LE(v, hi);
          }
        }
      }
    }
  }
}

TEST(Cache, RoundTripBitExactAcrossSave) {
  util::Digest256 fp{};
  fp[0] = 1;
  const auto path = temp_file("rt");
  std::filesystem::remove(path);
  const auto f = random_grid(12, 12, 8, 20);
  const auto pooled = pool_features(f, PoolKernel::of(4));
  {
    EmbeddingCache cache(path.string(), 8, PoolKernel::of(4), fp);
    EXPECT_FALSE(cache.get(42, PoolKernel::of(4), fp).has_value());
    cache.put(42, PoolKernel::of(4), fp, pooled);
    const auto got = cache.get(42, PoolKernel::of(4), fp);
    ASSERT_TRUE(got.has_value());
    EXPECT_EQ(std::memcmp(got->tokens.data(), pooled.tokens.data(), sizeof(float) * 80), 0);
    EXPECT_EQ(cache.hits(), 1u);
    EXPECT_EQ(cache.misses(), 1u);
    cache.save();
  }
  EmbeddingCache reloaded(path.string(), 8, PoolKernel::of(4), fp);
  EXPECT_TRUE(reloaded.warnings().empty());
  const auto got = reloaded.get(42, PoolKernel::of(4), fp);
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(std::memcmp(got->tokens.data(), pooled.tokens.data(), sizeof(float) * 80), 0);
  std::filesystem::remove(path);
}

TEST(Cache, FileLayoutMatchesHandEncoding) {
  util::Digest256 fp{};
  for (std::size_t i = 0; i < fp.size(); ++i) fp[i] = static_cast<std::uint8_t>(i * 7);
  EmbeddingCache cache("", 2, PoolKernel::infinite(), fp);
  MatF t(1, 2);
  t << 1.5f, -2.0f;
  cache.put(0x0102030405060708ULL, PoolKernel::infinite(), fp, fusion::FeatureSequence(t, fusion::Role::global));
  const auto bytes = cache.encode();

  std::vector<unsigned char> want = {'C', 'L', 'T', 'C', 1, 2, 0, 0, 0, 0, 0, 0, 0};
  want.insert(want.end(), fp.begin(), fp.end());
  for (int i = 0; i < 8; ++i) want.push_back(i == 0 ? 1 : 0);
  for (unsigned char b : {8, 7, 6, 5, 4, 3, 2, 1}) want.push_back(b);
  for (unsigned char b : {1, 0, 0, 0}) want.push_back(b);
  for (unsigned char b : {0x00, 0x00, 0xc0, 0x3f, 0x00, 0x00, 0x00, 0xc0}) want.push_back(b);  // 1.5f, -2.0f
  // CRC32 (IEEE, reflected) over everything after the version byte, bitwise.
  std::uint32_t crc = 0xffffffffu;
  for (std::size_t i = 5; i < want.size(); ++i) {
    crc ^= want[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xedb88320u & (0u - (crc & 1u)));
  }
  crc ^= 0xffffffffu;
  for (int i = 0; i < 4; ++i) want.push_back(static_cast<unsigned char>(crc >> (8 * i)));
  EXPECT_EQ(bytes, want);
}

TEST(Cache, FingerprintChangeIsAMissAndInvalidates) {
  util::Digest256 a{}, b{};
  b[31] = 9;
  EmbeddingCache cache("", 8, PoolKernel::infinite(), a);
  const auto f = pool_features(random_grid(12, 12, 8, 21), PoolKernel::infinite());
  for (std::uint64_t id = 0; id < 10; ++id) cache.put(id, PoolKernel::infinite(), a, f);
  EXPECT_FALSE(cache.get(3, PoolKernel::infinite(), b).has_value());
  EXPECT_EQ(cache.size(), 0u);
  for (std::uint64_t id = 0; id < 10; ++id) EXPECT_FALSE(cache.get(id, PoolKernel::infinite(), a).has_value());
  EXPECT_EQ(cache.misses(), 11u);
  EXPECT_FALSE(cache.get(0, PoolKernel::of(4), a).has_value());
}

TEST(Cache, CorruptedFileIsRebuiltWithWarning) {
  util::Digest256 fp{};
  const auto path = temp_file("bad");
  const auto f = pool_features(random_grid(12, 12, 8, 22), PoolKernel::infinite());
  {
    EmbeddingCache cache(path.string(), 8, PoolKernel::infinite(), fp);
    cache.put(1, PoolKernel::infinite(), fp, f);
    cache.save();
  }
  {
    std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(60);
    io.put('\x55');
  }
  EmbeddingCache damaged(path.string(), 8, PoolKernel::infinite(), fp);
  ASSERT_EQ(damaged.warnings().size(), 1u);
  EXPECT_NE(damaged.warnings()[0].find("corrupted"), std::string::npos);
  EXPECT_EQ(damaged.size(), 0u);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE";
  }
  EmbeddingCache bad_magic(path.string(), 8, PoolKernel::infinite(), fp);
  EXPECT_EQ(bad_magic.warnings().size(), 1u);
  std::filesystem::remove(path);
}
