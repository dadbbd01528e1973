#include "scenectx/global_encoder/pooling.hpp"

namespace scenectx::encoder {

PoolKernel PoolKernel::of(int k) {
  if (k <= 0) throw ConfigError("pooling kernel must be positive or inf, got " + std::to_string(k));
  return PoolKernel(k);
}

PoolKernel PoolKernel::parse(const std::string& s) {
  if (s == "inf" || s == "infinity" || s == "∞") return infinite();
  std::size_t used = 0;
  int k = 0;
  try {
    k = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("bad pooling kernel: " + s);
  }
  if (used != s.size()) throw ConfigError("bad pooling kernel: " + s);
  return of(k);
}

PoolKernel PoolKernel::from_code(std::uint32_t code) {
  return code == 0 ? infinite() : of(static_cast<int>(code));
}

int PoolKernel::k() const {
  if (is_infinite()) throw ConfigError("infinite pooling kernel has no finite size");
  return k_;
}

Index pooled_length(Index grid_h, Index grid_w, PoolKernel k) {
  if (k.is_infinite()) return 1;
  if (grid_h % k.k() != 0 || grid_w % k.k() != 0) {
    throw ConfigError("pooling kernel " + k.str() + " does not divide the " + std::to_string(grid_h) + "x" +
                      std::to_string(grid_w) + " patch grid");
  }
  return 1 + (grid_h / k.k()) * (grid_w / k.k());
}

fusion::FeatureSequence pool_features(const GlobalFeatures& f, PoolKernel k) {
  const Index H = f.grid_h;
  const Index W = f.grid_w;
  if (f.tokens.rows() != 1 + H * W) {
    throw ShapeError("global features have " + std::to_string(f.tokens.rows()) + " rows for a " +
                     std::to_string(H) + "x" + std::to_string(W) + " grid");
  }
  const Index n = pooled_length(H, W, k);
  const Index d = f.tokens.cols();
  MatF out(n, d);
  out.row(0) = f.tokens.row(0);
  if (!k.is_infinite()) {
    const Index kk = k.k();
    const Index ow = W / kk;
    // Accumulate in double: a constant window then pools back to the same float.
    Eigen::RowVectorXd acc(d);
    for (Index oy = 0; oy < H / kk; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        acc.setZero();
        for (Index y = oy * kk; y < (oy + 1) * kk; ++y) {
          for (Index x = ox * kk; x < (ox + 1) * kk; ++x) acc += f.tokens.row(1 + y * W + x).cast<double>();
        }
        out.row(1 + oy * ow + ox) = (acc / static_cast<double>(kk * kk)).cast<float>();
      }
    }
  }
  return fusion::FeatureSequence(std::move(out), fusion::Role::global);
}

}  // namespace scenectx::encoder
