#pragma once

// Test-side oracles for the fusion module. Nothing here calls the cost model.

#include "scenectx/diffcore/grad_check.hpp"
#include "scenectx/diffcore/ops.hpp"
#include "scenectx/fusion/fusion.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>

namespace scenectx::oracle {

/// Multiply-adds of (rows x inner) @ (inner x cols), counted one at a time.
inline std::uint64_t counted_matmul(std::uint64_t rows, std::uint64_t inner, std::uint64_t cols) {
  std::uint64_t n = 0;
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c)
      for (std::uint64_t i = 0; i < inner; ++i) ++n;
  return n;
}

/// Elementwise products over a rows x cols tensor, `per` each.
inline std::uint64_t counted_elementwise(std::uint64_t rows, std::uint64_t cols, std::uint64_t per) {
  std::uint64_t n = 0;
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c)
      for (std::uint64_t p = 0; p < per; ++p) ++n;
  return n;
}

/// Walks one fusion invocation op by op and counts every multiply-add.
inline std::uint64_t naive_fusion_macs(const fusion::FusionConfig& cfg, std::uint64_t nl, std::uint64_t ng,
                                       std::uint64_t d) {
  const auto dg = static_cast<std::uint64_t>(cfg.d_global);
  std::uint64_t n = 0;
  if (cfg.mechanism == fusion::Mechanism::gated) {
    n += counted_matmul(1, dg, d);           // the single global token
    n += counted_matmul(nl, 2 * d, d);       // gate logits from [local; global]
    n += counted_elementwise(nl, d, 2);      // gate*local + (1-gate)*global
  } else {
    const auto h = static_cast<std::uint64_t>(cfg.hidden_size);
    const auto im = static_cast<std::uint64_t>(cfg.intermediate_size);
    const auto heads = static_cast<std::uint64_t>(cfg.heads);
    const auto hd = h / heads;
    n += counted_matmul(ng, dg, d);
    n += counted_matmul(nl, d, h);
    n += counted_matmul(ng, d, h);
    for (int l = 0; l < cfg.layers; ++l) {
      n += counted_matmul(nl, h, h);         // q
      n += counted_matmul(ng, h, h);         // k
      n += counted_matmul(ng, h, h);         // v
      for (std::uint64_t k = 0; k < heads; ++k) {
        n += counted_matmul(nl, hd, ng);     // scores
        n += counted_matmul(nl, ng, hd);     // weights @ values
      }
      n += counted_matmul(nl, h, h);         // o
      n += counted_matmul(nl, h, im);
      n += counted_matmul(nl, im, h);
    }
    n += counted_matmul(nl, h, d);
  }
  n += counted_elementwise(nl, d, 2);        // (1-tanh a)*local + tanh a*mixed
  return n;
}

/// Scalars registered by add_fusion, excluding the gate scalar.
inline std::uint64_t enumerated_params(const fusion::FusionConfig& cfg) {
  diff::ModelState s;
  nn::Rng rng(0);
  fusion::add_fusion(s, cfg, "f", rng);
  std::uint64_t n = 0;
  for (const auto& p : s) {
    if (p.name == "f.alpha") continue;
    const auto& v = p.value;
    for (Index i = 0; i < v.size(); ++i) ++n;
  }
  return n;
}

inline MatD random_mat(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  MatD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Central-difference checks of the four differentiable fusion blocks in
/// double precision. Inputs are parameters too, so their gradients are
/// checked as well. The loss is a random projection of the output.
inline std::map<std::string, diff::GradReport> fusion_grad_checks(std::uint64_t seed) {
  using diff::Graph;
  using diff::ParameterSet;
  using diff::Var;
  std::mt19937_64 rng(seed);
  const Index groups = 2, nl = 3, ng = 4, d = 48, dg = 64;
  diff::GradCheckOptions opt;
  opt.seed = seed;
  opt.max_entries_per_param = 6;
  std::map<std::string, diff::GradReport> out;

  auto with_proj = [&](const MatD& y, Graph<double>& g, Var<double> v) {
    return diff::sum_all(v * g.constant(y));
  };

  {
    ParameterSet<double> ps;
    ps.add("local", random_mat(nl * groups, d, rng));
    ps.add("global", random_mat(groups, d, rng));
    ps.add("w", random_mat(d, 2 * d, rng, 0.2));
    ps.add("b", random_mat(1, d, rng, 0.2));
    const MatD y = random_mat(nl * groups, d, rng);
    out["gated_attention"] = diff::grad_check(
        [&](Graph<double>& g) {
          return with_proj(y, g, fusion::gated_attention(g.param("local"), g.param("global"), g.param("w"), g.param("b"), groups));
        },
        ps, opt);
  }
  {
    const auto cfg = fusion::FusionConfig::mhca(fusion::Preset::tiny, d, dg);
    diff::ModelState s;
    nn::Rng r(seed);
    fusion::add_fusion(s, cfg, "f", r);
    auto ps = s.cast<double>();
    // Unit gains and zero shifts would hide layer-norm gradient errors.
    for (auto& p : ps) {
      if (p.name.find(".ln") != std::string::npos) p.value += random_mat(p.value.rows(), p.value.cols(), rng, 0.1);
    }
    // mhca_block alone does not read the projection or the gate scalar.
    ps.set_frozen("f.proj", true);
    ps.set_frozen("f.alpha", true);
    ps.add("local", random_mat(nl * groups, d, rng));
    ps.add("global", random_mat(ng * groups, d, rng));
    const MatD y = random_mat(nl * groups, d, rng);
    out["mhca_block"] = diff::grad_check(
        [&](Graph<double>& g) {
          return with_proj(y, g, fusion::mhca_block(g, cfg, "f", g.param("local"), g.param("global"), groups));
        },
        ps, opt);
  }
  {
    ParameterSet<double> ps;
    ps.add("local", random_mat(nl * groups, d, rng));
    ps.add("mixed", random_mat(nl * groups, d, rng));
    ps.add("alpha", random_mat(1, 1, rng, 0.5));
    const MatD y = random_mat(nl * groups, d, rng);
    out["tanh_gate"] = diff::grad_check(
        [&](Graph<double>& g) {
          return with_proj(y, g, fusion::tanh_gate(g.param("local"), g.param("mixed"), g.param("alpha")));
        },
        ps, opt);
  }
  {
    ParameterSet<double> ps;
    ps.add("f.proj.weight", random_mat(d, dg, rng, 0.2));
    ps.add("f.proj.bias", random_mat(1, d, rng, 0.2));
    ps.add("global", random_mat(ng * groups, dg, rng));
    const MatD y = random_mat(ng * groups, d, rng);
    out["project_global"] = diff::grad_check(
        [&](Graph<double>& g) { return with_proj(y, g, fusion::project_global(g, "f", g.param("global"))); }, ps, opt);
  }
  return out;
}

}  // namespace scenectx::oracle
