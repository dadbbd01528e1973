#include "scenectx/datagen/oracles.hpp"

#include "scenectx/recognizers/vocab.hpp"

#include <map>
#include <stdexcept>

namespace scenectx::data {

namespace {

struct Hypothesis {
  int context;
  std::string word;
};

/// All (context, stem, corrupted) renderings equal to the observed glyph ids.
std::vector<Hypothesis> consistent(const ContextSpec& spec, const std::vector<int>& observed,
                                   const std::vector<bool>& allowed) {
  std::vector<Hypothesis> out;
  for (const auto* pool : {&spec.iv_stems, &spec.oov_stems}) {
    for (const auto& stem : *pool) {
      for (int c = 0; c < spec.contexts; ++c) {
        if (!allowed[static_cast<std::size_t>(c)]) continue;
        for (bool corrupted : {false, true}) {
          auto ids = spec.completion(stem, c);
          if (corrupted) ids[static_cast<std::size_t>(stem.slot)] = Vocab::kBlank;
          if (ids == observed) out.push_back({c, spec.word(stem, c)});
        }
      }
    }
  }
  return out;
}

/// Max posterior under a uniform prior over hypotheses.
double max_posterior(const std::vector<Hypothesis>& hyps, bool score_context) {
  if (hyps.empty()) return 0.0;
  std::map<std::pair<std::string, int>, int> mass;
  int best = 0;
  for (const auto& h : hyps) best = std::max(best, ++mass[{h.word, score_context ? h.context : -1}]);
  return static_cast<double>(best) / static_cast<double>(hyps.size());
}

std::vector<bool> contexts_from_cue(const ContextSpec& spec, const std::vector<std::vector<int>>& cue_words) {
  std::vector<bool> allowed(static_cast<std::size_t>(spec.contexts), true);
  const std::vector<bool> all(allowed);
  for (const auto& obs : cue_words) {
    std::vector<bool> seen(allowed.size(), false);
    for (const auto& h : consistent(spec, obs, all)) seen[static_cast<std::size_t>(h.context)] = true;
    for (std::size_t c = 0; c < allowed.size(); ++c) allowed[c] = allowed[c] && seen[c];
  }
  return allowed;
}

std::vector<int> observe(const GlyphTable& glyphs, const MatF& scene, const Box& box) {
  const MatF px = crop(scene, box);
  std::vector<int> ids;
  for (Index x = 0; x + kGlyphSize <= px.cols(); x += kGlyphSize) ids.push_back(glyphs.match(px, 0, x));
  return ids;
}

struct Tally {
  double corrupted = 0, uncorrupted = 0;
  std::size_t nc = 0, nu = 0;
  void add(bool corrupt, double p) {
    (corrupt ? corrupted : uncorrupted) += p;
    ++(corrupt ? nc : nu);
  }
  OracleBound finish() const {
    if (nc + nu == 0) throw std::invalid_argument("oracle over an empty dataset is undefined");
    OracleBound b;
    b.corrupted_count = nc;
    b.uncorrupted_count = nu;
    b.corrupted = nc ? corrupted / static_cast<double>(nc) : 0.0;
    b.uncorrupted = nu ? uncorrupted / static_cast<double>(nu) : 0.0;
    b.overall = (corrupted + uncorrupted) / static_cast<double>(nc + nu);
    return b;
  }
};

OracleBound dataset_oracle(const Dataset& ds, std::optional<Split> split, bool use_cue) {
  const GlyphTable glyphs(ds.spec.glyph_seed);
  const std::vector<bool> all(static_cast<std::size_t>(ds.spec.contexts), true);
  Tally t;
  for (const SceneSample* s : ds.select(split)) {
    std::vector<std::vector<int>> obs;
    for (const auto& w : s->words) obs.push_back(observe(glyphs, s->pixels, w.box));
    for (std::size_t i = 0; i < s->words.size(); ++i) {
      std::vector<bool> allowed = all;
      if (use_cue) {
        std::vector<std::vector<int>> others;
        for (std::size_t j = 0; j < obs.size(); ++j) {
          if (j != i) others.push_back(obs[j]);
        }
        allowed = contexts_from_cue(ds.spec, others);
      }
      t.add(s->words[i].corrupted, max_posterior(consistent(ds.spec, obs[i], allowed), use_cue));
    }
  }
  return t.finish();
}

OracleBound spec_oracle(const ContextSpec& spec, bool use_cue) {
  const std::vector<bool> all(static_cast<std::size_t>(spec.contexts), true);
  std::vector<const Stem*> stems;
  for (const auto* pool : {&spec.iv_stems, &spec.oov_stems}) {
    for (const auto& s : *pool) stems.push_back(&s);
  }
  Tally t;
  for (std::size_t i = 0; i < stems.size(); ++i) {
    const Stem& stem = *stems[i];
    for (int c = 0; c < spec.contexts; ++c) {
      std::vector<bool> allowed = all;
      if (use_cue && stems.size() > 1) {
        // Any other stem rendered intact in the same context carries the cue.
        const Stem& other = *stems[(i + 1) % stems.size()];
        allowed = contexts_from_cue(spec, {spec.completion(other, c)});
      }
      for (bool corrupted : {false, true}) {
        auto ids = spec.completion(stem, c);
        if (corrupted) ids[static_cast<std::size_t>(stem.slot)] = Vocab::kBlank;
        t.add(corrupted, max_posterior(consistent(spec, ids, allowed), use_cue));
      }
    }
  }
  return t.finish();
}

}  // namespace

OracleBound crop_only_bayes_oracle(const Dataset& ds, std::optional<Split> split) {
  return dataset_oracle(ds, split, false);
}

OracleBound context_aware_oracle(const Dataset& ds, std::optional<Split> split) {
  return dataset_oracle(ds, split, true);
}

OracleBound crop_only_bayes_oracle(const ContextSpec& spec) { return spec_oracle(spec, false); }

OracleBound context_aware_oracle(const ContextSpec& spec) { return spec_oracle(spec, true); }

}  // namespace scenectx::data
