#pragma once

#include "scenectx/datagen/dataset.hpp"

#include <optional>

namespace scenectx::data {

/// Expected accuracy of the Bayes-optimal predictor (mean max-posterior).
struct OracleBound {
  double corrupted = 0.0;    // over corrupted target crops
  double uncorrupted = 0.0;  // over fully visible crops
  double overall = 0.0;
  std::size_t corrupted_count = 0;
  std::size_t uncorrupted_count = 0;
};

/// Enumerates every (context, stem, corrupted) hypothesis whose rendering
/// matches the glyphs visible in the crop. Throws std::invalid_argument on
/// an empty selection.
OracleBound crop_only_bayes_oracle(const Dataset& ds, std::optional<Split> split = {});

/// Same hypothesis space, but conditioned on the scene's in-word context
/// cue: the letter shown at the slot of the scene's other words. Scores
/// the full label (transcript and context), so it reaches 1.0 exactly when
/// that cue identifies the context.
OracleBound context_aware_oracle(const Dataset& ds, std::optional<Split> split = {});

// Spec-level versions: every (stem, context) pair of both pools as an
// equally likely target, once corrupted and once intact. These do not
// validate the spec, so they also score specs the generator rejects.
OracleBound crop_only_bayes_oracle(const ContextSpec& spec);
OracleBound context_aware_oracle(const ContextSpec& spec);

}  // namespace scenectx::data
