#include "scenectx/diffcore/params.hpp"

#include <cmath>

namespace scenectx::diff {

MatF normal_init(Index rows, Index cols, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  MatF m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

MatF xavier_init(Index rows, Index cols, std::mt19937_64& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(rows + cols));
  std::uniform_real_distribution<float> dist(-bound, bound);
  MatF m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace scenectx::diff
