#pragma once

#include <vector>

#include "pnp/sampler.hpp"
#include "support/gradcheck.hpp"

namespace pnp::testing {

inline FeatureMap random_feature_map(std::size_t h, std::size_t w, std::size_t c, SplitMix64& rng,
                                     bool with_positions = false, double pad_prob = 0.0,
                                     bool requires_grad = false) {
  FeatureMap fm;
  fm.height = h;
  fm.width = w;
  fm.channels = c;
  fm.features = random_tensor({h * w, c}, rng, 1.0, requires_grad);
  if (with_positions) fm.position_embeddings = random_tensor({h * w, c}, rng, 1.0, false);
  if (pad_prob > 0.0) {
    fm.padding_mask.assign(h * w, false);
    for (std::size_t i = 1; i < h * w; ++i) fm.padding_mask[i] = rng.uniform() < pad_prob;
  }
  return fm;
}

/// Sort every (score, index) pair and keep the best n, skipping padding.
inline std::vector<std::size_t> brute_force_top(const std::vector<double>& scores,
                                                const std::vector<bool>& padding, std::size_t n) {
  std::vector<std::pair<double, std::size_t>> pairs;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!padding.empty() && padding[i]) continue;
    pairs.emplace_back(-scores[i], i);
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n && i < pairs.size(); ++i) out.push_back(pairs[i].second);
  return out;
}

}  // namespace pnp::testing
