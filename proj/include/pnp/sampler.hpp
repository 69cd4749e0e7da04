#pragma once

// Poll-and-pool feature abstraction.
//
// The poll sampler ranks every grid location with a small scoring MLP and
// keeps the top-N feature vectors, each layer-normalized and multiplied by its
// score so that the ranking network receives gradient. The pool sampler
// compresses the non-polled locations into M context vectors using
// softmax-normalized aggregation weights. Reverse projection maps encoded
// tokens back onto the H x W grid.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "pnp/rng.hpp"
#include "pnp/tensor.hpp"

namespace pnp {

inline constexpr std::size_t kScoringHidden = 256;
inline constexpr double kLayerNormEps = 1e-5;

struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Tensor features;                  // (H*W) x C, row-major over (i, j)
  Tensor position_embeddings;       // (H*W) x C, or undefined
  std::vector<bool> padding_mask;   // H*W entries (true = padding), or empty

  std::size_t size() const { return height * width; }
  bool is_padded(std::size_t loc) const { return !padding_mask.empty() && padding_mask[loc]; }
  std::size_t valid_count() const;
  /// Throws DimensionError when fields disagree with (H, W, C).
  void validate() const;
};

struct ScoringNetParams {
  Tensor weight1;  // C x 256
  Tensor bias1;    // 256
  Tensor weight2;  // 256 x 1
  Tensor bias2;    // 1

  static ScoringNetParams init(std::size_t channels, SplitMix64& rng);
  std::vector<Tensor> parameters() const { return {weight1, bias1, weight2, bias2}; }
};

struct PoolParams {
  Tensor aggregation;  // W^a, C x M
  Tensor projection;   // W^v, C x C

  static PoolParams init(std::size_t channels, std::size_t pool_count, SplitMix64& rng);
  std::size_t pool_count() const { return aggregation.defined() ? aggregation.dim(1) : 0; }
  std::vector<Tensor> parameters() const;
};

struct FineSet {
  Tensor vectors;                    // N x C, layer-normalized and score-modulated
  std::vector<std::size_t> indices;  // flat locations, descending score
  Tensor scores;                     // N

  std::size_t size() const { return indices.size(); }
};

struct CoarseSet {
  Tensor vectors;                              // M x C, undefined when empty
  Tensor aggregation_weights;                  // R x M, undefined when empty
  std::vector<std::size_t> remaining_indices;  // R ascending locations outside the fine set

  std::size_t size() const { return vectors.defined() ? vectors.dim(0) : 0; }
};

struct AbstractSet {
  FineSet fine;
  CoarseSet coarse;
  Tensor tokens;                    // (N+M) x C: fine tokens then coarse tokens
  Tensor token_positions;           // (N+M) x C, undefined without position embeddings
  std::vector<bool> token_padding;  // N+M, all false

  std::size_t token_count() const { return fine.size() + coarse.size(); }
};

/// s = w2 . relu(W1 f + b1) + b2 at every location; padded locations get the
/// most negative finite double. Returns a length-L vector.
Tensor score_features(const FeatureMap& fm, const ScoringNetParams& params);

/// N = max(1, floor(alpha * valid)), never more than `valid`.
std::size_t poll_count(double alpha, std::size_t valid);

/// Stable top-N order: descending score, ties by ascending index, padded
/// locations excluded.
std::vector<std::size_t> rank_locations(std::span<const double> scores,
                                        const std::vector<bool>& padding_mask, std::size_t n);

FineSet poll_sample(const FeatureMap& fm, const Tensor& scores, double alpha);

/// Aggregates the non-polled, non-padded locations into M coarse vectors.
/// Returns an empty CoarseSet when M = 0 or nothing remains.
CoarseSet pool_sample(const FeatureMap& fm, const FineSet& fine, const Tensor& wa,
                      const Tensor& wv);
inline CoarseSet pool_sample(const FeatureMap& fm, const FineSet& fine, const PoolParams& p) {
  return pool_sample(fm, fine, p.aggregation, p.projection);
}

/// Fine tokens then coarse tokens. Fine positions are gathered; each coarse
/// position is the aggregation-weighted combination of remaining positions.
/// With require_positions, missing embeddings raise ContractError.
AbstractSet build_abstract_set(FineSet fine, CoarseSet coarse, const FeatureMap& fm,
                               bool require_positions = false);

/// Scatters fine tokens back to their locations and diffuses coarse tokens
/// through the aggregation weights onto the remaining ones. Locations in
/// neither set (padding) are zero.
FeatureMap reverse_project(const Tensor& encoded, const AbstractSet& abs, std::size_t height,
                           std::size_t width);

class PollRatioSchedule {
 public:
  PollRatioSchedule(double alpha_low, double alpha_high, std::uint64_t seed);

  double alpha_low() const { return low_; }
  double alpha_high() const { return high_; }
  std::uint64_t rng_state() const { return rng_.state(); }
  /// alpha = low + u (high - low), one draw per training iteration.
  double next();

 private:
  double low_;
  double high_;
  SplitMix64 rng_;
};

inline double sample_poll_ratio(PollRatioSchedule& sched) { return sched.next(); }

}  // namespace pnp
