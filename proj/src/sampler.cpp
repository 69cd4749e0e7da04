#include "pnp/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace pnp {

namespace {

Tensor uniform_tensor(Shape shape, double bound, SplitMix64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

std::size_t FeatureMap::valid_count() const {
  if (padding_mask.empty()) return size();
  return static_cast<std::size_t>(std::count(padding_mask.begin(), padding_mask.end(), false));
}

void FeatureMap::validate() const {
  const std::size_t L = size();
  if (L == 0 || channels == 0) throw DimensionError("feature map must have H*W >= 1 and C >= 1");
  if (!features.defined() || features.shape() != Shape{L, channels}) {
    throw DimensionError("feature map: features must be " + shape_to_string({L, channels}));
  }
  if (position_embeddings.defined() && position_embeddings.shape() != Shape{L, channels}) {
    throw DimensionError("feature map: position embeddings have shape " +
                         shape_to_string(position_embeddings.shape()) + ", expected " +
                         shape_to_string({L, channels}));
  }
  if (!padding_mask.empty() && padding_mask.size() != L) {
    throw DimensionError("feature map: padding mask has " + std::to_string(padding_mask.size()) +
                         " entries, expected " + std::to_string(L));
  }
}

ScoringNetParams ScoringNetParams::init(std::size_t channels, SplitMix64& rng) {
  const double b1 = 1.0 / std::sqrt(static_cast<double>(channels));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(kScoringHidden));
  ScoringNetParams p;
  p.weight1 = uniform_tensor({channels, kScoringHidden}, b1, rng);
  p.bias1 = uniform_tensor({kScoringHidden}, b1, rng);
  p.weight2 = uniform_tensor({kScoringHidden, 1}, b2, rng);
  p.bias2 = uniform_tensor({1}, b2, rng);
  return p;
}

PoolParams PoolParams::init(std::size_t channels, std::size_t pool_count, SplitMix64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  PoolParams p;
  if (pool_count > 0) p.aggregation = uniform_tensor({channels, pool_count}, bound, rng);
  p.projection = uniform_tensor({channels, channels}, bound, rng);
  return p;
}

std::vector<Tensor> PoolParams::parameters() const {
  if (!aggregation.defined()) return {projection};
  return {aggregation, projection};
}

Tensor score_features(const FeatureMap& fm, const ScoringNetParams& params) {
  fm.validate();
  if (params.weight1.dim(0) != fm.channels) {
    throw DimensionError("score_features: feature channels " + std::to_string(fm.channels) +
                         " do not match scoring weight " + shape_to_string(params.weight1.shape()));
  }
  Tensor hidden = relu(add_rowwise(matmul(fm.features, params.weight1), params.bias1));
  Tensor out = add_rowwise(matmul(hidden, params.weight2), params.bias2);
  Tensor scores = reshape(out, {fm.size()});
  if (!fm.padding_mask.empty()) {
    scores = fill_masked(scores, fm.padding_mask, std::numeric_limits<double>::lowest());
  }
  return scores;
}

std::size_t poll_count(double alpha, std::size_t valid) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ContractError("poll ratio must lie in (0, 1], got " + std::to_string(alpha));
  }
  // The small nudge keeps products such as 0.29 * 100 from flooring to 28.
  const auto n = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(valid) + 1e-9));
  return std::min(valid, std::max<std::size_t>(1, n));
}

std::vector<std::size_t> rank_locations(std::span<const double> scores,
                                        const std::vector<bool>& padding_mask, std::size_t n) {
  std::vector<std::size_t> order;
  order.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!padding_mask.empty() && padding_mask[i]) continue;
    if (std::isnan(scores[i])) {
      throw EvaluationError("rank_locations: score at location " + std::to_string(i) + " is NaN");
    }
    order.push_back(i);
  }
  n = std::min(n, order.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    better);
  order.resize(n);
  return order;
}

FineSet poll_sample(const FeatureMap& fm, const Tensor& scores, double alpha) {
  fm.validate();
  if (scores.shape() != Shape{fm.size()}) {
    throw DimensionError("poll_sample: scores " + shape_to_string(scores.shape()) +
                         " for a grid of " + std::to_string(fm.size()) + " locations");
  }
  const std::size_t valid = fm.valid_count();
  if (valid == 0) throw ContractError("poll_sample: every location is padding");
  const std::size_t n = poll_count(alpha, valid);

  FineSet fine;
  fine.indices = rank_locations(scores.data(), fm.padding_mask, n);
  fine.scores = gather_rows(scores, fine.indices);
  Tensor normalized = layer_norm_noaffine(gather_rows(fm.features, fine.indices), kLayerNormEps);
  fine.vectors = scale_rows(normalized, fine.scores);
  return fine;
}

CoarseSet pool_sample(const FeatureMap& fm, const FineSet& fine, const Tensor& wa,
                      const Tensor& wv) {
  fm.validate();
  const std::size_t C = fm.channels;
  if (!wv.defined() || wv.shape() != Shape{C, C}) {
    throw DimensionError("pool_sample: projection weight must be " + shape_to_string({C, C}));
  }
  if (wa.defined() && (wa.rank() != 2 || wa.dim(0) != C)) {
    throw DimensionError("pool_sample: aggregation weight " + shape_to_string(wa.shape()) +
                         " does not have " + std::to_string(C) + " rows");
  }

  std::vector<bool> polled(fm.size(), false);
  for (auto i : fine.indices) {
    if (i >= fm.size()) throw DimensionError("pool_sample: fine index out of range");
    polled[i] = true;
  }
  CoarseSet coarse;
  for (std::size_t i = 0; i < fm.size(); ++i) {
    if (!polled[i] && !fm.is_padded(i)) coarse.remaining_indices.push_back(i);
  }
  if (!wa.defined() || coarse.remaining_indices.empty()) return coarse;

  Tensor remaining = gather_rows(fm.features, coarse.remaining_indices);  // R x C
  coarse.aggregation_weights = softmax(matmul(remaining, wa), 0);         // R x M
  Tensor projected = matmul(remaining, wv);                               // R x C
  coarse.vectors = matmul(transpose(coarse.aggregation_weights), projected);
  return coarse;
}

AbstractSet build_abstract_set(FineSet fine, CoarseSet coarse, const FeatureMap& fm,
                               bool require_positions) {
  fm.validate();
  if (require_positions && !fm.position_embeddings.defined()) {
    throw ContractError("build_abstract_set: feature map carries no position embeddings");
  }
  if (fine.size() + coarse.remaining_indices.size() > fm.size()) {
    throw ContractError("build_abstract_set: fine and coarse sets do not partition the map");
  }
  AbstractSet abs;
  if (coarse.size() > 0) {
    abs.tokens = concat_rows({fine.vectors, coarse.vectors});
  } else {
    abs.tokens = fine.vectors;
  }
  if (fm.position_embeddings.defined()) {
    Tensor fine_pos = gather_rows(fm.position_embeddings, fine.indices);
    if (coarse.size() > 0) {
      Tensor rem_pos = gather_rows(fm.position_embeddings, coarse.remaining_indices);
      Tensor coarse_pos = matmul(transpose(coarse.aggregation_weights), rem_pos);
      abs.token_positions = concat_rows({fine_pos, coarse_pos});
    } else {
      abs.token_positions = fine_pos;
    }
  }
  abs.token_padding.assign(fine.size() + coarse.size(), false);
  abs.fine = std::move(fine);
  abs.coarse = std::move(coarse);
  return abs;
}

FeatureMap reverse_project(const Tensor& encoded, const AbstractSet& abs, std::size_t height,
                           std::size_t width) {
  const std::size_t n = abs.fine.size(), m = abs.coarse.size();
  if (encoded.rank() != 2 || encoded.dim(0) != n + m) {
    throw DimensionError("reverse_project: encoded tokens " + shape_to_string(encoded.shape()) +
                         " but the abstract set holds " + std::to_string(n + m));
  }
  const std::size_t L = height * width;
  FeatureMap out;
  out.height = height;
  out.width = width;
  out.channels = encoded.dim(1);

  Tensor fine_tokens = gather_rows(encoded, iota_range(0, n));
  out.features = scatter_rows(fine_tokens, abs.fine.indices, L);
  if (m > 0) {
    Tensor coarse_tokens = gather_rows(encoded, iota_range(n, n + m));
    Tensor diffused = matmul(abs.coarse.aggregation_weights, coarse_tokens);  // R x C
    out.features = add(out.features, scatter_rows(diffused, abs.coarse.remaining_indices, L));
  }

  std::vector<bool> written(L, false);
  for (auto i : abs.fine.indices) written[i] = true;
  for (auto i : abs.coarse.remaining_indices) written[i] = true;
  if (std::find(written.begin(), written.end(), false) != written.end()) {
    out.padding_mask.resize(L);
    for (std::size_t i = 0; i < L; ++i) out.padding_mask[i] = !written[i];
  }
  return out;
}

PollRatioSchedule::PollRatioSchedule(double alpha_low, double alpha_high, std::uint64_t seed)
    : low_(alpha_low), high_(alpha_high), rng_(seed) {
  if (!(alpha_low > 0.0 && alpha_low <= alpha_high && alpha_high < 1.0)) {
    throw ContractError("poll ratio schedule requires 0 < low <= high < 1");
  }
}

double PollRatioSchedule::next() {
  if (low_ == high_) {
    rng_.next();
    return low_;
  }
  return low_ + rng_.uniform() * (high_ - low_);
}

}  // namespace pnp
