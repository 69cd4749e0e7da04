#pragma once

// Desk-scale training harness: synthetic scenes with planted objects, a tiny
// set-prediction task solved by scorer + pool + transformer, and the
// learning-dynamics statistics (how many polled locations fall inside the
// ground-truth boxes, and how stable the polled set is between epochs).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "pnp/rng.hpp"
#include "pnp/sampler.hpp"
#include "pnp/transformer.hpp"

namespace pnp {

struct SceneConfig {
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 32;
  std::size_t num_classes = 3;
  std::size_t min_boxes = 1;
  std::size_t max_boxes = 3;
  double min_area = 0.18;  // union of boxes, as a fraction of the grid
  double max_area = 0.30;
  double objectness = 3.0;    // shift along the shared foreground direction
  double class_signal = 2.0;  // shift along the per-class direction
  double noise = 1.0;
  std::uint64_t signature_seed = 0x5CE7E5ULL;  // fixes the signal directions
};

/// Half-open cell rectangle [row0, row1) x [col0, col1).
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  std::size_t label = 0;

  std::size_t area() const { return (row1 - row0) * (col1 - col0); }
  bool contains(std::size_t row, std::size_t col) const {
    return row >= row0 && row < row1 && col >= col0 && col < col1;
  }
};

/// Normalized center x, center y, width, height plus class label.
struct BoxTarget {
  double cx = 0, cy = 0, w = 0, h = 0;
  std::size_t label = 0;
};

struct SyntheticScene {
  FeatureMap feature_map;
  std::vector<Box> boxes;
  std::vector<BoxTarget> targets;
  std::vector<bool> foreground;  // H*W, inside any box

  double box_area_fraction() const;
};

/// Unit objectness direction followed by one unit direction per class, all
/// derived from config.signature_seed. Class directions are orthogonal to
/// the objectness direction.
std::vector<std::vector<double>> signal_directions(const SceneConfig& config);

/// Deterministic given the generator state. Requires H, W >= 8.
SyntheticScene generate_scene(SplitMix64& rng, const SceneConfig& config);

// -- set prediction loss --------------------------------------------------------

inline constexpr std::size_t kMaxQueries = 8;

struct MatchResult {
  std::vector<std::size_t> assignment;  // target t -> prediction index
  double cost = 0.0;                    // total loss of this assignment
};

/// Exhaustive search over injective assignments of targets to predictions.
/// `predictions` is D x (num_classes + 1 + 4): class logits with background
/// last, then the predicted box. Unmatched predictions pay background
/// cross-entropy. ContractError if D > 8 or there are more targets than D.
MatchResult match_predictions(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                              std::size_t num_classes, double box_weight = 1.0);

/// Differentiable loss of the optimal assignment.
Tensor set_prediction_loss(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                           std::size_t num_classes, double box_weight = 1.0);

inline double match_and_loss(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                             std::size_t num_classes, double box_weight = 1.0) {
  return match_predictions(predictions, targets, num_classes, box_weight).cost;
}

// -- detector ---------------------------------------------------------------------------

struct DetectorConfig {
  SceneConfig scene;
  TransformerConfig transformer;
  std::size_t pool_count = 4;
};

struct HeadParams {
  Tensor class_weight, class_bias;  // C x (K+1), K+1
  Tensor box_weight, box_bias;      // C x 4, 4
};

struct DetectorParams {
  DetectorConfig config;
  ScoringNetParams scorer;
  PoolParams pool;
  TransformerParams transformer;
  HeadParams head;

  static DetectorParams init(const DetectorConfig& config, std::uint64_t seed);
  std::vector<Tensor> parameters() const;
};

struct DetectorOutput {
  AbstractSet abstract_set;
  Tensor predictions;  // D x (K + 1 + 4), boxes squashed to (0, 1)
};

DetectorOutput detector_forward(const DetectorParams& params, const FeatureMap& fm, double alpha);

// -- training ---------------------------------------------------------------------------------

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  DetectorConfig model;
  std::uint64_t seed = 1;
  std::size_t iterations_per_epoch = 24;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::kAdam;
  double box_loss_weight = 1.0;
  double grad_clip_norm = 1.0;  // 0 disables clipping
  // Cosine decay from learning_rate to final_lr_fraction * learning_rate
  // over the whole run.
  bool cosine_decay = true;
  double final_lr_fraction = 0.05;
  std::size_t eval_scenes = 64;
  double eval_alpha = 0.33;
  std::uint64_t eval_seed = 0xE7A15EEDULL;
};

struct EpochStats {
  std::size_t epoch = 0;
  double in_box_fraction = 0.0;
  double sample_iou = 0.0;
  double mean_loss = 0.0;
};

struct TrainResult {
  DetectorParams params;
  std::vector<EpochStats> stats;  // one entry per epoch, starting at 1
};

/// Fixed evaluation scenes; scene i depends only on (eval_seed, i).
std::vector<SyntheticScene> evaluation_scenes(const TrainConfig& config);

/// Polled locations of every scene at ratio alpha (scorer only).
std::vector<std::vector<std::size_t>> polled_locations(const DetectorParams& params,
                                                       const std::vector<SyntheticScene>& scenes,
                                                       double alpha);

/// in_box_fraction averaged over scenes; sample_iou against `previous` (or 0
/// when it is empty).
EpochStats compute_stats(const std::vector<std::vector<std::size_t>>& polled,
                         const std::vector<SyntheticScene>& scenes,
                         const std::vector<std::vector<std::size_t>>& previous);

/// Monte-Carlo in-box fraction of uniformly random location subsets of the
/// size the poll sampler would take.
double random_sampling_baseline(const std::vector<SyntheticScene>& scenes, double alpha,
                                std::size_t trials, std::uint64_t seed);

double evaluate_loss(const DetectorParams& params, const std::vector<SyntheticScene>& scenes,
                     double alpha, double box_weight = 1.0);

/// Gradient descent through the full pipeline with one poll ratio drawn from
/// `schedule` per iteration. EvaluationError names the iteration on a
/// non-finite loss.
TrainResult train(const TrainConfig& config, PollRatioSchedule& schedule, std::size_t epochs,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace pnp
