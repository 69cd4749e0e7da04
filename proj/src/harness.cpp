#include "pnp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <functional>
#include <iterator>
#include <span>
#include <string>

namespace pnp {

// -- scenes ------------------------------------------------------------------------

double SyntheticScene::box_area_fraction() const {
  const auto n = std::count(foreground.begin(), foreground.end(), true);
  return static_cast<double>(n) / static_cast<double>(foreground.size());
}

std::vector<std::vector<double>> signal_directions(const SceneConfig& config) {
  const std::size_t c = config.channels;
  SplitMix64 rng(config.signature_seed);
  auto random_unit = [&] {
    std::vector<double> v(c);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto normalize = [](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
  };
  std::vector<std::vector<double>> dirs;
  dirs.push_back(random_unit());
  normalize(dirs[0]);
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    auto v = random_unit();
    const double proj = std::inner_product(v.begin(), v.end(), dirs[0].begin(), 0.0);
    for (std::size_t i = 0; i < c; ++i) v[i] -= proj * dirs[0][i];
    normalize(v);
    dirs.push_back(std::move(v));
  }
  return dirs;
}

SyntheticScene generate_scene(SplitMix64& rng, const SceneConfig& config) {
  const std::size_t H = config.height, W = config.width, C = config.channels;
  if (H < 8 || W < 8) throw ContractError("generate_scene: grid must be at least 8x8");
  if (config.num_classes == 0 || config.min_boxes == 0 || config.max_boxes < config.min_boxes) {
    throw ContractError("generate_scene: invalid class or box counts");
  }
  SyntheticScene scene;
  std::vector<int> owner(H * W, -1);
  bool accepted = false;
  for (int attempt = 0; attempt < 10000 && !accepted; ++attempt) {
    const std::size_t count =
        config.min_boxes + rng.bounded(config.max_boxes - config.min_boxes + 1);
    scene.boxes.clear();
    std::fill(owner.begin(), owner.end(), -1);
    for (std::size_t b = 0; b < count; ++b) {
      Box box;
      const std::size_t h = 2 + rng.bounded(H / 2 - 1);
      const std::size_t w = 2 + rng.bounded(W / 2 - 1);
      box.row0 = rng.bounded(H - h + 1);
      box.col0 = rng.bounded(W - w + 1);
      box.row1 = box.row0 + h;
      box.col1 = box.col0 + w;
      box.label = rng.bounded(config.num_classes);
      for (std::size_t i = box.row0; i < box.row1; ++i)
        for (std::size_t j = box.col0; j < box.col1; ++j) owner[i * W + j] = static_cast<int>(b);
      scene.boxes.push_back(box);
    }
    const auto covered = std::count_if(owner.begin(), owner.end(), [](int o) { return o >= 0; });
    const double frac = static_cast<double>(covered) / static_cast<double>(H * W);
    accepted = frac >= config.min_area && frac <= config.max_area;
  }
  if (!accepted) throw ContractError("generate_scene: box area range cannot be met");

  const auto dirs = signal_directions(config);
  std::vector<double> feats(H * W * C);
  scene.foreground.assign(H * W, false);
  for (std::size_t loc = 0; loc < H * W; ++loc) {
    double* f = feats.data() + loc * C;
    for (std::size_t c = 0; c < C; ++c) f[c] = config.noise * rng.normal();
    if (owner[loc] < 0) continue;
    scene.foreground[loc] = true;
    const auto& cls = dirs[1 + scene.boxes[static_cast<std::size_t>(owner[loc])].label];
    for (std::size_t c = 0; c < C; ++c) {
      f[c] += config.objectness * dirs[0][c] + config.class_signal * cls[c];
    }
  }
  auto& fm = scene.feature_map;
  fm.height = H;
  fm.width = W;
  fm.channels = C;
  fm.features = Tensor({H * W, C}, std::move(feats));
  fm.position_embeddings = sine_position_embedding(H, W, C);

  for (const auto& b : scene.boxes) {
    BoxTarget t;
    t.cx = 0.5 * static_cast<double>(b.col0 + b.col1) / static_cast<double>(W);
    t.cy = 0.5 * static_cast<double>(b.row0 + b.row1) / static_cast<double>(H);
    t.w = static_cast<double>(b.col1 - b.col0) / static_cast<double>(W);
    t.h = static_cast<double>(b.row1 - b.row0) / static_cast<double>(H);
    t.label = b.label;
    scene.targets.push_back(t);
  }
  return scene;
}

// -- matching -----------------------------------------------------------------------------

namespace {

double row_cross_entropy(std::span<const double> row, std::size_t k, std::size_t label) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, row[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
  return mx + std::log(z) - row[label];
}

void check_predictions(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                       std::size_t num_classes) {
  if (predictions.rank() != 2 || predictions.dim(1) != num_classes + 5) {
    throw DimensionError("predictions " + shape_to_string(predictions.shape()) + " need " +
                         std::to_string(num_classes + 5) + " columns");
  }
  const std::size_t d = predictions.dim(0);
  if (d > kMaxQueries) {
    throw ContractError("matching enumerates at most " + std::to_string(kMaxQueries) +
                        " predictions, got " + std::to_string(d));
  }
  if (targets.size() > d) throw ContractError("more targets than predictions");
  for (const auto& t : targets) {
    if (t.label >= num_classes) throw ContractError("target label out of range");
  }
}

}  // namespace

MatchResult match_predictions(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                              std::size_t num_classes, double box_weight) {
  check_predictions(predictions, targets, num_classes);
  const std::size_t d = predictions.dim(0), k = num_classes + 1, width = num_classes + 5;
  auto p = predictions.data();

  std::vector<double> background(d);
  double base = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    background[i] = row_cross_entropy(p.subspan(i * width, k), k, num_classes);
    base += background[i];
  }
  // delta[i][t]: change in loss when prediction i takes target t instead of background.
  std::vector<std::vector<double>> delta(d, std::vector<double>(targets.size()));
  for (std::size_t i = 0; i < d; ++i) {
    const auto row = p.subspan(i * width, width);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto& tg = targets[t];
      const double box[4] = {tg.cx, tg.cy, tg.w, tg.h};
      double sq = 0.0;
      for (std::size_t c = 0; c < 4; ++c) sq += (row[k + c] - box[c]) * (row[k + c] - box[c]);
      delta[i][t] = row_cross_entropy(row, k, tg.label) + box_weight * sq - background[i];
    }
  }

  MatchResult best;
  best.cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> current(targets.size());
  std::vector<bool> used(d, false);
  std::function<void(std::size_t, double)> search = [&](std::size_t t, double acc) {
    if (t == targets.size()) {
      if (acc < best.cost) {
        best.cost = acc;
        best.assignment = current;
      }
      return;
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (used[i]) continue;
      used[i] = true;
      current[t] = i;
      search(t + 1, acc + delta[i][t]);
      used[i] = false;
    }
  };
  search(0, 0.0);
  best.cost += base;
  return best;
}

Tensor set_prediction_loss(const Tensor& predictions, const std::vector<BoxTarget>& targets,
                           std::size_t num_classes, double box_weight) {
  const MatchResult match = match_predictions(predictions, targets, num_classes, box_weight);
  const std::size_t d = predictions.dim(0);
  std::vector<std::size_t> labels(d, num_classes);
  for (std::size_t t = 0; t < targets.size(); ++t) labels[match.assignment[t]] = targets[t].label;
  Tensor loss = sum(cross_entropy_rows(slice_cols(predictions, 0, num_classes + 1), labels));
  if (targets.empty()) return loss;

  std::vector<double> boxes;
  for (const auto& t : targets) boxes.insert(boxes.end(), {t.cx, t.cy, t.w, t.h});
  Tensor target_boxes({targets.size(), 4}, std::move(boxes));
  Tensor predicted =
      gather_rows(slice_cols(predictions, num_classes + 1, num_classes + 5), match.assignment);
  return add(loss, scale(sum(square(sub(predicted, target_boxes))), box_weight));
}

// -- detector -------------------------------------------------------------------------------

DetectorParams DetectorParams::init(const DetectorConfig& config, std::uint64_t seed) {
  if (config.transformer.d_model != config.scene.channels) {
    throw ContractError("detector: transformer width must equal the feature channels");
  }
  SplitMix64 rng(seed);
  DetectorParams p;
  p.config = config;
  const std::size_t c = config.scene.channels, k = config.scene.num_classes + 1;
  p.scorer = ScoringNetParams::init(c, rng);
  p.pool = PoolParams::init(c, config.pool_count, rng);
  p.transformer = TransformerParams::init(config.transformer, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  auto uniform = [&](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
  };
  p.head.class_weight = uniform({c, k});
  p.head.class_bias = Tensor({k}, 0.0, true);
  p.head.box_weight = uniform({c, 4});
  p.head.box_bias = Tensor({4}, 0.0, true);
  return p;
}

std::vector<Tensor> DetectorParams::parameters() const {
  std::vector<Tensor> out = scorer.parameters();
  for (const auto& t : pool.parameters()) out.push_back(t);
  for (const auto& t : transformer.parameters()) out.push_back(t);
  out.insert(out.end(), {head.class_weight, head.class_bias, head.box_weight, head.box_bias});
  return out;
}

DetectorOutput detector_forward(const DetectorParams& params, const FeatureMap& fm, double alpha) {
  Tensor scores = score_features(fm, params.scorer);
  FineSet fine = poll_sample(fm, scores, alpha);
  CoarseSet coarse = pool_sample(fm, fine, params.pool);
  DetectorOutput out;
  out.abstract_set = build_abstract_set(std::move(fine), std::move(coarse), fm);
  TokenSequence seq{out.abstract_set.tokens, out.abstract_set.token_positions, {}};
  Tensor hidden = decode(encode(seq, params.transformer), params.transformer);
  const auto& h = params.head;
  Tensor logits = add_rowwise(matmul(hidden, h.class_weight), h.class_bias);
  Tensor boxes = sigmoid(add_rowwise(matmul(hidden, h.box_weight), h.box_bias));
  out.predictions = concat_cols({logits, boxes});
  return out;
}

// -- statistics -------------------------------------------------------------------------------

std::vector<SyntheticScene> evaluation_scenes(const TrainConfig& config) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(config.eval_scenes);
  for (std::size_t i = 0; i < config.eval_scenes; ++i) {
    SplitMix64 rng(config.eval_seed + 0x9E3779B97F4A7C15ULL * (i + 1));
    scenes.push_back(generate_scene(rng, config.model.scene));
  }
  return scenes;
}

std::vector<std::vector<std::size_t>> polled_locations(const DetectorParams& params,
                                                       const std::vector<SyntheticScene>& scenes,
                                                       double alpha) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    const auto& fm = s.feature_map;
    Tensor scores = score_features(fm, params.scorer);
    out.push_back(rank_locations(scores.data(), fm.padding_mask, poll_count(alpha, fm.valid_count())));
  }
  return out;
}

EpochStats compute_stats(const std::vector<std::vector<std::size_t>>& polled,
                         const std::vector<SyntheticScene>& scenes,
                         const std::vector<std::vector<std::size_t>>& previous) {
  if (polled.size() != scenes.size() || (!previous.empty() && previous.size() != scenes.size())) {
    throw ContractError("compute_stats: polled sets and scenes disagree in count");
  }
  EpochStats st;
  if (scenes.empty()) return st;
  double in_box = 0.0, iou = 0.0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& idx = polled[s];
    if (idx.empty()) throw ContractError("compute_stats: empty polled set");
    std::size_t hits = 0;
    for (auto i : idx) hits += scenes[s].foreground.at(i) ? 1 : 0;
    in_box += static_cast<double>(hits) / static_cast<double>(idx.size());
    if (!previous.empty()) {
      std::vector<std::size_t> a = idx, b = previous[s];
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      std::vector<std::size_t> common;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
      const double uni = static_cast<double>(a.size() + b.size() - common.size());
      iou += static_cast<double>(common.size()) / uni;
    }
  }
  const double n = static_cast<double>(scenes.size());
  st.in_box_fraction = in_box / n;
  st.sample_iou = previous.empty() ? 0.0 : iou / n;
  return st;
}

double random_sampling_baseline(const std::vector<SyntheticScene>& scenes, double alpha,
                                std::size_t trials, std::uint64_t seed) {
  if (scenes.empty() || trials == 0) throw ContractError("random baseline needs scenes and trials");
  SplitMix64 rng(seed);
  double acc = 0.0;
  for (const auto& s : scenes) {
    const std::size_t L = s.foreground.size();
    const std::size_t n = poll_count(alpha, L);
    std::vector<std::size_t> locs(L);
    for (std::size_t t = 0; t < trials; ++t) {
      std::iota(locs.begin(), locs.end(), 0);
      shuffle(locs, rng);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) hits += s.foreground[locs[i]] ? 1 : 0;
      acc += static_cast<double>(hits) / static_cast<double>(n);
    }
  }
  return acc / static_cast<double>(scenes.size() * trials);
}

double evaluate_loss(const DetectorParams& params, const std::vector<SyntheticScene>& scenes,
                     double alpha, double box_weight) {
  double acc = 0.0;
  for (const auto& s : scenes) {
    DetectorOutput out = detector_forward(params, s.feature_map, alpha);
    acc += match_and_loss(out.predictions, s.targets, params.config.scene.num_classes, box_weight);
  }
  return acc / static_cast<double>(scenes.size());
}

// -- training ------------------------------------------------------------------------------

namespace {

class AdamState {
 public:
  explicit AdamState(const std::vector<Tensor>& params) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(std::vector<Tensor>& params, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].mutable_data();
      auto g = params[k].grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = beta1 * m_[k][i] + (1.0 - beta1) * g[i];
        v_[k][i] = beta2 * v_[k][i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

double clip_gradients(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params) {
      auto& grad = p.node()->grad;
      for (auto& g : grad) g *= f;
    }
  }
  return norm;
}

}  // namespace

TrainResult train(const TrainConfig& config, PollRatioSchedule& schedule, std::size_t epochs,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  if (config.batch_size == 0 || config.iterations_per_epoch == 0) {
    throw ContractError("train: batch size and iterations per epoch must be positive");
  }
  TrainResult result{DetectorParams::init(config.model, config.seed), {}};
  auto params = result.params.parameters();
  AdamState adam(params);
  SplitMix64 data_rng(config.seed ^ 0xDA7A5EEDULL);
  const auto eval = evaluation_scenes(config);
  const std::size_t k = config.model.scene.num_classes;

  auto previous = polled_locations(result.params, eval, config.eval_alpha);
  const double total_steps = static_cast<double>(epochs * config.iterations_per_epoch);
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    double loss_acc = 0.0;
    for (std::size_t it = 0; it < config.iterations_per_epoch; ++it, ++iteration) {
      const std::string where =
          "iteration " + std::to_string(iteration) + " (epoch " + std::to_string(epoch) + ")";
      const double alpha = schedule.next();
      for (auto& p : params) p.zero_grad();
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        SyntheticScene scene = generate_scene(data_rng, config.model.scene);
        Tensor loss;
        try {
          DetectorOutput out = detector_forward(result.params, scene.feature_map, alpha);
          loss = set_prediction_loss(out.predictions, scene.targets, k, config.box_loss_weight);
        } catch (const EvaluationError& e) {
          throw EvaluationError("training diverged at " + where + ": " + e.what());
        }
        const double value = loss.item();
        if (!std::isfinite(value)) throw EvaluationError("non-finite loss at " + where);
        loss_acc += value;
        backward(scale(loss, 1.0 / static_cast<double>(config.batch_size)));
      }
      clip_gradients(params, config.grad_clip_norm);
      double lr = config.learning_rate;
      if (config.cosine_decay) {
        const double progress = static_cast<double>(iteration) / total_steps;
        const double f = config.final_lr_fraction;
        lr *= f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      }
      if (config.optimizer == Optimizer::kAdam) {
        adam.step(params, lr);
      } else {
        for (auto& p : params) {
          auto w = p.mutable_data();
          auto g = p.grad();
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        }
      }
    }
    std::vector<std::vector<std::size_t>> polled;
    try {
      polled = polled_locations(result.params, eval, config.eval_alpha);
    } catch (const EvaluationError& e) {
      throw EvaluationError("evaluation failed after iteration " + std::to_string(iteration) +
                            ": " + e.what());
    }
    EpochStats st = compute_stats(polled, eval, previous);
    st.epoch = epoch;
    st.mean_loss =
        loss_acc / static_cast<double>(config.iterations_per_epoch * config.batch_size);
    previous = std::move(polled);
    result.stats.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return result;
}

}  // namespace pnp
