#include <map>
#include <optional>
#include <set>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pnp/cost_model.hpp"
#include "pnp/density.hpp"
#include "pnp/harness.hpp"
#include "pnp/subsample.hpp"

namespace py = pybind11;
using namespace pnp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Tensor& t) {
  if (!t.defined()) return Array(std::vector<py::ssize_t>{0});
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor to_tensor(const Array& a, std::size_t rows, std::size_t cols, const char* what) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(0)) != rows ||
      static_cast<std::size_t>(a.shape(1)) != cols) {
    throw DimensionError(std::string(what) + " must have shape (" + std::to_string(rows) + ", " +
                         std::to_string(cols) + ")");
  }
  return Tensor({rows, cols}, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict cost_dict(const CostReport& r) {
  py::dict d;
  d["encoder"] = r.encoder;
  d["decoder"] = r.decoder;
  d["sampler"] = r.sampler;
  d["total"] = r.total;
  return d;
}

// An abstract set together with the grid it was taken from.
struct GridAbstractSet {
  AbstractSet set;
  std::size_t height = 0, width = 0;
};

GridAbstractSet abstract_features(const Array& features, std::size_t height, std::size_t width,
                                  double alpha, std::size_t pool_count, std::uint64_t seed,
                                  std::optional<Array> positions,
                                  std::optional<std::vector<bool>> padding) {
  if (features.ndim() != 2) throw DimensionError("features must be a 2-D array (H*W, C)");
  const std::size_t c = static_cast<std::size_t>(features.shape(1));
  FeatureMap fm;
  fm.height = height;
  fm.width = width;
  fm.channels = c;
  fm.features = to_tensor(features, height * width, c, "features");
  if (positions) fm.position_embeddings = to_tensor(*positions, height * width, c, "positions");
  if (padding) fm.padding_mask = *padding;
  fm.validate();

  SplitMix64 rng(seed);
  auto scorer = ScoringNetParams::init(c, rng);
  auto pool = PoolParams::init(c, pool_count, rng);
  FineSet fine = poll_sample(fm, score_features(fm, scorer), alpha);
  CoarseSet coarse = pool_sample(fm, fine, pool);
  return {build_abstract_set(std::move(fine), std::move(coarse), fm), height, width};
}

py::dict scene_dict(const SyntheticScene& s) {
  py::dict d;
  d["height"] = s.feature_map.height;
  d["width"] = s.feature_map.width;
  d["features"] = to_array(s.feature_map.features);
  d["positions"] = to_array(s.feature_map.position_embeddings);
  py::list boxes;
  for (const auto& b : s.boxes) boxes.append(py::make_tuple(b.row0, b.col0, b.row1, b.col1, b.label));
  d["boxes"] = boxes;
  d["foreground"] = s.foreground;
  d["box_area_fraction"] = s.box_area_fraction();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Poll-and-pool feature abstraction";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<EvaluationError>(m, "EvaluationError", PyExc_ArithmeticError);

  py::class_<TransformerConfig>(m, "TransformerConfig")
      .def(py::init<>())
      .def_readwrite("d_model", &TransformerConfig::d_model)
      .def_readwrite("n_heads", &TransformerConfig::n_heads)
      .def_readwrite("d_ffn", &TransformerConfig::d_ffn)
      .def_readwrite("n_encoder_layers", &TransformerConfig::n_encoder_layers)
      .def_readwrite("n_decoder_layers", &TransformerConfig::n_decoder_layers)
      .def_readwrite("n_queries", &TransformerConfig::n_queries)
      .def("validate", &TransformerConfig::validate)
      .def_static("detr", &TransformerConfig::detr);

  m.def("resolve_config", &resolve_config, py::arg("name_or_path"));
  m.def("transformer_cost",
        [](const TransformerConfig& cfg, std::size_t length) { return cost_dict(transformer_cost(cfg, length)); },
        py::arg("config"), py::arg("length"));
  m.def("pnp_cost",
        [](const TransformerConfig& cfg, std::size_t length, double alpha, std::size_t pool,
           std::size_t hidden) { return cost_dict(pnp_cost(cfg, length, alpha, pool, hidden)); },
        py::arg("config"), py::arg("length"), py::arg("alpha"), py::arg("pool_count") = 0,
        py::arg("scoring_hidden") = kScoringHidden);
  m.def("tradeoff_curve",
        [](const TransformerConfig& cfg, std::size_t length, const std::vector<double>& alphas,
           std::size_t pool) {
          py::list rows;
          for (const auto& row : tradeoff_curve(cfg, length, alphas, pool)) {
            auto d = cost_dict(row.cost);
            d["alpha"] = row.alpha;
            rows.append(d);
          }
          return rows;
        },
        py::arg("config"), py::arg("length"), py::arg("alphas"), py::arg("pool_count") = 0);

  m.def("poll_count", &poll_count, py::arg("alpha"), py::arg("valid"));
  m.def("rank_locations",
        [](const std::vector<double>& scores, std::size_t n, const std::vector<bool>& padding) {
          return rank_locations(scores, padding, n);
        },
        py::arg("scores"), py::arg("n"), py::arg("padding") = std::vector<bool>{});

  py::class_<GridAbstractSet>(m, "AbstractSet")
      .def_property_readonly("height", [](const GridAbstractSet& g) { return g.height; })
      .def_property_readonly("width", [](const GridAbstractSet& g) { return g.width; })
      .def_property_readonly("fine_indices", [](const GridAbstractSet& g) { return g.set.fine.indices; })
      .def_property_readonly("scores", [](const GridAbstractSet& g) { return to_array(g.set.fine.scores); })
      .def_property_readonly("remaining_indices",
                             [](const GridAbstractSet& g) { return g.set.coarse.remaining_indices; })
      .def_property_readonly("aggregation_weights",
                             [](const GridAbstractSet& g) { return to_array(g.set.coarse.aggregation_weights); })
      .def_property_readonly("tokens", [](const GridAbstractSet& g) { return to_array(g.set.tokens); })
      .def_property_readonly("token_positions",
                             [](const GridAbstractSet& g) { return to_array(g.set.token_positions); })
      .def_property_readonly("token_count", [](const GridAbstractSet& g) { return g.set.token_count(); })
      .def("location_weights",
           [](const GridAbstractSet& g) { return location_weights(g.set, g.height, g.width); });

  m.def("abstract", &abstract_features, py::arg("features"), py::arg("height"), py::arg("width"),
        py::arg("alpha"), py::arg("pool_count") = 0, py::arg("seed") = 0,
        py::arg("positions") = py::none(), py::arg("padding") = py::none(),
        "Poll and pool a (H*W, C) feature array with randomly initialized sampler weights.");

  m.def("density_map",
        [](const GridAbstractSet& g, Macs total_cost) {
          auto map = render_density(location_weights(g.set, g.height, g.width), total_cost, g.height, g.width);
          Array out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(g.height), static_cast<py::ssize_t>(g.width)});
          std::copy(map.values.begin(), map.values.end(), out.mutable_data());
          return out;
        },
        py::arg("abstract_set"), py::arg("total_cost"));

  py::class_<PollRatioSchedule>(m, "PollRatioSchedule")
      .def(py::init<double, double, std::uint64_t>(), py::arg("alpha_low"), py::arg("alpha_high"),
           py::arg("seed"))
      .def_property_readonly("alpha_low", &PollRatioSchedule::alpha_low)
      .def_property_readonly("alpha_high", &PollRatioSchedule::alpha_high)
      .def("next", &PollRatioSchedule::next);

  m.def("generate_scene",
        [](std::uint64_t seed) {
          SplitMix64 rng(seed);
          return scene_dict(generate_scene(rng, SceneConfig{}));
        },
        py::arg("seed"));

  m.def("train",
        [](std::uint64_t seed, std::size_t epochs, double low, double high, std::size_t pool,
           std::size_t iterations, double lr) {
          TrainConfig cfg;
          cfg.seed = seed;
          cfg.model.pool_count = pool;
          cfg.iterations_per_epoch = iterations;
          cfg.learning_rate = lr;
          PollRatioSchedule schedule(low, high, seed);
          const TrainResult result = [&] {
            py::gil_scoped_release release;
            return train(cfg, schedule, epochs);
          }();
          py::list rows;
          for (const auto& st : result.stats) {
            py::dict d;
            d["epoch"] = st.epoch;
            d["in_box_fraction"] = st.in_box_fraction;
            d["sample_iou"] = st.sample_iou;
            d["mean_loss"] = st.mean_loss;
            rows.append(d);
          }
          return rows;
        },
        py::arg("seed") = 1, py::arg("epochs") = 60, py::arg("alpha_low") = 0.15,
        py::arg("alpha_high") = 0.8, py::arg("pool_count") = 4, py::arg("iterations_per_epoch") = 24,
        py::arg("learning_rate") = 1e-3);

  m.def("class_incremental_sample",
        [](const std::map<CategoryId, std::vector<ImageId>>& images, std::size_t threshold,
           std::uint64_t seed) {
          CategoryIndex index{images};
          for (const auto& [cat, ids] : images) {
            std::set<ImageId> unique(ids.begin(), ids.end());
            if (unique.size() != ids.size()) {
              throw ValidationError("category " + std::to_string(cat) + ": duplicate image ids");
            }
          }
          return class_incremental_sample(index, threshold, seed);
        },
        py::arg("index"), py::arg("threshold"), py::arg("seed"));
}
