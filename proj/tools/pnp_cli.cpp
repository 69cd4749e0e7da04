// pnp: cost model, density maps, toy training and dataset subsampling.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "pnp/cost_model.hpp"
#include "pnp/density.hpp"
#include "pnp/harness.hpp"
#include "pnp/instance_io.hpp"
#include "pnp/subsample.hpp"

namespace {

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  ss.imbue(std::locale::classic());
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    is.imbue(std::locale::classic());
    double v = 0.0;
    if (!(is >> v) || !is.eof()) throw CLI::ValidationError("--curve", "bad poll ratio '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--curve", "empty list");
  return out;
}

int run_cost(const std::string& config, std::size_t length, double alpha, std::size_t pool,
             const std::string& curve) {
  const auto cfg = pnp::resolve_config(config);
  const auto alphas = curve.empty() ? std::vector<double>{alpha} : parse_alpha_list(curve);
  pnp::write_curve_csv(std::cout, pnp::tradeoff_curve(cfg, length, alphas, pool));
  return 0;
}

int run_density(const std::string& input, std::uint64_t cost, const std::string& pgm,
                const std::string& csv) {
  const auto inst = pnp::load_instance(input);
  const auto abs = pnp::to_abstract_set(inst);
  const auto weights = pnp::location_weights(abs, inst.height, inst.width);
  const auto map = pnp::render_density(weights, cost, inst.height, inst.width);
  if (!pgm.empty()) {
    std::ofstream out(pgm);
    pnp::write_pgm(out, map);
  }
  if (!csv.empty()) {
    std::ofstream out(csv);
    pnp::write_density_csv(out, map);
  }
  if (pgm.empty() && csv.empty()) pnp::write_density_csv(std::cout, map);
  return 0;
}

int run_train(std::uint64_t seed, std::size_t epochs, double low, double high, std::size_t pool,
              const std::string& out_csv, const std::string& instance, double lr) {
  pnp::TrainConfig cfg;
  cfg.seed = seed;
  cfg.model.pool_count = pool;
  cfg.learning_rate = lr;
  pnp::PollRatioSchedule schedule(low, high, seed);

  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("cannot open " + out_csv + " for writing");
  out.imbue(std::locale::classic());
  out << "epoch,in_box_fraction,sample_iou,mean_loss\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto result = pnp::train(cfg, schedule, epochs, [&](const pnp::EpochStats& st) {
    out << st.epoch << ',' << st.in_box_fraction << ',' << st.sample_iou << ',' << st.mean_loss
        << '\n';
    std::cerr << "epoch " << st.epoch << "  in_box " << std::fixed << std::setprecision(3)
              << st.in_box_fraction << "  iou " << st.sample_iou << "  loss " << st.mean_loss
              << std::defaultfloat << '\n';
  });

  if (!instance.empty()) {
    const auto scenes = pnp::evaluation_scenes(cfg);
    const auto& fm = scenes.front().feature_map;
    auto fwd = pnp::detector_forward(result.params, fm, cfg.eval_alpha);
    pnp::save_instance(instance, pnp::snapshot(fwd.abstract_set, fm.height, fm.width));
  }
  return 0;
}

int run_subsample(const std::string& annotations, std::size_t threshold, std::uint64_t seed,
                  const std::string& out) {
  const auto index = pnp::load_index(annotations);
  const auto selection = pnp::class_incremental_sample(index, threshold, seed);
  if (out.empty() || out == "-") {
    std::cout << pnp::selection_to_json(selection);
  } else {
    pnp::save_selection(out, selection);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poll-and-pool feature abstraction toolkit"};
  app.require_subcommand(1);

  auto* cost = app.add_subcommand("cost", "Transformer MAC counts with and without poll-and-pool");
  std::string config = "detr-r50";
  std::size_t length = 0, pool = 0;
  double alpha = 1.0;
  std::string curve;
  cost->add_option("--config", config, "detr-r50 | detr-r50-dc5 | toy | path to JSON config")
      ->capture_default_str();
  cost->add_option("--length", length, "Full token count L = H*W")->required()->check(CLI::PositiveNumber);
  cost->add_option("--alpha", alpha, "Poll ratio in (0, 1]")->capture_default_str();
  cost->add_option("--pool", pool, "Number of coarse (pooled) tokens M")->capture_default_str();
  cost->add_option("--curve", curve, "Comma-separated poll ratios; one CSV row each");

  auto* density = app.add_subcommand("density", "Computation density map from a saved instance");
  std::string input, pgm, csv;
  std::uint64_t total_cost = 0;
  density->add_option("--input", input, "Abstract-set instance file")->required()->check(CLI::ExistingFile);
  density->add_option("--cost", total_cost, "Total transformer cost to distribute")->required();
  density->add_option("--pgm", pgm, "Plain PGM output");
  density->add_option("--csv", csv, "Exact CSV output");

  auto* trainer = app.add_subcommand("train", "Train the toy detector and record sampling statistics");
  std::uint64_t seed = 1;
  std::size_t epochs = 60, train_pool = 4;
  double low = 0.15, high = 0.8, lr = 1e-3;
  std::string stats_out, instance;
  trainer->add_option("--seed", seed)->capture_default_str();
  trainer->add_option("--epochs", epochs)->capture_default_str();
  trainer->add_option("--alpha-low", low)->capture_default_str();
  trainer->add_option("--alpha-high", high)->capture_default_str();
  trainer->add_option("--pool", train_pool)->capture_default_str();
  trainer->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
  trainer->add_option("--out", stats_out, "Per-epoch statistics CSV")->required();
  trainer->add_option("--save-instance", instance, "Write the first evaluation scene's abstract set");

  auto* subsample = app.add_subcommand("subsample", "Class-incremental image subsampling");
  std::string annotations, selected;
  std::size_t threshold = 500;
  std::uint64_t sub_seed = 0;
  subsample->add_option("--annotations", annotations, "JSON {category: [image ids]}")
      ->required()
      ->check(CLI::ExistingFile);
  subsample->add_option("--threshold", threshold, "Per-category image threshold")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  subsample->add_option("--seed", sub_seed)->capture_default_str();
  subsample->add_option("--out", selected, "Output JSON array (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cost) return run_cost(config, length, alpha, pool, curve);
    if (*density) return run_density(input, total_cost, pgm, csv);
    if (*trainer) return run_train(seed, epochs, low, high, train_pool, stats_out, instance, lr);
    if (*subsample) return run_subsample(annotations, threshold, sub_seed, selected);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
