#include "pnp/density.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <locale>
#include <numeric>
#include <ostream>

namespace pnp {

double DensityMap::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

std::vector<double> location_weights(const AbstractSet& abs, std::size_t height,
                                     std::size_t width) {
  const std::size_t L = height * width;
  std::vector<double> w(L, 0.0);
  for (auto i : abs.fine.indices) {
    if (i >= L) throw DimensionError("location_weights: fine index outside the grid");
    w[i] = 1.0;
  }
  const std::size_t m = abs.coarse.size();
  if (m == 0) return w;
  const auto& rem = abs.coarse.remaining_indices;
  auto a = abs.coarse.aggregation_weights.data();
  if (a.size() != rem.size() * m) {
    throw DimensionError("location_weights: aggregation weights do not match remaining set");
  }
  for (std::size_t r = 0; r < rem.size(); ++r) {
    if (rem[r] >= L) throw DimensionError("location_weights: remaining index outside the grid");
    double acc = 0.0;
    for (std::size_t k = 0; k < m; ++k) acc += a[r * m + k];
    w[rem[r]] = acc;
  }
  return w;
}

DensityMap render_density(std::span<const double> weights, Macs total_cost, std::size_t height,
                          std::size_t width) {
  if (weights.size() != height * width) {
    throw DimensionError("render_density: " + std::to_string(weights.size()) +
                         " weights for a " + std::to_string(height) + "x" +
                         std::to_string(width) + " grid");
  }
  double total_weight = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw ContractError("render_density: invalid weight");
    total_weight += w;
  }
  if (!(total_weight > 0.0)) throw ContractError("render_density: all weights are zero");
  DensityMap map{height, width, std::vector<double>(weights.size())};
  const double cost = static_cast<double>(total_cost);
  for (std::size_t i = 0; i < weights.size(); ++i) map.values[i] = cost * (weights[i] / total_weight);
  return map;
}

void write_pgm(std::ostream& os, const DensityMap& map) {
  const double mx = map.values.empty() ? 0.0 : *std::max_element(map.values.begin(), map.values.end());
  const auto loc = os.imbue(std::locale::classic());
  os << "P2\n" << map.width << ' ' << map.height << "\n255\n";
  for (std::size_t i = 0; i < map.height; ++i) {
    for (std::size_t j = 0; j < map.width; ++j) {
      const double v = map.values[i * map.width + j];
      const long level = mx > 0.0 ? std::lround(255.0 * v / mx) : 0;
      os << (j ? " " : "") << level;
    }
    os << '\n';
  }
  os.imbue(loc);
}

void write_density_csv(std::ostream& os, const DensityMap& map) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  const auto loc = os.imbue(std::locale::classic());
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < map.height; ++i) {
    for (std::size_t j = 0; j < map.width; ++j) {
      os << (j ? "," : "") << map.values[i * map.width + j];
    }
    os << '\n';
  }
  os.flags(flags);
  os.precision(prec);
  os.imbue(loc);
}

}  // namespace pnp
