#pragma once

// Computation density maps: the transformer cost spread over grid locations.
// A polled location carries weight 1; a remaining location carries the sum
// of its aggregation weights over all coarse tokens.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "pnp/cost_model.hpp"
#include "pnp/sampler.hpp"

namespace pnp {

struct DensityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // H*W, row-major

  double sum() const;
};

std::vector<double> location_weights(const AbstractSet& abs, std::size_t height,
                                     std::size_t width);

/// values = total_cost * weights / sum(weights). ContractError if no weight is positive.
DensityMap render_density(std::span<const double> weights, Macs total_cost, std::size_t height,
                          std::size_t width);

/// Plain PGM (P2), scaled so the largest cell is 255.
void write_pgm(std::ostream& os, const DensityMap& map);
/// One grid row per line, comma separated, round-trip precision.
void write_density_csv(std::ostream& os, const DensityMap& map);

}  // namespace pnp
