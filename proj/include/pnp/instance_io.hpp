#pragma once

// Saved abstract-set instances. Little-endian layout:
//
//   "PNPA"  magic (4 bytes)
//   u32     version (1)
//   u32     H, W, C, N, M
//   u32     fine indices            [N]
//   f64     scores                  [N]
//   f64     aggregation weights     [(H*W - N) x M], row-major
//   f64     token values            [(N + M) x C], row-major
//
// The remaining locations are implicitly the ascending complement of the fine
// indices, so only maps without padding can be saved.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "pnp/sampler.hpp"

namespace pnp {

inline constexpr std::uint32_t kInstanceVersion = 1;

struct SavedInstance {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t pool_count = 0;
  std::vector<std::uint32_t> fine_indices;
  std::vector<double> scores;
  std::vector<double> aggregation_weights;
  std::vector<double> tokens;

  std::vector<std::size_t> remaining_indices() const;
};

/// Capture values of an abstract set. ContractError if the map had padding.
SavedInstance snapshot(const AbstractSet& abs, std::size_t height, std::size_t width);
/// Rebuild a (constant) abstract set from a saved instance.
AbstractSet to_abstract_set(const SavedInstance& inst);

void write_instance(std::ostream& os, const SavedInstance& inst);
/// ParseError on bad magic, unknown version, truncation, or inconsistent sizes.
SavedInstance read_instance(std::istream& is);

void save_instance(const std::filesystem::path& path, const SavedInstance& inst);
SavedInstance load_instance(const std::filesystem::path& path);

}  // namespace pnp
