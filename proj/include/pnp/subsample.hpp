#pragma once

// Class-incremental dataset subsampling. Categories are visited from the
// scarcest to the most abundant; each one above the per-category threshold is
// topped up to the threshold with images not selected yet, reusing images a
// scarcer category already pulled in. Categories at or below the threshold
// keep all of their images.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string_view>
#include <vector>

namespace pnp {

using CategoryId = std::int64_t;
using ImageId = std::int64_t;

struct CategoryIndex {
  std::map<CategoryId, std::vector<ImageId>> images;
};

/// Parse `{"<category id>": [image ids...], ...}`. ParseError carries the
/// line and column of malformed JSON; duplicate image ids within a category
/// or non-integer keys raise ValidationError.
CategoryIndex parse_index(std::string_view json_text);
CategoryIndex load_index(const std::filesystem::path& path);

/// Selected image ids, ascending.
std::vector<ImageId> class_incremental_sample(const CategoryIndex& index, std::size_t threshold,
                                              std::uint64_t seed);

/// JSON array of ascending ids, newline terminated.
std::string selection_to_json(const std::vector<ImageId>& selection);
void save_selection(const std::filesystem::path& path, const std::vector<ImageId>& selection);

}  // namespace pnp
