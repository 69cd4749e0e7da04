#include "pnp/subsample.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "pnp/errors.hpp"
#include "pnp/rng.hpp"

namespace pnp {

namespace {

std::string locate(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace

CategoryIndex parse_index(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text.begin(), json_text.end());
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte is one past the offending character.
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    throw ParseError("malformed annotation index at " + locate(json_text, at) + ": " + e.what());
  }
  if (!doc.is_object()) throw ValidationError("annotation index must be a JSON object");

  CategoryIndex index;
  for (const auto& [key, ids] : doc.items()) {
    CategoryId cat = 0;
    auto [end, ec] = std::from_chars(key.data(), key.data() + key.size(), cat);
    if (ec != std::errc{} || end != key.data() + key.size()) {
      throw ValidationError("category key '" + key + "' is not an integer");
    }
    if (!ids.is_array()) throw ValidationError("category " + key + ": expected an array of ids");
    std::vector<ImageId> list;
    std::set<ImageId> seen;
    for (const auto& v : ids) {
      if (!v.is_number_integer()) {
        throw ValidationError("category " + key + ": image ids must be integers");
      }
      const auto id = v.get<ImageId>();
      if (!seen.insert(id).second) {
        throw ValidationError("category " + key + ": duplicate image id " + std::to_string(id));
      }
      list.push_back(id);
    }
    if (!index.images.emplace(cat, std::move(list)).second) {
      throw ValidationError("category " + std::to_string(cat) + " listed twice");
    }
  }
  return index;
}

CategoryIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_index(buf.str());
}

std::vector<ImageId> class_incremental_sample(const CategoryIndex& index, std::size_t threshold,
                                              std::uint64_t seed) {
  if (threshold == 0) throw ContractError("class_incremental_sample: threshold must be positive");
  std::vector<std::pair<std::size_t, CategoryId>> order;
  for (const auto& [cat, ids] : index.images) order.emplace_back(ids.size(), cat);
  std::sort(order.begin(), order.end());

  SplitMix64 rng(seed);
  std::set<ImageId> selected;
  for (const auto& [count, cat] : order) {
    const auto& ids = index.images.at(cat);
    if (count <= threshold) {
      selected.insert(ids.begin(), ids.end());
      continue;
    }
    std::size_t in_sampled = 0;
    std::vector<ImageId> candidates;
    for (auto id : ids) {
      if (selected.count(id)) {
        ++in_sampled;
      } else {
        candidates.push_back(id);
      }
    }
    if (in_sampled >= threshold) continue;
    std::sort(candidates.begin(), candidates.end());
    shuffle(candidates, rng);
    selected.insert(candidates.begin(),
                    candidates.begin() + static_cast<std::ptrdiff_t>(threshold - in_sampled));
  }
  return {selected.begin(), selected.end()};
}

std::string selection_to_json(const std::vector<ImageId>& selection) {
  std::vector<ImageId> sorted = selection;
  std::sort(sorted.begin(), sorted.end());
  return nlohmann::json(sorted).dump() + "\n";
}

void save_selection(const std::filesystem::path& path, const std::vector<ImageId>& selection) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << selection_to_json(selection);
}

}  // namespace pnp
