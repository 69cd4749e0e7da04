#include "pnp/instance_io.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

namespace pnp {

namespace {

constexpr std::array<char, 4> kMagic{'P', 'N', 'P', 'A'};

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

std::uint64_t get_bytes(std::istream& is, int n, const char* what) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), n);
  if (is.gcount() != n) throw ParseError(std::string("instance file truncated while reading ") + what);
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  return static_cast<std::uint32_t>(get_bytes(is, 4, what));
}

double get_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(get_bytes(is, 8, what));
}

std::vector<double> get_f64s(std::istream& is, std::size_t n, const char* what) {
  std::vector<double> v(n);
  for (auto& x : v) x = get_f64(is, what);
  return v;
}

}  // namespace

std::vector<std::size_t> SavedInstance::remaining_indices() const {
  const std::size_t L = std::size_t{height} * width;
  std::vector<bool> fine(L, false);
  for (auto i : fine_indices) fine[i] = true;
  std::vector<std::size_t> rem;
  for (std::size_t i = 0; i < L; ++i) {
    if (!fine[i]) rem.push_back(i);
  }
  return rem;
}

SavedInstance snapshot(const AbstractSet& abs, std::size_t height, std::size_t width) {
  const std::size_t L = height * width;
  const std::size_t n = abs.fine.size(), m = abs.coarse.size();
  if (n + abs.coarse.remaining_indices.size() != L) {
    throw ContractError("snapshot: padded feature maps cannot be saved");
  }
  SavedInstance inst;
  inst.height = static_cast<std::uint32_t>(height);
  inst.width = static_cast<std::uint32_t>(width);
  inst.channels = static_cast<std::uint32_t>(abs.tokens.dim(1));
  inst.pool_count = static_cast<std::uint32_t>(m);
  for (auto i : abs.fine.indices) inst.fine_indices.push_back(static_cast<std::uint32_t>(i));
  inst.scores = abs.fine.scores.to_vector();
  if (m > 0) inst.aggregation_weights = abs.coarse.aggregation_weights.to_vector();
  inst.tokens = abs.tokens.to_vector();
  return inst;
}

AbstractSet to_abstract_set(const SavedInstance& inst) {
  const std::size_t n = inst.fine_indices.size(), m = inst.pool_count, c = inst.channels;
  AbstractSet abs;
  abs.fine.indices.assign(inst.fine_indices.begin(), inst.fine_indices.end());
  abs.fine.scores = Tensor({n}, inst.scores);
  abs.tokens = Tensor({n + m, c}, inst.tokens);
  std::vector<std::size_t> fine_rows(n);
  std::iota(fine_rows.begin(), fine_rows.end(), 0);
  abs.fine.vectors = gather_rows(abs.tokens, fine_rows);
  abs.coarse.remaining_indices = inst.remaining_indices();
  if (m > 0) {
    const std::size_t rem = abs.coarse.remaining_indices.size();
    abs.coarse.aggregation_weights = Tensor({rem, m}, inst.aggregation_weights);
    std::vector<std::size_t> rows(m);
    std::iota(rows.begin(), rows.end(), n);
    abs.coarse.vectors = gather_rows(abs.tokens, rows);
  }
  abs.token_padding.assign(n + m, false);
  return abs;
}

void write_instance(std::ostream& os, const SavedInstance& inst) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, kInstanceVersion);
  put_u32(os, inst.height);
  put_u32(os, inst.width);
  put_u32(os, inst.channels);
  put_u32(os, static_cast<std::uint32_t>(inst.fine_indices.size()));
  put_u32(os, inst.pool_count);
  for (auto i : inst.fine_indices) put_u32(os, i);
  for (double v : inst.scores) put_f64(os, v);
  for (double v : inst.aggregation_weights) put_f64(os, v);
  for (double v : inst.tokens) put_f64(os, v);
}

SavedInstance read_instance(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4 || magic != kMagic) throw ParseError("not an instance file (bad magic)");
  const auto version = get_u32(is, "version");
  if (version != kInstanceVersion) {
    throw ParseError("unsupported instance version " + std::to_string(version));
  }
  SavedInstance inst;
  inst.height = get_u32(is, "height");
  inst.width = get_u32(is, "width");
  inst.channels = get_u32(is, "channels");
  const std::uint32_t n = get_u32(is, "fine count");
  inst.pool_count = get_u32(is, "pool count");
  const std::size_t L = std::size_t{inst.height} * inst.width;
  if (L == 0 || inst.channels == 0 || n == 0 || n > L) {
    throw ParseError("instance header has inconsistent sizes");
  }
  std::vector<bool> seen(L, false);
  inst.fine_indices.resize(n);
  for (auto& i : inst.fine_indices) {
    i = get_u32(is, "fine indices");
    if (i >= L || seen[i]) throw ParseError("instance fine index out of range or repeated");
    seen[i] = true;
  }
  inst.scores = get_f64s(is, n, "scores");
  if (inst.pool_count > 0 && n < L) {
    inst.aggregation_weights = get_f64s(is, (L - n) * inst.pool_count, "aggregation weights");
  } else if (inst.pool_count > 0) {
    throw ParseError("instance has coarse tokens but no remaining locations");
  }
  inst.tokens = get_f64s(is, (std::size_t{n} + inst.pool_count) * inst.channels, "tokens");
  return inst;
}

void save_instance(const std::filesystem::path& path, const SavedInstance& inst) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_instance(out, inst);
}

SavedInstance load_instance(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  SavedInstance inst = read_instance(in);
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw ParseError("instance file has trailing bytes after the token block");
  }
  return inst;
}

}  // namespace pnp
