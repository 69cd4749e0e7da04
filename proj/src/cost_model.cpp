#include "pnp/cost_model.hpp"

#include <filesystem>
#include <fstream>
#include <locale>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "pnp/errors.hpp"
#include "pnp/sampler.hpp"

namespace pnp {

CostConstants CostConstants::from_config(const TransformerConfig& cfg) {
  cfg.validate();
  const Macs d = cfg.d_model, f = cfg.d_ffn, q = cfg.n_queries;
  const Macs ne = cfg.n_encoder_layers, nd = cfg.n_decoder_layers;
  CostConstants k;
  k.a = 2 * ne * d;
  k.b = ne * (4 * d * d + 2 * d * f);
  k.c = nd * (2 * d * d + 2 * q * d);
  k.o = nd * (4 * q * d * d + 2 * q * q * d + 2 * q * d * f);
  return k;
}

namespace {

CostReport transformer_part(const CostConstants& k, Macs length) {
  CostReport r;
  r.encoder = k.a * length * length + k.b * length;
  r.decoder = k.c * length + k.o;
  return r;
}

}  // namespace

CostReport transformer_cost(const TransformerConfig& cfg, std::size_t length) {
  if (length == 0) throw ContractError("transformer_cost: length must be >= 1");
  CostReport r = transformer_part(CostConstants::from_config(cfg), length);
  r.total = r.encoder + r.decoder;
  return r;
}

CostReport pnp_cost(const TransformerConfig& cfg, std::size_t length, double alpha,
                    std::size_t pool_count, std::size_t scoring_hidden) {
  if (length == 0) throw ContractError("pnp_cost: length must be >= 1");
  const Macs n = poll_count(alpha, length);
  // The pool sampler emits nothing when every location was polled.
  const Macs m = n < length ? pool_count : 0;
  CostReport r = transformer_part(CostConstants::from_config(cfg), n + m);
  const Macs d = cfg.d_model, h = scoring_hidden, L = length;
  r.sampler = L * (d * h + h);
  if (m > 0) r.sampler += (L - n) * (d * m + d * d);
  r.total = r.encoder + r.decoder + r.sampler;
  return r;
}

std::vector<CurveRow> tradeoff_curve(const TransformerConfig& cfg, std::size_t length,
                                     const std::vector<double>& alphas, std::size_t pool_count) {
  if (alphas.empty()) throw ContractError("tradeoff_curve: no poll ratios given");
  std::vector<CurveRow> rows;
  rows.reserve(alphas.size());
  for (double a : alphas) rows.push_back({a, pnp_cost(cfg, length, a, pool_count)});
  return rows;
}

void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "alpha,encoder,decoder,sampler,total\n";
  for (const auto& row : rows) {
    std::ostringstream alpha;
    alpha.imbue(std::locale::classic());
    alpha << row.alpha;
    os << alpha.str() << ',' << std::to_string(row.cost.encoder) << ','
       << std::to_string(row.cost.decoder) << ',' << std::to_string(row.cost.sampler) << ','
       << std::to_string(row.cost.total) << '\n';
  }
}

TransformerConfig resolve_config(const std::string& name_or_path) {
  if (name_or_path == "detr-r50" || name_or_path == "detr-r50-dc5" || name_or_path == "detr") {
    return TransformerConfig::detr();
  }
  if (name_or_path == "toy") return TransformerConfig{};
  if (!std::filesystem::exists(name_or_path)) {
    throw ContractError("unknown config '" + name_or_path +
                        "' (expected detr-r50, detr-r50-dc5, toy, or a JSON file)");
  }
  std::ifstream in(name_or_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(name_or_path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError(name_or_path + ": expected a JSON object");
  TransformerConfig cfg;
  auto field = [&](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_unsigned()) {
      throw ValidationError(name_or_path + ": field '" + key + "' must be a positive integer");
    }
    dst = j[key].get<std::size_t>();
  };
  field("d_model", cfg.d_model);
  field("n_heads", cfg.n_heads);
  field("d_ffn", cfg.d_ffn);
  field("n_encoder_layers", cfg.n_encoder_layers);
  field("n_decoder_layers", cfg.n_decoder_layers);
  field("n_queries", cfg.n_queries);
  cfg.validate();
  return cfg;
}

}  // namespace pnp
