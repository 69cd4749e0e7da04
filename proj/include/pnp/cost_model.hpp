#pragma once

// Analytic multiply-accumulate (MAC) counts for the transformer with and
// without poll-and-pool abstraction. Encoder cost is a*L^2 + b*L, decoder
// cost c*L + O. Counts are MACs; reported "FLOPs" figures for DETR-style
// models line up with MAC counting.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pnp/transformer.hpp"

namespace pnp {

using Macs = std::uint64_t;

struct CostConstants {
  Macs a = 0;  // L^2 coefficient, encoder self-attention
  Macs b = 0;  // L coefficient, encoder projections and FFN
  Macs c = 0;  // L coefficient, decoder cross-attention
  Macs o = 0;  // L-independent decoder cost

  static CostConstants from_config(const TransformerConfig& cfg);
};

struct CostReport {
  Macs encoder = 0;
  Macs decoder = 0;
  Macs sampler = 0;
  Macs total = 0;
};

/// Canonical token counts for an 800x1066 input: stride 32 gives 25x34, stride 16 (DC5) 50x67.
inline constexpr std::size_t kDetrR50Length = 850;
inline constexpr std::size_t kDetrDc5Length = 3350;

CostReport transformer_cost(const TransformerConfig& cfg, std::size_t length);

/// Cost with N = poll_count(alpha, L) fine tokens plus M coarse tokens. The
/// sampler term counts the scoring MLP over all L locations and the pool
/// projections over the L - N remaining ones.
CostReport pnp_cost(const TransformerConfig& cfg, std::size_t length, double alpha,
                    std::size_t pool_count, std::size_t scoring_hidden = 256);

struct CurveRow {
  double alpha = 0.0;
  CostReport cost;
};

std::vector<CurveRow> tradeoff_curve(const TransformerConfig& cfg, std::size_t length,
                                     const std::vector<double>& alphas, std::size_t pool_count);

/// Header `alpha,encoder,decoder,sampler,total` followed by one row per entry.
void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows);

/// "detr-r50", "detr-r50-dc5", "toy", or a path to a JSON object with any of
/// d_model, n_heads, d_ffn, n_encoder_layers, n_decoder_layers, n_queries.
TransformerConfig resolve_config(const std::string& name_or_path);

}  // namespace pnp
