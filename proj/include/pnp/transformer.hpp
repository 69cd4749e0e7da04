#pragma once

// Small post-norm encoder-decoder transformer over variable-length token sets.
// Position embeddings are added to queries and keys at every attention call;
// values carry content only.

#include <cstddef>
#include <vector>

#include "pnp/rng.hpp"
#include "pnp/tensor.hpp"

namespace pnp {

struct TransformerConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 64;
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t n_queries = 5;

  void validate() const;
  /// ResNet-50 DETR transformer: 256-d, 8 heads, 2048 FFN, 6+6 layers, 100 queries.
  static TransformerConfig detr();
};

struct TokenSequence {
  Tensor tokens;              // T x C
  Tensor positions;           // T x C, or undefined
  std::vector<bool> padding;  // T entries, or empty

  std::size_t size() const { return tokens.dim(0); }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct NormParams {
  Tensor gamma, beta;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  NormParams norm1;
  FeedForwardParams ffn;
  NormParams norm2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  NormParams norm1;
  AttentionParams cross_attn;
  NormParams norm2;
  FeedForwardParams ffn;
  NormParams norm3;
};

struct TransformerParams {
  TransformerConfig config;
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor query_embed;  // D x C

  static TransformerParams init(const TransformerConfig& cfg, SplitMix64& rng);
  std::vector<Tensor> parameters() const;
  /// Zero the attention output projections and the second FFN layer, so
  /// every sub-block contributes nothing beyond its residual path.
  void zero_output_projections();
};

/// DETR-style 2D sine embedding: first C/2 channels encode the row, the rest
/// the column. C must be even.
Tensor sine_position_embedding(std::size_t height, std::size_t width, std::size_t channels);

/// Scaled dot-product attention with n_heads heads. `query` and `key` should
/// already include any position embedding. When `weights_out` is given it
/// receives one T_q x T_k probability matrix per head.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const std::vector<bool>& key_padding, const AttentionParams& params,
                            std::size_t n_heads, std::vector<Tensor>* weights_out = nullptr);

TokenSequence encode(const TokenSequence& seq, const TransformerParams& params);

/// D x C decoder output for the learned queries attending to `memory`.
Tensor decode(const TokenSequence& memory, const TransformerParams& params);

}  // namespace pnp
