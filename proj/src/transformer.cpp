#include "pnp/transformer.hpp"

#include <cmath>

#include "pnp/sampler.hpp"

namespace pnp {

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, SplitMix64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor zeros(std::size_t n) { return Tensor({n}, 0.0, true); }
Tensor ones(std::size_t n) { return Tensor({n}, 1.0, true); }

AttentionParams init_attention(std::size_t c, SplitMix64& rng) {
  AttentionParams p;
  p.wq = xavier(c, c, rng);
  p.bq = zeros(c);
  p.wk = xavier(c, c, rng);
  p.bk = zeros(c);
  p.wv = xavier(c, c, rng);
  p.bv = zeros(c);
  p.wo = xavier(c, c, rng);
  p.bo = zeros(c);
  return p;
}

NormParams init_norm(std::size_t c) { return {ones(c), zeros(c)}; }

FeedForwardParams init_ffn(std::size_t c, std::size_t hidden, SplitMix64& rng) {
  return {xavier(c, hidden, rng), zeros(hidden), xavier(hidden, c, rng), zeros(c)};
}

void append(std::vector<Tensor>& out, const AttentionParams& p) {
  out.insert(out.end(), {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo});
}
void append(std::vector<Tensor>& out, const NormParams& p) {
  out.insert(out.end(), {p.gamma, p.beta});
}
void append(std::vector<Tensor>& out, const FeedForwardParams& p) {
  out.insert(out.end(), {p.w1, p.b1, p.w2, p.b2});
}

void zero(Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowwise(matmul(x, w), b);
}

Tensor norm(const Tensor& x, const NormParams& p) {
  return add_rowwise(mul_rowwise(layer_norm_noaffine(x, kLayerNormEps), p.gamma), p.beta);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor with_pos(const Tensor& x, const Tensor& pos) { return pos.defined() ? add(x, pos) : x; }

}  // namespace

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_ffn == 0 || n_encoder_layers == 0 ||
      n_decoder_layers == 0 || n_queries == 0) {
    throw ContractError("transformer config: all sizes must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ContractError("transformer config: d_model " + std::to_string(d_model) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
  }
}

TransformerConfig TransformerConfig::detr() { return {256, 8, 2048, 6, 6, 100}; }

TransformerParams TransformerParams::init(const TransformerConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  TransformerParams p;
  p.config = cfg;
  const std::size_t c = cfg.d_model;
  for (std::size_t i = 0; i < cfg.n_encoder_layers; ++i) {
    EncoderLayerParams layer;
    layer.self_attn = init_attention(c, rng);
    layer.norm1 = init_norm(c);
    layer.ffn = init_ffn(c, cfg.d_ffn, rng);
    layer.norm2 = init_norm(c);
    p.encoder.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < cfg.n_decoder_layers; ++i) {
    DecoderLayerParams layer;
    layer.self_attn = init_attention(c, rng);
    layer.norm1 = init_norm(c);
    layer.cross_attn = init_attention(c, rng);
    layer.norm2 = init_norm(c);
    layer.ffn = init_ffn(c, cfg.d_ffn, rng);
    layer.norm3 = init_norm(c);
    p.decoder.push_back(std::move(layer));
  }
  std::vector<double> q(cfg.n_queries * c);
  for (auto& x : q) x = rng.normal();
  p.query_embed = Tensor({cfg.n_queries, c}, std::move(q), true);
  return p;
}

std::vector<Tensor> TransformerParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : encoder) {
    append(out, l.self_attn);
    append(out, l.norm1);
    append(out, l.ffn);
    append(out, l.norm2);
  }
  for (const auto& l : decoder) {
    append(out, l.self_attn);
    append(out, l.norm1);
    append(out, l.cross_attn);
    append(out, l.norm2);
    append(out, l.ffn);
    append(out, l.norm3);
  }
  out.push_back(query_embed);
  return out;
}

void TransformerParams::zero_output_projections() {
  for (auto& l : encoder) {
    zero(l.self_attn.wo);
    zero(l.self_attn.bo);
    zero(l.ffn.w2);
    zero(l.ffn.b2);
  }
  for (auto& l : decoder) {
    zero(l.self_attn.wo);
    zero(l.self_attn.bo);
    zero(l.cross_attn.wo);
    zero(l.cross_attn.bo);
    zero(l.ffn.w2);
    zero(l.ffn.b2);
  }
}

Tensor sine_position_embedding(std::size_t height, std::size_t width, std::size_t channels) {
  if (channels == 0 || channels % 2 != 0) {
    throw DimensionError("sine_position_embedding: channel count must be even");
  }
  const std::size_t half = channels / 2;
  const double two_pi = 2.0 * std::acos(-1.0);
  std::vector<double> out(height * width * channels);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const double y = static_cast<double>(i + 1) / static_cast<double>(height) * two_pi;
      const double x = static_cast<double>(j + 1) / static_cast<double>(width) * two_pi;
      double* row = out.data() + (i * width + j) * channels;
      for (std::size_t k = 0; k < half; ++k) {
        const double freq =
            std::pow(10000.0, static_cast<double>(2 * (k / 2)) / static_cast<double>(half));
        row[k] = (k % 2 == 0) ? std::sin(y / freq) : std::cos(y / freq);
        row[half + k] = (k % 2 == 0) ? std::sin(x / freq) : std::cos(x / freq);
      }
    }
  }
  return Tensor({height * width, channels}, std::move(out));
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const std::vector<bool>& key_padding, const AttentionParams& params,
                            std::size_t n_heads, std::vector<Tensor>* weights_out) {
  if (query.rank() != 2 || key.rank() != 2 || value.rank() != 2 || key.shape() != value.shape() ||
      query.dim(1) != key.dim(1)) {
    throw DimensionError("multi_head_attention: query " + shape_to_string(query.shape()) +
                         ", key " + shape_to_string(key.shape()) + ", value " +
                         shape_to_string(value.shape()));
  }
  const std::size_t c = query.dim(1);
  if (n_heads == 0 || c % n_heads != 0) {
    throw ContractError("multi_head_attention: width not divisible by head count");
  }
  const std::size_t dh = c / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = linear(query, params.wq, params.bq);
  Tensor k = linear(key, params.wk, params.bk);
  Tensor v = linear(value, params.wv, params.bv);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor w = key_padding.empty() ? softmax(logits, 1) : masked_softmax_rows(logits, key_padding);
    if (weights_out) weights_out->push_back(w);
    heads.push_back(matmul(w, vh));
  }
  Tensor merged = n_heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, params.wo, params.bo);
}

TokenSequence encode(const TokenSequence& seq, const TransformerParams& params) {
  const auto& cfg = params.config;
  if (seq.tokens.rank() != 2 || seq.tokens.dim(1) != cfg.d_model) {
    throw DimensionError("encode: tokens " + shape_to_string(seq.tokens.shape()) +
                         " do not match d_model " + std::to_string(cfg.d_model));
  }
  TokenSequence out = seq;
  Tensor src = seq.tokens;
  for (const auto& layer : params.encoder) {
    Tensor qk = with_pos(src, seq.positions);
    Tensor attn = multi_head_attention(qk, qk, src, seq.padding, layer.self_attn, cfg.n_heads);
    src = norm(add(src, attn), layer.norm1);
    src = norm(add(src, feed_forward(src, layer.ffn)), layer.norm2);
  }
  out.tokens = src;
  return out;
}

Tensor decode(const TokenSequence& memory, const TransformerParams& params) {
  const auto& cfg = params.config;
  if (memory.tokens.rank() != 2 || memory.tokens.dim(1) != cfg.d_model) {
    throw DimensionError("decode: memory " + shape_to_string(memory.tokens.shape()) +
                         " does not match d_model " + std::to_string(cfg.d_model));
  }
  const Tensor& query_pos = params.query_embed;
  Tensor keys = with_pos(memory.tokens, memory.positions);
  Tensor tgt = query_pos;
  for (const auto& layer : params.decoder) {
    Tensor qk = add(tgt, query_pos);
    Tensor self = multi_head_attention(qk, qk, tgt, {}, layer.self_attn, cfg.n_heads);
    tgt = norm(add(tgt, self), layer.norm1);
    Tensor cross = multi_head_attention(add(tgt, query_pos), keys, memory.tokens, memory.padding,
                                        layer.cross_attn, cfg.n_heads);
    tgt = norm(add(tgt, cross), layer.norm2);
    tgt = norm(add(tgt, feed_forward(tgt, layer.ffn)), layer.norm3);
  }
  return tgt;
}

}  // namespace pnp
