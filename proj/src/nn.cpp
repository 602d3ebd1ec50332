#include "q2a/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace q2a {

void AttentionConfig::validate() const {
  if (model_dim == 0 || num_heads == 0)
    throw std::invalid_argument("AttentionConfig: dims must be positive");
  if (model_dim % num_heads != 0)
    throw std::invalid_argument(
        "AttentionConfig: model_dim " + std::to_string(model_dim) +
        " not divisible by num_heads " + std::to_string(num_heads));
}

// ---- Linear ---------------------------------------------------------------

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = Tensor::randn(in, out, rng, stddev);
  l.weight.set_requires_grad(true);
  l.bias = Tensor(1, out);
  l.bias.set_requires_grad(true);
  return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out) {
  Linear l;
  l.weight = Tensor(in, out);
  l.weight.set_requires_grad(true);
  l.bias = Tensor(1, out);
  l.bias.set_requires_grad(true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  return add_row(matmul(x, weight), bias);
}

void Linear::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

// ---- LayerNorm ------------------------------------------------------------

LayerNormParams LayerNormParams::init(std::size_t dim) {
  LayerNormParams n;
  n.gain = Tensor(1, dim, 1.0);
  n.gain.set_requires_grad(true);
  n.bias = Tensor(1, dim);
  n.bias.set_requires_grad(true);
  return n;
}

Tensor LayerNormParams::forward(const Tensor& x) const {
  return layer_norm(x, gain, bias, eps);
}

void LayerNormParams::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

// ---- MultiHeadAttention ---------------------------------------------------

MultiHeadAttention MultiHeadAttention::init(const AttentionConfig& cfg,
                                            Rng& rng) {
  cfg.validate();
  MultiHeadAttention m;
  m.cfg = cfg;
  const std::size_t d = cfg.model_dim;
  m.q_proj = Linear::init(d, d, rng);
  m.k_proj = Linear::init(d, d, rng);
  m.v_proj = Linear::init(d, d, rng);
  m.out_proj = Linear::init(d, d, rng);
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& key,
                                   const Tensor& value) const {
  if (key.rows() != value.rows())
    throw std::invalid_argument(
        "multi_head_attention: key rows " + std::to_string(key.rows()) +
        " != value rows " + std::to_string(value.rows()));
  const std::size_t d = cfg.model_dim;
  if (query.cols() != d || key.cols() != d || value.cols() != d)
    throw std::invalid_argument(
        "multi_head_attention: feature dim mismatch, expected " +
        std::to_string(d) + ", got " + query.shape_str() + ", " +
        key.shape_str() + ", " + value.shape_str());

  const Tensor q = q_proj.forward(query);
  const Tensor k = k_proj.forward(key);
  const Tensor v = v_proj.forward(value);

  const std::size_t dk = cfg.head_dim();
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> heads;
  heads.reserve(cfg.num_heads);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    const Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    const Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    const Tensor weights =
        softmax_rows(scale(matmul_nt(qh, kh), scale_factor));
    heads.push_back(matmul(weights, vh));
  }
  return out_proj.forward(cfg.num_heads == 1 ? heads.front()
                                             : concat_cols(heads));
}

void MultiHeadAttention::collect(const std::string& prefix,
                                 ParameterList& out) {
  q_proj.collect(prefix + ".q", out);
  k_proj.collect(prefix + ".k", out);
  v_proj.collect(prefix + ".v", out);
  out_proj.collect(prefix + ".out", out);
}

// ---- FeedForward ----------------------------------------------------------

FeedForward FeedForward::init(std::size_t dim, std::size_t hidden_mult,
                              Rng& rng, Activation act) {
  if (hidden_mult < 1)
    throw std::invalid_argument("feed_forward: hidden_mult must be >= 1");
  FeedForward f;
  f.fc1 = Linear::init(dim, dim * hidden_mult, rng);
  f.fc2 = Linear::init(dim * hidden_mult, dim, rng);
  f.act = act;
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const {
  return fc2.forward(activation(fc1.forward(x), act));
}

void FeedForward::collect(const std::string& prefix, ParameterList& out) {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---- EncoderLayer ---------------------------------------------------------

EncoderLayer EncoderLayer::init(const AttentionConfig& cfg,
                                std::size_t hidden_mult, Rng& rng) {
  EncoderLayer l;
  l.norm1 = LayerNormParams::init(cfg.model_dim);
  l.norm2 = LayerNormParams::init(cfg.model_dim);
  l.attn = MultiHeadAttention::init(cfg, rng);
  l.ffn = FeedForward::init(cfg.model_dim, hidden_mult, rng);
  return l;
}

Tensor EncoderLayer::forward(const Tensor& x) const {
  if (x.cols() != attn.cfg.model_dim)
    throw std::invalid_argument("encoder_layer: feature dim " +
                                x.shape_str() + " does not match model_dim " +
                                std::to_string(attn.cfg.model_dim));
  const Tensor n1 = norm1.forward(x);
  const Tensor h = add(x, attn.forward(n1, n1, n1));
  return add(h, ffn.forward(norm2.forward(h)));
}

void EncoderLayer::collect(const std::string& prefix, ParameterList& out) {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  ffn.collect(prefix + ".ffn", out);
}

// ---- DecoderLayer ---------------------------------------------------------

DecoderLayer DecoderLayer::init(const AttentionConfig& cfg,
                                std::size_t hidden_mult, Rng& rng) {
  DecoderLayer l;
  l.norm1 = LayerNormParams::init(cfg.model_dim);
  l.norm2 = LayerNormParams::init(cfg.model_dim);
  l.norm3 = LayerNormParams::init(cfg.model_dim);
  l.self_attn = MultiHeadAttention::init(cfg, rng);
  l.cross_attn = MultiHeadAttention::init(cfg, rng);
  l.ffn = FeedForward::init(cfg.model_dim, hidden_mult, rng);
  return l;
}

Tensor DecoderLayer::forward(const Tensor& a, const Tensor& memory,
                             bool plain_eq2) const {
  if (a.cols() != memory.cols())
    throw std::invalid_argument("decoder_layer: feature dim mismatch: " +
                                a.shape_str() + " vs " + memory.shape_str());
  if (plain_eq2) {
    Tensor h = self_attn.forward(a, a, a);
    h = cross_attn.forward(h, memory, memory);
    return ffn.forward(h);
  }
  const Tensor n1 = norm1.forward(a);
  Tensor h = add(a, self_attn.forward(n1, n1, n1));
  h = add(h, cross_attn.forward(norm2.forward(h), memory, memory));
  return add(h, ffn.forward(norm3.forward(h)));
}

void DecoderLayer::collect(const std::string& prefix, ParameterList& out) {
  norm1.collect(prefix + ".norm1", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm2.collect(prefix + ".norm2", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  norm3.collect(prefix + ".norm3", out);
  ffn.collect(prefix + ".ffn", out);
}

}  // namespace q2a
