#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "q2a/tensor.hpp"

namespace q2a {

struct Parameter {
  std::string name;  // unique dotted path
  Tensor tensor;
};

using ParameterList = std::vector<Parameter>;

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;

  std::size_t head_dim() const { return model_dim / num_heads; }
  void validate() const;
};

// Affine map x -> x W + b with W: in x out, b: 1 x out.
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  static Linear zeros(std::size_t in, std::size_t out);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out);
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t dim);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out);
};

struct MultiHeadAttention {
  AttentionConfig cfg;
  Linear q_proj, k_proj, v_proj, out_proj;

  static MultiHeadAttention init(const AttentionConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& query, const Tensor& key,
                 const Tensor& value) const;
  void collect(const std::string& prefix, ParameterList& out);
};

struct FeedForward {
  Linear fc1, fc2;
  Activation act = Activation::Gelu;

  static FeedForward init(std::size_t dim, std::size_t hidden_mult, Rng& rng,
                          Activation act = Activation::Gelu);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out);
};

// Pre-norm encoder layer: x + MSA(LN(x)), then + FFN(LN(.)).
struct EncoderLayer {
  LayerNormParams norm1, norm2;
  MultiHeadAttention attn;
  FeedForward ffn;

  static EncoderLayer init(const AttentionConfig& cfg, std::size_t hidden_mult,
                           Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out);
};

// Self-attention, then cross-attention against memory, then FFN. With
// plain_eq2 the three sub-layer outputs replace their inputs directly,
// without residual connections or normalization.
struct DecoderLayer {
  LayerNormParams norm1, norm2, norm3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;

  static DecoderLayer init(const AttentionConfig& cfg, std::size_t hidden_mult,
                           Rng& rng);
  Tensor forward(const Tensor& a, const Tensor& memory,
                 bool plain_eq2 = false) const;
  void collect(const std::string& prefix, ParameterList& out);
};

}  // namespace q2a
