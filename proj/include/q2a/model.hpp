#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "q2a/data.hpp"
#include "q2a/nn.hpp"
#include "q2a/tensor.hpp"

namespace q2a {

enum class FusionKind { Cman, Sum, Mul };
enum class HeadKind { Decoder, Linear };

std::string fusion_kind_name(FusionKind k);
FusionKind fusion_kind_from_name(const std::string& name);
std::string head_kind_name(HeadKind k);
HeadKind head_kind_from_name(const std::string& name);

struct ModelConfig {
  std::size_t feature_dim = 64;          // D_f
  std::size_t grid_size = 4;             // N = grid_size^2 image tokens
  std::size_t cell_feature_dim = kCellFeatureDim;
  std::size_t max_question_tokens = 8;   // M
  std::size_t token_vocab_size = 19;
  std::size_t num_answer_classes = 23;   // C
  std::size_t answer_embed_dim = 1024;   // D_a
  std::size_t fusion_layers = 2;
  std::size_t decoder_layers = 2;        // L
  std::size_t num_heads = 4;
  std::size_t ffn_mult = 4;
  double gamma_plus = 1.0;
  double gamma_minus = 4.0;
  // Deep-supervision weight: adds an auxiliary pooled-linear classification
  // loss on the fused features during decoder-head training (0 disables).
  // Inference always uses the decoder head alone.
  double aux_loss_weight = 0.5;
  FusionKind fusion_kind = FusionKind::Cman;
  HeadKind head_kind = HeadKind::Decoder;
  bool plain_eq2 = false;
  bool per_class_head = false;
  std::uint64_t seed = 0;

  std::size_t num_image_tokens() const { return grid_size * grid_size; }
  void validate() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct Prediction {
  std::vector<double> probs;   // per-class sigmoid outputs, not normalized
  std::vector<double> logits;
  std::size_t chosen_class = 0;  // argmax; ties broken by lowest index
};

Prediction prediction_from_logits(const std::vector<double>& logits);

// The end-to-end semi-open VQA model: toy image/question encoders,
// concatenation+self-attention fusion, and a decoder head that refines
// learnable per-class answer embeddings against the fused features.
class Q2AModel {
 public:
  explicit Q2AModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  ParameterList parameters();
  void zero_grads();
  // Replaces the zero-initialized classifier weights with random values so
  // gradients reach upstream blocks; used by gradient checking.
  void randomize_head(Rng& rng);

  Tensor encode_image(const EncodedSample& sample) const;
  Tensor encode_question(const std::vector<std::size_t>& token_ids) const;
  Tensor cman_fuse(const Tensor& f_i, const Tensor& f_q) const;
  Tensor baseline_fuse(const Tensor& f_i, const Tensor& f_q,
                       FusionKind kind) const;
  Tensor fuse(const Tensor& f_i, const Tensor& f_q) const;
  Tensor answer_query_decode(const Tensor& fused) const;
  // Per-class probabilities from refined answer embeddings (decoder head).
  Tensor decoder_head_probs(const Tensor& a_last) const;
  // Pooled-linear classifier probabilities (head_kind = linear).
  Tensor linear_head_probs(const Tensor& fused) const;

  // Full pipeline to the C per-class probabilities.
  Tensor forward_probs(const EncodedSample& sample) const;
  // Probabilities plus asymmetric loss against the sample's answer class.
  std::pair<Prediction, Tensor> forward(const EncodedSample& sample) const;
  // Evaluation-only forward (no graph construction).
  Prediction predict(const EncodedSample& sample) const;

  Tensor loss_from_probs(const Tensor& probs, std::size_t answer_class) const;

 private:
  ModelConfig cfg_;

  Linear image_proj_;        // W_i, b_i
  Tensor image_pos_;
  Tensor token_embed_;
  Tensor token_pos_;
  EncoderLayer question_layer_;

  std::vector<EncoderLayer> fusion_layers_;  // cman
  LayerNormParams fusion_norm_;  // final norm of the pre-norm fusion stack
  Linear fusion_out_;            // W_f, b_f
  Linear baseline_proj_;                     // sum/mul fusion

  Tensor answer_embed_;      // A, C x D_a
  bool has_memory_proj_ = false;
  Linear memory_proj_;       // D_f -> D_a when the dims differ
  std::vector<DecoderLayer> decoder_layers_;
  Linear head_;              // W_A (D_a x 1 shared, or used per class), b
  Tensor per_class_head_w_;  // C x D_a when per_class_head
  bool has_aux_head_ = false;
  Linear aux_head_;          // train-time deep supervision, D_f -> C
  Linear linear_head_;       // pooled classifier, D_f -> C
};

}  // namespace q2a
