#include "q2a/model.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace q2a {

std::string fusion_kind_name(FusionKind k) {
  switch (k) {
    case FusionKind::Cman: return "cman";
    case FusionKind::Sum: return "sum";
    case FusionKind::Mul: return "mul";
  }
  return "?";
}

FusionKind fusion_kind_from_name(const std::string& name) {
  if (name == "cman") return FusionKind::Cman;
  if (name == "sum") return FusionKind::Sum;
  if (name == "mul") return FusionKind::Mul;
  throw std::invalid_argument("unknown fusion kind \"" + name + "\"");
}

std::string head_kind_name(HeadKind k) {
  return k == HeadKind::Decoder ? "decoder" : "linear";
}

HeadKind head_kind_from_name(const std::string& name) {
  if (name == "decoder") return HeadKind::Decoder;
  if (name == "linear") return HeadKind::Linear;
  throw std::invalid_argument("unknown head kind \"" + name + "\"");
}

void ModelConfig::validate() const {
  if (feature_dim == 0 || answer_embed_dim == 0 || grid_size == 0 ||
      max_question_tokens == 0 || token_vocab_size == 0 ||
      cell_feature_dim == 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (decoder_layers < 1)
    throw std::invalid_argument("ModelConfig: decoder_layers must be >= 1");
  if (num_answer_classes < 2)
    throw std::invalid_argument("ModelConfig: need at least 2 answer classes");
  if (gamma_plus < 0.0 || gamma_minus < 0.0)
    throw std::invalid_argument("ModelConfig: gamma exponents must be >= 0");
  if (aux_loss_weight < 0.0)
    throw std::invalid_argument("ModelConfig: aux_loss_weight must be >= 0");
  if (feature_dim % num_heads != 0 || answer_embed_dim % num_heads != 0)
    throw std::invalid_argument(
        "ModelConfig: feature_dim and answer_embed_dim must be divisible by "
        "num_heads");
}

// ---- config json ----------------------------------------------------------

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["feature_dim"] = c.feature_dim;
  j["grid_size"] = c.grid_size;
  j["cell_feature_dim"] = c.cell_feature_dim;
  j["max_question_tokens"] = c.max_question_tokens;
  j["token_vocab_size"] = c.token_vocab_size;
  j["num_answer_classes"] = c.num_answer_classes;
  j["answer_embed_dim"] = c.answer_embed_dim;
  j["fusion_layers"] = c.fusion_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["num_heads"] = c.num_heads;
  j["ffn_mult"] = c.ffn_mult;
  j["gamma_plus"] = c.gamma_plus;
  j["gamma_minus"] = c.gamma_minus;
  j["aux_loss_weight"] = c.aux_loss_weight;
  j["fusion_kind"] = fusion_kind_name(c.fusion_kind);
  j["head_kind"] = head_kind_name(c.head_kind);
  j["plain_eq2"] = c.plain_eq2;
  j["per_class_head"] = c.per_class_head;
  j["seed"] = c.seed;
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "feature_dim") c.feature_dim = value;
    else if (key == "grid_size") c.grid_size = value;
    else if (key == "cell_feature_dim") c.cell_feature_dim = value;
    else if (key == "max_question_tokens") c.max_question_tokens = value;
    else if (key == "token_vocab_size") c.token_vocab_size = value;
    else if (key == "num_answer_classes") c.num_answer_classes = value;
    else if (key == "answer_embed_dim") c.answer_embed_dim = value;
    else if (key == "fusion_layers") c.fusion_layers = value;
    else if (key == "decoder_layers") c.decoder_layers = value;
    else if (key == "num_heads") c.num_heads = value;
    else if (key == "ffn_mult") c.ffn_mult = value;
    else if (key == "gamma_plus") c.gamma_plus = value;
    else if (key == "gamma_minus") c.gamma_minus = value;
    else if (key == "aux_loss_weight") c.aux_loss_weight = value;
    else if (key == "fusion_kind")
      c.fusion_kind = fusion_kind_from_name(value.get<std::string>());
    else if (key == "head_kind")
      c.head_kind = head_kind_from_name(value.get<std::string>());
    else if (key == "plain_eq2") c.plain_eq2 = value;
    else if (key == "per_class_head") c.per_class_head = value;
    else if (key == "seed") c.seed = value;
    else
      throw std::invalid_argument("config: unknown key \"" + key + "\"");
  }
  c.validate();
  return c;
}

// ---- prediction -----------------------------------------------------------

Prediction prediction_from_logits(const std::vector<double>& logits) {
  Prediction p;
  p.logits = logits;
  p.probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    p.probs[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  p.chosen_class = 0;
  for (std::size_t i = 1; i < p.probs.size(); ++i)
    if (p.probs[i] > p.probs[p.chosen_class]) p.chosen_class = i;
  return p;
}

// ---- model ----------------------------------------------------------------

Q2AModel::Q2AModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t d = cfg_.feature_dim;
  const std::size_t da = cfg_.answer_embed_dim;
  const double pos_std = 1.0 / std::sqrt(static_cast<double>(d));

  image_proj_ = Linear::init(cfg_.cell_feature_dim, d, rng);
  image_pos_ = Tensor::randn(cfg_.num_image_tokens(), d, rng, pos_std);
  image_pos_.set_requires_grad(true);
  token_embed_ = Tensor::randn(cfg_.token_vocab_size, d, rng, pos_std);
  token_embed_.set_requires_grad(true);
  token_pos_ = Tensor::randn(cfg_.max_question_tokens, d, rng, pos_std);
  token_pos_.set_requires_grad(true);
  const AttentionConfig enc_cfg{d, cfg_.num_heads};
  question_layer_ = EncoderLayer::init(enc_cfg, cfg_.ffn_mult, rng);

  if (cfg_.fusion_kind == FusionKind::Cman) {
    for (std::size_t i = 0; i < cfg_.fusion_layers; ++i)
      fusion_layers_.push_back(EncoderLayer::init(enc_cfg, cfg_.ffn_mult, rng));
    // Pre-norm stacks leave the residual stream unnormalized; without this
    // final norm the decoder's cross-attention sees ever-growing magnitudes.
    fusion_norm_ = LayerNormParams::init(d);
    fusion_out_ = Linear::init(d, d, rng);
  } else {
    baseline_proj_ = Linear::init(d, d, rng);
  }

  if (cfg_.head_kind == HeadKind::Decoder) {
    // Unit-variance entries: the class queries must start well separated or
    // cross-attention treats every class identically and the per-class
    // refinements (and with them the classifier gradients) stay degenerate.
    answer_embed_ = Tensor::randn(cfg_.num_answer_classes, da, rng, 1.0);
    answer_embed_.set_requires_grad(true);
    if (da != d) {
      has_memory_proj_ = true;
      memory_proj_ = Linear::init(d, da, rng);
    }
    const AttentionConfig dec_cfg{da, cfg_.num_heads};
    for (std::size_t i = 0; i < cfg_.decoder_layers; ++i)
      decoder_layers_.push_back(
          DecoderLayer::init(dec_cfg, cfg_.ffn_mult, rng));
    // Classifier starts at zero: an untrained model scores every class 0.5.
    if (cfg_.per_class_head) {
      per_class_head_w_ = Tensor(cfg_.num_answer_classes, da);
      per_class_head_w_.set_requires_grad(true);
      head_ = Linear::zeros(da, 1);
    } else {
      head_ = Linear::zeros(da, 1);
    }
    if (cfg_.aux_loss_weight > 0.0) {
      has_aux_head_ = true;
      aux_head_ = Linear::zeros(d, cfg_.num_answer_classes);
    }
  } else {
    linear_head_ = Linear::zeros(d, cfg_.num_answer_classes);
  }
}

ParameterList Q2AModel::parameters() {
  ParameterList out;
  image_proj_.collect("image.proj", out);
  out.push_back({"image.pos", image_pos_});
  out.push_back({"question.embed", token_embed_});
  out.push_back({"question.pos", token_pos_});
  question_layer_.collect("question.layer", out);
  if (cfg_.fusion_kind == FusionKind::Cman) {
    for (std::size_t i = 0; i < fusion_layers_.size(); ++i)
      fusion_layers_[i].collect("fusion.layer" + std::to_string(i), out);
    fusion_norm_.collect("fusion.norm", out);
    fusion_out_.collect("fusion.out", out);
  } else {
    baseline_proj_.collect("fusion.baseline", out);
  }
  if (cfg_.head_kind == HeadKind::Decoder) {
    out.push_back({"answer.embed", answer_embed_});
    if (has_memory_proj_) memory_proj_.collect("answer.mem_proj", out);
    for (std::size_t i = 0; i < decoder_layers_.size(); ++i)
      decoder_layers_[i].collect("decoder.layer" + std::to_string(i), out);
    if (cfg_.per_class_head)
      out.push_back({"head.per_class_weight", per_class_head_w_});
    else
      out.push_back({"head.weight", head_.weight});
    out.push_back({"head.bias", head_.bias});
    if (has_aux_head_) aux_head_.collect("head.aux", out);
  } else {
    linear_head_.collect("head.linear", out);
  }
  return out;
}

void Q2AModel::zero_grads() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

void Q2AModel::randomize_head(Rng& rng) {
  const double std_a =
      1.0 / std::sqrt(static_cast<double>(cfg_.answer_embed_dim));
  if (cfg_.head_kind == HeadKind::Decoder) {
    if (cfg_.per_class_head)
      for (auto& v : per_class_head_w_.data()) v = std_a * rng.normal();
    else
      for (auto& v : head_.weight.data()) v = std_a * rng.normal();
    for (auto& v : head_.bias.data()) v = 0.1 * rng.normal();
    if (has_aux_head_) {
      const double std_f =
          1.0 / std::sqrt(static_cast<double>(cfg_.feature_dim));
      for (auto& v : aux_head_.weight.data()) v = std_f * rng.normal();
      for (auto& v : aux_head_.bias.data()) v = 0.1 * rng.normal();
    }
  } else {
    const double std_f = 1.0 / std::sqrt(static_cast<double>(cfg_.feature_dim));
    for (auto& v : linear_head_.weight.data()) v = std_f * rng.normal();
    for (auto& v : linear_head_.bias.data()) v = 0.1 * rng.normal();
  }
}

Tensor Q2AModel::encode_image(const EncodedSample& sample) const {
  const std::size_t n = cfg_.num_image_tokens();
  if (sample.num_cells != n)
    throw std::invalid_argument(
        "encode_image: expected " + std::to_string(n) + " cells, got " +
        std::to_string(sample.num_cells));
  if (sample.image_features.size() != n * cfg_.cell_feature_dim)
    throw std::invalid_argument("encode_image: cell feature width mismatch");
  Tensor x(n, cfg_.cell_feature_dim, sample.image_features);
  return add(image_proj_.forward(x), image_pos_);
}

Tensor Q2AModel::encode_question(
    const std::vector<std::size_t>& token_ids) const {
  if (token_ids.size() != cfg_.max_question_tokens)
    throw std::invalid_argument(
        "encode_question: expected " +
        std::to_string(cfg_.max_question_tokens) + " token ids, got " +
        std::to_string(token_ids.size()));
  for (std::size_t id : token_ids)
    if (id >= cfg_.token_vocab_size)
      throw std::out_of_range("encode_question: token id " +
                              std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg_.token_vocab_size));
  const Tensor rows = embed_rows(token_embed_, token_ids);
  return question_layer_.forward(add(rows, token_pos_));
}

Tensor Q2AModel::cman_fuse(const Tensor& f_i, const Tensor& f_q) const {
  Tensor h = concat_rows(f_i, f_q);
  for (const auto& layer : fusion_layers_) h = layer.forward(h);
  return fusion_out_.forward(fusion_norm_.forward(h));
}

Tensor Q2AModel::baseline_fuse(const Tensor& f_i, const Tensor& f_q,
                               FusionKind kind) const {
  if (kind != FusionKind::Sum && kind != FusionKind::Mul)
    throw std::invalid_argument("baseline_fuse: kind must be sum or mul");
  if (f_i.cols() != f_q.cols())
    throw std::invalid_argument("baseline_fuse: feature dim mismatch: " +
                                f_i.shape_str() + " vs " + f_q.shape_str());
  const std::size_t s = std::min(f_i.rows(), f_q.rows());
  const Tensor a = f_i.rows() == s ? f_i : pool_rows(f_i, s);
  const Tensor b = f_q.rows() == s ? f_q : pool_rows(f_q, s);
  const Tensor merged = kind == FusionKind::Sum ? add(a, b) : mul(a, b);
  return baseline_proj_.forward(merged);
}

Tensor Q2AModel::fuse(const Tensor& f_i, const Tensor& f_q) const {
  if (cfg_.fusion_kind == FusionKind::Cman) return cman_fuse(f_i, f_q);
  return baseline_fuse(f_i, f_q, cfg_.fusion_kind);
}

Tensor Q2AModel::answer_query_decode(const Tensor& fused) const {
  if (cfg_.head_kind != HeadKind::Decoder)
    throw std::logic_error("answer_query_decode: model has a linear head");
  const Tensor memory =
      has_memory_proj_ ? memory_proj_.forward(fused) : fused;
  Tensor a = answer_embed_;
  for (const auto& layer : decoder_layers_)
    a = layer.forward(a, memory, cfg_.plain_eq2);
  return a;
}

Tensor Q2AModel::decoder_head_probs(const Tensor& a_last) const {
  Tensor logits;
  if (cfg_.per_class_head) {
    const Tensor ones(cfg_.answer_embed_dim, 1, 1.0);
    logits = add_row(matmul(mul(a_last, per_class_head_w_), ones), head_.bias);
  } else {
    logits = head_.forward(a_last);  // C x 1
  }
  return sigmoid(logits);
}

Tensor Q2AModel::linear_head_probs(const Tensor& fused) const {
  return sigmoid(linear_head_.forward(mean_rows(fused)));
}

Tensor Q2AModel::forward_probs(const EncodedSample& sample) const {
  const Tensor f_i = encode_image(sample);
  const Tensor f_q = encode_question(sample.token_ids);
  const Tensor fused = fuse(f_i, f_q);
  if (cfg_.head_kind == HeadKind::Decoder)
    return decoder_head_probs(answer_query_decode(fused));
  return linear_head_probs(fused);
}

Tensor Q2AModel::loss_from_probs(const Tensor& probs,
                                 std::size_t answer_class) const {
  if (answer_class >= cfg_.num_answer_classes)
    throw std::invalid_argument(
        "loss_from_probs: answer class " + std::to_string(answer_class) +
        " outside model vocabulary of " +
        std::to_string(cfg_.num_answer_classes));
  std::vector<int> y(cfg_.num_answer_classes, 0);
  y[answer_class] = 1;
  return asymmetric_loss(probs, y, cfg_.gamma_plus, cfg_.gamma_minus);
}

std::pair<Prediction, Tensor> Q2AModel::forward(
    const EncodedSample& sample) const {
  const Tensor f_i = encode_image(sample);
  const Tensor f_q = encode_question(sample.token_ids);
  const Tensor fused = fuse(f_i, f_q);
  const Tensor probs = cfg_.head_kind == HeadKind::Decoder
                           ? decoder_head_probs(answer_query_decode(fused))
                           : linear_head_probs(fused);
  std::vector<double> logits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    logits[i] = std::log(p / (1.0 - p));
  }
  Prediction pred = prediction_from_logits(logits);
  pred.probs = probs.data();  // exact sigmoid outputs
  pred.chosen_class = 0;
  for (std::size_t i = 1; i < pred.probs.size(); ++i)
    if (pred.probs[i] > pred.probs[pred.chosen_class]) pred.chosen_class = i;
  Tensor loss = loss_from_probs(probs, sample.answer_class);
  if (has_aux_head_) {
    const Tensor aux_probs = sigmoid(aux_head_.forward(mean_rows(fused)));
    loss = add(loss, scale(loss_from_probs(aux_probs, sample.answer_class),
                           cfg_.aux_loss_weight));
  }
  return {pred, loss};
}

Prediction Q2AModel::predict(const EncodedSample& sample) const {
  NoGradGuard ng;
  const Tensor probs = forward_probs(sample);
  Prediction pred;
  pred.probs = probs.data();
  pred.logits.resize(pred.probs.size());
  for (std::size_t i = 0; i < pred.probs.size(); ++i) {
    const double p = pred.probs[i];
    pred.logits[i] = std::log(p / (1.0 - p));
  }
  pred.chosen_class = 0;
  for (std::size_t i = 1; i < pred.probs.size(); ++i)
    if (pred.probs[i] > pred.probs[pred.chosen_class]) pred.chosen_class = i;
  return pred;
}

}  // namespace q2a
