#include "q2a/gradcheck.hpp"

#include <cmath>

#include "q2a/data.hpp"
#include "q2a/model.hpp"
#include "q2a/nn.hpp"

namespace q2a {

namespace {

Tensor weights_like(std::size_t rows, std::size_t cols, Rng& rng) {
  return Tensor::randn(rows, cols, rng, 1.0);
}

// Random entries kept away from zero so relu stays differentiable.
Tensor randn_off_zero(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::randn(rows, cols, rng, 1.0);
  for (auto& v : t.data())
    if (std::abs(v) < 0.15) v = v < 0 ? v - 0.2 : v + 0.2;
  return t;
}

}  // namespace

std::vector<NamedGradCheck> run_gradcheck_suite(double h, double tol) {
  std::vector<NamedGradCheck> out;
  Rng rng(20240601);

  auto check = [&](const std::string& name,
                   const std::function<Tensor(const Tensor&)>& f, Tensor x) {
    out.push_back({name, grad_check(f, std::move(x), h, tol)});
  };

  {
    const Tensor b = weights_like(4, 3, rng);
    check("matmul",
          [&](const Tensor& x) { return sum_all(matmul(x, b)); },
          Tensor::randn(3, 4, rng, 1.0));
  }
  {
    const Tensor w = weights_like(3, 5, rng);
    check("softmax_rows",
          [&](const Tensor& x) { return sum_all(mul(softmax_rows(x), w)); },
          Tensor::randn(3, 5, rng, 1.0));
  }
  {
    const Tensor w = weights_like(5, 4, rng);
    const Tensor b = weights_like(2, 4, rng);
    check("concat_rows",
          [&](const Tensor& x) {
            return sum_all(mul(concat_rows(x, slice_rows(w, 3, 5)),
                               concat_rows(slice_rows(w, 0, 3), b)));
          },
          Tensor::randn(3, 4, rng, 1.0));
  }
  {
    const Tensor gain = weights_like(1, 6, rng);
    const Tensor bias = weights_like(1, 6, rng);
    const Tensor w = weights_like(4, 6, rng);
    check("layer_norm",
          [&](const Tensor& x) {
            return sum_all(mul(layer_norm(x, gain, bias), w));
          },
          Tensor::randn(4, 6, rng, 1.0));
    const Tensor x = Tensor::randn(4, 6, rng, 1.0);
    check("layer_norm_gain",
          [&](const Tensor& g) {
            return sum_all(mul(layer_norm(x, g, bias), w));
          },
          weights_like(1, 6, rng));
  }
  for (auto [kind, name] :
       {std::pair{Activation::Sigmoid, "sigmoid"},
        std::pair{Activation::Relu, "relu"},
        std::pair{Activation::Gelu, "gelu"}}) {
    const Tensor w = weights_like(3, 4, rng);
    const Activation k = kind;
    check(std::string("activation_") + name,
          [&, k](const Tensor& x) {
            return sum_all(mul(activation(x, k), w));
          },
          randn_off_zero(3, 4, rng));
  }
  {
    Rng init(7);
    const MultiHeadAttention attn =
        MultiHeadAttention::init({8, 2}, init);
    const Tensor w = weights_like(3, 8, rng);
    check("multi_head_attention",
          [&](const Tensor& x) {
            return sum_all(mul(attn.forward(x, x, x), w));
          },
          Tensor::randn(3, 8, rng, 1.0));
  }
  {
    Rng init(8);
    const FeedForward ffn = FeedForward::init(6, 2, init);
    const Tensor w = weights_like(3, 6, rng);
    check("feed_forward",
          [&](const Tensor& x) { return sum_all(mul(ffn.forward(x), w)); },
          Tensor::randn(3, 6, rng, 1.0));
  }
  {
    Rng init(9);
    const EncoderLayer layer = EncoderLayer::init({8, 2}, 2, init);
    const Tensor w = weights_like(4, 8, rng);
    check("encoder_layer",
          [&](const Tensor& x) { return sum_all(mul(layer.forward(x), w)); },
          Tensor::randn(4, 8, rng, 1.0));
  }
  {
    Rng init(10);
    const DecoderLayer layer = DecoderLayer::init({8, 2}, 2, init);
    const Tensor memory = Tensor::randn(5, 8, rng, 1.0);
    const Tensor w = weights_like(3, 8, rng);
    check("decoder_layer",
          [&](const Tensor& a) {
            return sum_all(mul(layer.forward(a, memory), w));
          },
          Tensor::randn(3, 8, rng, 1.0));
    const Tensor a0 = Tensor::randn(3, 8, rng, 1.0);
    check("decoder_layer_memory",
          [&](const Tensor& mem) {
            return sum_all(mul(layer.forward(a0, mem), w));
          },
          Tensor::randn(5, 8, rng, 1.0));
  }
  {
    ModelConfig cfg;
    cfg.feature_dim = 8;
    cfg.grid_size = 2;
    cfg.max_question_tokens = 4;
    cfg.num_answer_classes = 11;
    cfg.answer_embed_dim = 12;
    cfg.fusion_layers = 1;
    cfg.decoder_layers = 1;
    cfg.num_heads = 2;
    cfg.ffn_mult = 2;
    cfg.seed = 11;
    const Q2AModel model(cfg);
    const Tensor f_q = Tensor::randn(4, 8, rng, 1.0);
    const Tensor w = weights_like(8, 8, rng);
    check("cman_fusion",
          [&](const Tensor& f_i) {
            return sum_all(mul(model.cman_fuse(f_i, f_q), w));
          },
          Tensor::randn(4, 8, rng, 1.0));
  }
  {
    const std::vector<int> y = {0, 1, 0, 0, 0};
    check("asymmetric_loss",
          [&](const Tensor& logits) {
            return asymmetric_loss(sigmoid(logits), y, 1.0, 4.0);
          },
          Tensor::randn(1, 5, rng, 1.0));
  }
  {
    // Full model at tiny dims, checked through a parameter tensor.
    ModelConfig cfg;
    cfg.feature_dim = 8;
    cfg.grid_size = 2;
    cfg.max_question_tokens = 4;
    cfg.num_answer_classes = 7;
    cfg.answer_embed_dim = 12;
    cfg.fusion_layers = 1;
    cfg.decoder_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_mult = 2;
    cfg.seed = 12;
    Q2AModel model(cfg);
    Rng head_rng(13);
    model.randomize_head(head_rng);

    Dataset tiny = generate_dataset(4, 2, 99);
    TokenVocabulary tv;
    EncodedSample sample = encode_sample(tiny.samples[0], tv, 4);
    sample.answer_class = sample.answer_class % cfg.num_answer_classes;

    auto model_loss = [&](const Tensor&) {
      model.zero_grads();
      auto [pred, loss] = model.forward(sample);
      return loss;
    };
    for (const char* pname :
         {"answer.embed", "image.proj.weight", "question.embed",
          "decoder.layer0.cross_attn.q.weight", "head.weight"}) {
      Tensor target;
      for (auto& p : model.parameters())
        if (p.name == pname) target = p.tensor;
      check(std::string("full_model/") + pname, model_loss, target);
    }
  }
  return out;
}

bool all_pass(const std::vector<NamedGradCheck>& checks) {
  for (const auto& c : checks)
    if (!c.report.pass) return false;
  return true;
}

}  // namespace q2a
