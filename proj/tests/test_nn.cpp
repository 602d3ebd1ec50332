#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "q2a/nn.hpp"

using namespace q2a;

namespace {

// Brute-force scaled dot-product attention for one head over plain arrays.
// q: n x d, k/v: m x d. Returns n x d.
std::vector<double> naive_attention(const std::vector<double>& q,
                                    const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t n,
                                    std::size_t m, std::size_t d) {
  std::vector<double> out(n * d, 0.0);
  double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> score(m, 0.0);
    double mx = -1e300;
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t t = 0; t < d; ++t) score[j] += q[i * d + t] * k[j * d + t];
      score[j] *= inv;
      mx = std::max(mx, score[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      score[j] = std::exp(score[j] - mx);
      z += score[j];
    }
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < d; ++t) out[i * d + t] += score[j] / z * v[j * d + t];
  }
  return out;
}

void set_identity(Linear& lin) {
  REQUIRE(lin.weight.rows() == lin.weight.cols());
  for (std::size_t i = 0; i < lin.weight.rows(); ++i)
    for (std::size_t j = 0; j < lin.weight.cols(); ++j)
      lin.weight.at(i, j) = (i == j) ? 1.0 : 0.0;
  for (std::size_t j = 0; j < lin.bias.cols(); ++j) lin.bias.at(0, j) = 0.0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("Linear forward is x W + b") {
  Rng rng(1);
  Linear lin = Linear::init(3, 2, rng);
  Tensor x = Tensor::from_rows({{1.0, -2.0, 0.5}});
  Tensor y = lin.forward(x);
  for (std::size_t j = 0; j < 2; ++j) {
    double ref = lin.bias.at(0, j);
    for (std::size_t i = 0; i < 3; ++i) ref += x.at(0, i) * lin.weight.at(i, j);
    CHECK(y.at(0, j) == doctest::Approx(ref).epsilon(1e-12));
  }
  Linear z = Linear::zeros(3, 2);
  Tensor y0 = z.forward(x);
  CHECK(y0.at(0, 0) == 0.0);
  CHECK(y0.at(0, 1) == 0.0);
}

TEST_CASE("single-head identity-projection attention matches the brute-force oracle") {
  // With identity q/k/v/out projections and one head, MHA reduces to plain
  // scaled dot-product attention, which we recompute independently.
  AttentionConfig cfg{.model_dim = 6, .num_heads = 1};
  Rng rng(2);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  set_identity(mha.q_proj);
  set_identity(mha.k_proj);
  set_identity(mha.v_proj);
  set_identity(mha.out_proj);

  Tensor q = Tensor::randn(4, 6, rng, 1.0);
  Tensor kv = Tensor::randn(5, 6, rng, 1.0);
  Tensor out = mha.forward(q, kv, kv);
  auto ref = naive_attention(q.data(), kv.data(), kv.data(), 4, 5, 6);
  REQUIRE(out.rows() == 4);
  REQUIRE(out.cols() == 6);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("multi-head identity-projection attention is per-head brute-force attention") {
  AttentionConfig cfg{.model_dim = 8, .num_heads = 2};
  Rng rng(3);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  set_identity(mha.q_proj);
  set_identity(mha.k_proj);
  set_identity(mha.v_proj);
  set_identity(mha.out_proj);

  Tensor q = Tensor::randn(3, 8, rng, 1.0);
  Tensor kv = Tensor::randn(4, 8, rng, 1.0);
  Tensor out = mha.forward(q, kv, kv);

  std::size_t d = cfg.head_dim();
  for (std::size_t h = 0; h < 2; ++h) {
    std::vector<double> qh(3 * d), kh(4 * d), vh(4 * d);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < d; ++t) qh[i * d + t] = q.at(i, h * d + t);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t t = 0; t < d; ++t) {
        kh[i * d + t] = kv.at(i, h * d + t);
        vh[i * d + t] = kv.at(i, h * d + t);
      }
    auto ref = naive_attention(qh, kh, vh, 3, 4, d);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < d; ++t)
        CHECK(out.at(i, h * d + t) == doctest::Approx(ref[i * d + t]).epsilon(1e-10));
  }
}

TEST_CASE("attention over a single key returns that value row") {
  AttentionConfig cfg{.model_dim = 4, .num_heads = 2};
  Rng rng(4);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  set_identity(mha.q_proj);
  set_identity(mha.k_proj);
  set_identity(mha.v_proj);
  set_identity(mha.out_proj);
  Tensor q = Tensor::randn(3, 4, rng, 1.0);
  Tensor kv = Tensor::randn(1, 4, rng, 1.0);
  Tensor out = mha.forward(q, kv, kv);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(out.at(i, j) == doctest::Approx(kv.at(0, j)).epsilon(1e-12));
}

TEST_CASE("uniform keys make attention output the mean of the values") {
  AttentionConfig cfg{.model_dim = 4, .num_heads = 1};
  Rng rng(5);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  set_identity(mha.q_proj);
  set_identity(mha.k_proj);
  set_identity(mha.v_proj);
  set_identity(mha.out_proj);
  Tensor q = Tensor::randn(2, 4, rng, 1.0);
  Tensor k(3, 4, 0.0);  // all keys identical -> uniform softmax
  Tensor v = Tensor::randn(3, 4, rng, 1.0);
  Tensor out = mha.forward(q, k, v);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
    CHECK(out.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
    CHECK(out.at(1, j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attention output rows stay inside the convex hull of the value rows") {
  AttentionConfig cfg{.model_dim = 6, .num_heads = 3};
  Rng rng(6);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  set_identity(mha.q_proj);
  set_identity(mha.k_proj);
  set_identity(mha.v_proj);
  set_identity(mha.out_proj);
  Tensor q = Tensor::randn(5, 6, rng, 2.0);
  Tensor kv = Tensor::randn(7, 6, rng, 2.0);
  Tensor out = mha.forward(q, kv, kv);
  for (std::size_t j = 0; j < 6; ++j) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < 7; ++i) {
      lo = std::min(lo, kv.at(i, j));
      hi = std::max(hi, kv.at(i, j));
    }
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(out.at(i, j) >= lo - 1e-12);
      CHECK(out.at(i, j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("attention config validation rejects indivisible head counts") {
  AttentionConfig bad{.model_dim = 10, .num_heads = 3};
  CHECK_THROWS(bad.validate());
  AttentionConfig ok{.model_dim = 12, .num_heads = 3};
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("attention throws when key and value row counts differ") {
  AttentionConfig cfg{.model_dim = 4, .num_heads = 1};
  Rng rng(7);
  MultiHeadAttention mha = MultiHeadAttention::init(cfg, rng);
  Tensor q = Tensor::randn(2, 4, rng, 1.0);
  Tensor k = Tensor::randn(3, 4, rng, 1.0);
  Tensor v = Tensor::randn(4, 4, rng, 1.0);
  CHECK_THROWS(mha.forward(q, k, v));
}

TEST_CASE("feed-forward with zero weights is the bias path") {
  FeedForward ff;
  ff.fc1 = Linear::zeros(3, 6);
  ff.fc2 = Linear::zeros(6, 3);
  ff.fc2.bias.at(0, 1) = 7.0;
  Tensor x = Tensor::from_rows({{1.0, 2.0, 3.0}, {-1.0, 0.0, 4.0}});
  Tensor y = ff.forward(x);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(y.at(i, 0) == 0.0);
    CHECK(y.at(i, 1) == 7.0);
    CHECK(y.at(i, 2) == 0.0);
  }
}

TEST_CASE("relu feed-forward with identity weights recovers relu(x) for hand input") {
  FeedForward ff;
  ff.fc1 = Linear::zeros(2, 2);
  ff.fc2 = Linear::zeros(2, 2);
  ff.act = Activation::Relu;
  ff.fc1.weight.at(0, 0) = 1.0;
  ff.fc1.weight.at(1, 1) = 1.0;
  ff.fc2.weight.at(0, 0) = 1.0;
  ff.fc2.weight.at(1, 1) = 1.0;
  Tensor x = Tensor::from_rows({{-3.0, 2.5}});
  Tensor y = ff.forward(x);
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(0, 1) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("encoder layer preserves shape and is permutation-equivariant") {
  AttentionConfig cfg{.model_dim = 8, .num_heads = 2};
  Rng rng(8);
  EncoderLayer layer = EncoderLayer::init(cfg, 2, rng);
  Tensor x = Tensor::randn(5, 8, rng, 1.0);
  Tensor y = layer.forward(x);
  REQUIRE(y.rows() == 5);
  REQUIRE(y.cols() == 8);

  // Self-attention has no positional structure of its own, so permuting the
  // input rows must permute the output rows identically.
  std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  Tensor xp(5, 8);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) xp.at(i, j) = x.at(perm[i], j);
  Tensor yp = layer.forward(xp);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(yp.at(i, j) == doctest::Approx(y.at(perm[i], j)).epsilon(1e-9));
}

TEST_CASE("decoder layer shapes and memory-permutation invariance") {
  AttentionConfig cfg{.model_dim = 8, .num_heads = 2};
  Rng rng(9);
  DecoderLayer layer = DecoderLayer::init(cfg, 2, rng);
  Tensor a = Tensor::randn(4, 8, rng, 1.0);
  Tensor mem = Tensor::randn(6, 8, rng, 1.0);
  Tensor y = layer.forward(a, mem);
  REQUIRE(y.rows() == 4);
  REQUIRE(y.cols() == 8);

  // Cross-attention aggregates memory rows through a softmax, so reordering
  // the memory rows must not change the output.
  std::vector<std::size_t> perm = {5, 2, 0, 4, 1, 3};
  Tensor memp(6, 8);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j) memp.at(i, j) = mem.at(perm[i], j);
  Tensor yp = layer.forward(a, memp);
  CHECK(max_abs_diff(y, yp) < 1e-10);
}

TEST_CASE("plain decoder path drops residuals: zero FFN output means zero layer output") {
  AttentionConfig cfg{.model_dim = 4, .num_heads = 1};
  Rng rng(10);
  DecoderLayer layer = DecoderLayer::init(cfg, 2, rng);
  layer.ffn.fc2 = Linear::zeros(2 * 4, 4);
  Tensor a = Tensor::randn(3, 4, rng, 1.0);
  Tensor mem = Tensor::randn(5, 4, rng, 1.0);
  Tensor plain = layer.forward(a, mem, /*plain_eq2=*/true);
  for (double v : plain.data()) CHECK(v == 0.0);
  // The residual path keeps the input contribution alive.
  Tensor res = layer.forward(a, mem, /*plain_eq2=*/false);
  double nonzero = 0.0;
  for (double v : res.data()) nonzero += std::abs(v);
  CHECK(nonzero > 0.0);
}

TEST_CASE("collect enumerates uniquely named parameters") {
  AttentionConfig cfg{.model_dim = 8, .num_heads = 2};
  Rng rng(11);
  DecoderLayer layer = DecoderLayer::init(cfg, 2, rng);
  ParameterList params;
  layer.collect("dec", params);
  // 2 attention blocks x 4 linears x 2 tensors + ffn 2x2 + 3 norms x 2.
  CHECK(params.size() == 26);
  std::vector<std::string> names;
  for (auto& p : params) {
    CHECK(p.name.rfind("dec.", 0) == 0);
    names.push_back(p.name);
  }
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}
