#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "stnat/grad_check.hpp"
#include "stnat/layers.hpp"

using namespace stnat;
using testutil::random_tensor;

namespace {

Tensor<double> identity(std::size_t n) {
  Tensor<double> eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
  return eye;
}

}  // namespace

TEST_CASE("attention acts as lookup when one key matches strongly") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  const double big = 40.0;
  Tensor<double> k({3, 4}, {big, 0, 0, 0, 0, big, 0, 0, 0, 0, big, 0});
  Tensor<double> v({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor<double> q({1, 4}, {big, 0, 0, 0});  // matches key 0
  const auto out = self_attention(ctx, q, k, v);
  CHECK_THAT(out.v()[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
  CHECK_THAT(out.v()[1], Catch::Matchers::WithinAbs(2.0, 1e-6));
}

TEST_CASE("equal scores average the value rows") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  Tensor<double> k({3, 2}, {1, 0, 0, 1, -1, 0});
  Tensor<double> v({3, 2}, {0, 0, 3, 3, 6, 0});
  Tensor<double> q({1, 2}, {0, 0});  // orthogonal to everything
  const auto out = self_attention(ctx, q, k, v);
  CHECK_THAT(out.v()[0], Catch::Matchers::WithinAbs(3.0, 1e-12));
  CHECK_THAT(out.v()[1], Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("singleton attention returns the value row exactly") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  Rng rng(2);
  auto q = random_tensor<double>({1, 4}, rng);
  auto k = random_tensor<double>({1, 4}, rng);
  auto v = random_tensor<double>({1, 3}, rng);
  const auto out = self_attention(ctx, q, k, v);
  CHECK(out.v() == v.v());
}

TEST_CASE("attention shape checks") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  Rng rng(3);
  auto q = random_tensor<double>({2, 4}, rng);
  auto k = random_tensor<double>({3, 5}, rng);
  auto v = random_tensor<double>({3, 4}, rng);
  CHECK_THROWS_AS(self_attention(ctx, q, k, v), ShapeError);
  auto k2 = random_tensor<double>({3, 4}, rng);
  auto v2 = random_tensor<double>({2, 4}, rng);
  CHECK_THROWS_AS(self_attention(ctx, q, k2, v2), ShapeError);
}

TEST_CASE("multi_head with identity projections and one head reduces to "
          "self_attention") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  Rng rng(5);
  AttentionParams<double> p;
  p.n_heads = 1;
  p.wq = identity(6);
  p.wk = identity(6);
  p.wv = identity(6);
  p.wo = identity(6);
  auto x = random_tensor<double>({4, 6}, rng);
  const auto via_mh = multi_head(ctx, x, x, p);
  const auto direct = self_attention(ctx, x, x, x);
  CHECK(via_mh.v() == direct.v());
}

TEST_CASE("multi_head output keeps the query-side shape") {
  Rng rng(7);
  for (std::size_t n_h : {1u, 2u, 4u, 8u}) {
    Graph<double> g;
    RunCtx<double> ctx{g};
    auto p = AttentionParams<double>::init(16, n_h, rng);
    auto x_q = random_tensor<double>({5, 16}, rng);
    auto x_kv = random_tensor<double>({9, 16}, rng);
    const auto out = multi_head(ctx, x_q, x_kv, p);
    CHECK(out.shape() == Shape{5, 16});
  }
  CHECK_THROWS_AS(AttentionParams<double>::init(16, 3, rng), UsageError);
}

TEST_CASE("permuting key/value rows together leaves multi_head unchanged") {
  Rng rng(11);
  auto p = AttentionParams<double>::init(16, 4, rng);
  auto x_q = random_tensor<double>({4, 16}, rng);
  auto x_kv = random_tensor<double>({6, 16}, rng);
  Graph<double> g;
  RunCtx<double> ctx{g};
  const auto base = multi_head(ctx, x_q, x_kv, p);

  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> shuffled({6, 16});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      shuffled.at(i, j) = x_kv.at(perm[i], j);
  const auto permuted = multi_head(ctx, x_q, shuffled, p);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK_THAT(permuted.v()[i], Catch::Matchers::WithinAbs(base.v()[i], 1e-9));
}

TEST_CASE("attention rows stay inside the value envelope") {
  Rng rng(13);
  Graph<double> g;
  RunCtx<double> ctx{g};
  auto q = random_tensor<double>({5, 8}, rng, 2.0);
  auto k = random_tensor<double>({7, 8}, rng, 2.0);
  auto v = random_tensor<double>({7, 3}, rng, 2.0);
  const auto out = self_attention(ctx, q, k, v);
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = v.at(0, c), hi = v.at(0, c);
    for (std::size_t r = 1; r < 7; ++r) {
      lo = std::min(lo, v.at(r, c));
      hi = std::max(hi, v.at(r, c));
    }
    for (std::size_t r = 0; r < 5; ++r) {
      CHECK(out.at(r, c) >= lo - 1e-12);
      CHECK(out.at(r, c) <= hi + 1e-12);
    }
  }
}

TEST_CASE("key padding mask equals truncated attention") {
  Rng rng(17);
  Graph<double> g;
  RunCtx<double> ctx{g};
  auto q = random_tensor<double>({3, 4}, rng);
  auto k = random_tensor<double>({6, 4}, rng);
  auto v = random_tensor<double>({6, 4}, rng);
  const BoolGrid mask = BoolGrid::key_padding(3, 6, 4);
  const auto masked = self_attention(ctx, q, k, v, &mask);

  auto k4 = gather_rows(g, k, {0, 1, 2, 3});
  auto v4 = gather_rows(g, v, {0, 1, 2, 3});
  const auto truncated = self_attention(ctx, q, k4, v4);
  for (std::size_t i = 0; i < masked.size(); ++i)
    CHECK_THAT(masked.v()[i],
               Catch::Matchers::WithinAbs(truncated.v()[i], 1e-12));
}

TEST_CASE("ffn constants, shape, gradient") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  FfnParams<double> p;
  p.w1 = Tensor<double>({4, 12});
  p.b1 = Tensor<double>({12});
  p.w2 = Tensor<double>({6, 4});
  p.b2 = Tensor<double>({4}, {1.5, -2.0, 0.0, 3.25});
  Rng rng(19);
  auto x = random_tensor<double>({3, 4}, rng);
  const auto out = ffn(ctx, x, p);
  CHECK(out.shape() == Shape{3, 4});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK_THAT(out.at(r, c), Catch::Matchers::WithinAbs(p.b2.v()[c], 1e-12));

  auto real = FfnParams<double>::init(16, 8, rng);
  const double err = grad_check(
      [&real](Graph<double>& gg, std::vector<Tensor<double>>& in) {
        RunCtx<double> c{gg};
        return sum_all(gg, ffn(c, in[0], real));
      },
      {random_tensor<double>({3, 16}, rng)});
  CHECK(err < 1e-5);
}

TEST_CASE("positional embedding values") {
  const auto pe = positional_embedding<double>(40, 16);
  // position 0 alternates sin 0 = 0, cos 0 = 1
  for (std::size_t j = 0; j < 16; j += 2) {
    CHECK(pe.at(0, j) == 0.0);
    CHECK(pe.at(0, j + 1) == 1.0);
  }
  for (double v : pe.v()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  // direct recomputation of row t, pair k
  for (std::size_t t : {1u, 7u, 39u})
    for (std::size_t k = 0; k < 8; ++k) {
      const double angle = t / std::pow(10000.0, 2.0 * k / 16.0);
      CHECK_THAT(pe.at(t, 2 * k),
                 Catch::Matchers::WithinAbs(std::sin(angle), 1e-12));
      CHECK_THAT(pe.at(t, 2 * k + 1),
                 Catch::Matchers::WithinAbs(std::cos(angle), 1e-12));
    }
}

TEST_CASE("conv front end lengths and zero-input behaviour") {
  Rng rng(23);
  auto p = FrontEndParams<double>::init(8, 6, rng);
  {
    Graph<double> g;
    RunCtx<double> ctx{g};
    CHECK(conv_front_end(ctx, Tensor<double>({16, 8}), p).rows() == 4);
    CHECK(conv_front_end(ctx, Tensor<double>({17, 8}), p).rows() == 5);
  }
  {
    // zero input and zero biases leave only the positional embedding
    auto zero_bias = p;
    zero_bias.conv1_b = Tensor<double>({6}, true);
    zero_bias.conv2_b = Tensor<double>({6}, true);
    Graph<double> g;
    RunCtx<double> ctx{g};
    const auto out = conv_front_end(ctx, Tensor<double>({12, 8}), zero_bias);
    const auto pe = positional_embedding<double>(3, 6);
    CHECK(out.v() == pe.v());
  }
  // length law over T = 1..100
  for (std::size_t T = 1; T <= 100; ++T) {
    const std::size_t once = (T + 1) / 2;
    const std::size_t expect = (once + 1) / 2;
    CHECK(front_end_out_len(T) == expect);
  }
  // and the actual tensors agree with the law
  for (std::size_t T : {1u, 2u, 3u, 5u, 31u, 64u}) {
    Graph<double> g;
    RunCtx<double> ctx{g};
    CHECK(conv_front_end(ctx, Tensor<double>({T, 8}), p).rows() ==
          front_end_out_len(T));
  }
}

TEST_CASE("conv front end gradient through both layers") {
  Rng rng(29);
  auto p = FrontEndParams<double>::init(4, 6, rng);
  const double err = grad_check(
      [&p](Graph<double>& g, std::vector<Tensor<double>>& in) {
        RunCtx<double> ctx{g};
        return sum_all(g, conv_front_end(ctx, in[0], p));
      },
      {random_tensor<double>({9, 4}, rng)});
  CHECK(err < 1e-5);
}

TEST_CASE("full encoder block gradient") {
  Rng rng(31);
  auto block = BlockParams<double>::init(16, 4, 8, false, rng);
  std::vector<Tensor<double>> inputs{
      random_tensor<double>({5, 16}, rng), block.self_attn.wq,
      block.self_attn.wk, block.self_attn.wv, block.self_attn.wo,
      block.ln_self.gain, block.ln_self.bias, block.ffn.w1, block.ffn.b1,
      block.ffn.w2, block.ffn.b2, block.ln_ffn.gain, block.ln_ffn.bias};
  const double err = grad_check(
      [&block](Graph<double>& g, std::vector<Tensor<double>>& in) {
        RunCtx<double> ctx{g};
        Tensor<double> w(Shape{5, 16});
        for (std::size_t i = 0; i < w.size(); ++i)
          w.v()[i] = 0.01 * static_cast<double>(i % 11) - 0.05;
        return sum_all(g, mul(g, encoder_block(ctx, in[0], block), w));
      },
      inputs);
  CHECK(err < 1e-5);
}

TEST_CASE("decoder block captures near-one-hot source attention") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  BlockParams<double> block;
  block.self_attn.n_heads = 1;
  block.self_attn.wq = identity(4);
  block.self_attn.wk = identity(4);
  block.self_attn.wv = identity(4);
  block.self_attn.wo = identity(4);
  block.ln_self = LayerNormParams<double>::init(4);
  AttentionParams<double> src;
  src.n_heads = 1;
  src.wq = identity(4);
  src.wk = identity(4);
  src.wv = identity(4);
  src.wo = identity(4);
  block.src_attn = src;
  block.ln_src = LayerNormParams<double>::init(4);
  Rng ffn_rng(1);
  block.ffn = FfnParams<double>::init(4, 4, ffn_rng);
  block.ln_ffn = LayerNormParams<double>::init(4);

  // Orthogonal, strongly scaled encoder rows; decoder inputs match rows 2, 0.
  const double big = 50.0;
  Tensor<double> enc({4, 4});
  for (std::size_t i = 0; i < 4; ++i) enc.at(i, i) = big;
  Tensor<double> x({2, 4});
  x.at(0, 2) = big;
  x.at(1, 0) = big;

  std::vector<Tensor<double>> captured;
  decoder_block(ctx, x, enc, block, nullptr, nullptr, &captured);
  REQUIRE(captured.size() == 1);
  const auto& w = captured[0];
  CHECK(w.shape() == Shape{2, 4});
  // row sums are 1 and the argmax matches the construction
  for (std::size_t r = 0; r < 2; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 4; ++c) sum += w.at(r, c);
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
  CHECK(w.at(0, 2) > 0.9);
  CHECK(w.at(1, 0) > 0.9);
}
