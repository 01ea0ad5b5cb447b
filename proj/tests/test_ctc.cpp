#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "stnat/ctc.hpp"
#include "stnat/grad_check.hpp"

using namespace stnat;
using testutil::random_tensor;

namespace {

template <class Real>
PosteriorGrid<Real> random_grid(std::size_t T, std::size_t C, Rng& rng) {
  Graph<Real> g;
  g.recording = false;
  return PosteriorGrid<Real>{
      log_softmax(g, random_tensor<Real>({T, C}, rng, 2.0))};
}

}  // namespace

TEST_CASE("ctc_head uniform rows under zero weights and normalization") {
  Graph<double> g;
  RunCtx<double> ctx{g};
  const std::size_t V = 5;
  Tensor<double> w({4, V + 1});
  Tensor<double> b({V + 1});
  Rng rng(2);
  auto enc = random_tensor<double>({3, 4}, rng);
  const auto grid = ctc_head(ctx, enc, w, b);
  CHECK(grid.frames() == 3);
  CHECK(grid.vocab() == V);
  for (std::size_t t = 0; t < 3; ++t)
    CHECK_THAT(std::exp(grid.blank_logp(t)),
               Catch::Matchers::WithinAbs(1.0 / (V + 1), 1e-12));

  auto wr = random_tensor<double>({4, V + 1}, rng);
  auto br = random_tensor<double>({V + 1}, rng);
  const auto grid2 = ctc_head(ctx, enc, wr, br);
  for (std::size_t t = 0; t < 3; ++t) {
    double sum = 0;
    for (std::size_t c = 0; c <= V; ++c)
      sum += std::exp(grid2.log_probs.at(t, c));
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-5));
  }
}

TEST_CASE("ctc_head gradient") {
  Rng rng(3);
  const double err = grad_check(
      [](Graph<double>& g, std::vector<Tensor<double>>& in) {
        RunCtx<double> ctx{g};
        auto grid = ctc_head(ctx, in[0], in[1], in[2]);
        return ctc_loss(g, grid, {1, 0});
      },
      {random_tensor<double>({4, 6}, rng), random_tensor<double>({6, 4}, rng),
       random_tensor<double>({4}, rng)});
  CHECK(err < 1e-5);
}

TEST_CASE("ctc_loss single-frame single-label path") {
  Rng rng(5);
  auto grid = random_grid<double>(1, 4, rng);
  Graph<double> g;
  const auto loss = ctc_loss(g, grid, {2});
  CHECK_THAT(loss.v()[0],
             Catch::Matchers::WithinAbs(-grid.log_probs.at(0, 3), 1e-12));
}

TEST_CASE("ctc_loss two frames, one label: three alignments") {
  Rng rng(7);
  auto grid = random_grid<double>(2, 3, rng);
  Graph<double> g;
  const auto loss = ctc_loss(g, grid, {0});  // label id 0 -> column 1
  const auto p = [&](std::size_t t, std::size_t c) {
    return std::exp(grid.log_probs.at(t, c));
  };
  // paths aa, a-, -a with '-' the blank
  const double expect =
      -std::log(p(0, 1) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 0) * p(1, 1));
  CHECK_THAT(loss.v()[0], Catch::Matchers::WithinAbs(expect, 1e-10));
}

TEST_CASE("ctc_loss uniform grid equals exhaustive enumeration") {
  const std::size_t V = 3, T = 4;
  Tensor<double> lp({T, V + 1});
  for (auto& v : lp.v()) v = -std::log(static_cast<double>(V + 1));
  PosteriorGrid<double> grid{lp};
  Graph<double> g;
  const auto loss = ctc_loss(g, grid, {1, 2});
  CHECK_THAT(loss.v()[0], Catch::Matchers::WithinAbs(
                              testutil::brute_force_ctc_nll(lp, {1, 2}), 1e-10));
}

TEST_CASE("ctc_loss equals brute force on random small grids") {
  Rng rng(11);
  std::size_t tested = 0;
  while (tested < 60) {
    const std::size_t T = 1 + rng.below(6);
    const std::size_t V = 2 + rng.below(3);  // 2..4
    const std::size_t L = 1 + rng.below(3);
    TokenSequence target;
    for (std::size_t i = 0; i < L; ++i)
      target.push_back(static_cast<TokenId>(rng.below(V)));
    std::size_t repeats = 0;
    for (std::size_t i = 1; i < L; ++i)
      if (target[i] == target[i - 1]) ++repeats;
    auto grid = random_grid<double>(T, V + 1, rng);
    Graph<double> g;
    if (T < L + repeats) {
      CHECK_THROWS_AS(ctc_loss(g, grid, target), CtcInfeasibleError);
      continue;
    }
    const auto loss = ctc_loss(g, grid, target);
    const double oracle = testutil::brute_force_ctc_nll(grid.log_probs, target);
    CHECK_THAT(loss.v()[0], Catch::Matchers::WithinAbs(oracle, 1e-6));
    ++tested;
  }
}

TEST_CASE("ctc_loss gradient matches finite differences") {
  Rng rng(13);
  for (const TokenSequence target :
       {TokenSequence{0}, TokenSequence{1, 0}, TokenSequence{2, 2, 1}}) {
    const double err = grad_check(
        [&target](Graph<double>& g, std::vector<Tensor<double>>& in) {
          PosteriorGrid<double> grid{in[0]};
          return ctc_loss(g, grid, target);
        },
        {random_tensor<double>({6, 4}, rng, 1.5)});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("ctc_loss rejects bad targets") {
  Rng rng(17);
  auto grid = random_grid<double>(2, 4, rng);
  Graph<double> g;
  CHECK_THROWS_AS(ctc_loss(g, grid, {}), UsageError);
  CHECK_THROWS_AS(ctc_loss(g, grid, {0, 0}), CtcInfeasibleError);
  CHECK_THROWS_AS(ctc_loss(g, grid, {7}), Error);  // outside vocabulary
}

TEST_CASE("trigger rule, including the all-blank and threshold cases") {
  {
    Tensor<double> lp({3, 3});
    for (std::size_t t = 0; t < 3; ++t) {
      lp.at(t, 0) = 0.0;  // log 1: always blank
      lp.at(t, 1) = -40;
      lp.at(t, 2) = -40;
    }
    const auto trig = trigger(PosteriorGrid<double>{lp}, 0.3);
    CHECK(trig.positions.empty());
    CHECK(trig.size() == 0);
  }
  {
    // p_blank per frame: 0.9, 0.2, 0.95, 0.1 with beta = 0.3
    Tensor<double> lp({4, 2});
    const double pb[4] = {0.9, 0.2, 0.95, 0.1};
    for (std::size_t t = 0; t < 4; ++t) {
      lp.at(t, 0) = std::log(pb[t]);
      lp.at(t, 1) = std::log(1.0 - pb[t]);
    }
    const auto trig = trigger(PosteriorGrid<double>{lp}, 0.3);
    CHECK(trig.positions == std::vector<std::size_t>{1, 3});
    CHECK(trig.size() == 2);
    CHECK(trig.threshold == 0.3);
  }
  {
    // exact equality at the threshold triggers (the rule is >=)
    Tensor<double> lp({1, 2});
    lp.at(0, 0) = std::log(0.6);
    lp.at(0, 1) = std::log(0.4);
    PosteriorGrid<double> grid{lp};
    const double beta = 1.0 - std::exp(grid.blank_logp(0));
    const auto trig = trigger(grid, beta);
    CHECK(trig.positions == std::vector<std::size_t>{0});
  }
  {
    Rng rng(19);
    auto grid = random_grid<double>(2, 3, rng);
    CHECK_THROWS_AS(trigger(grid, 0.0), UsageError);
    CHECK_THROWS_AS(trigger(grid, 1.0), UsageError);
  }
}

TEST_CASE("trigger equals a naive scan on a large random grid") {
  Rng rng(23);
  auto grid = random_grid<double>(1000, 6, rng);
  const double beta = 0.4;
  const auto trig = trigger(grid, beta);
  std::vector<std::size_t> naive;
  for (std::size_t t = 0; t < 1000; ++t)
    if (1.0 - std::exp(grid.log_probs.at(t, 0)) >= beta) naive.push_back(t);
  CHECK(trig.positions == naive);
}

TEST_CASE("trigger is monotone in beta") {
  Rng rng(29);
  const std::vector<double> grid_betas{0.1, 0.3, 0.5, 0.7};
  for (int rep = 0; rep < 25; ++rep) {
    auto grid = random_grid<double>(40, 5, rng);
    std::size_t prev = static_cast<std::size_t>(-1);
    std::vector<std::size_t> prev_pos;
    bool first = true;
    for (double beta : grid_betas) {
      const auto trig = trigger(grid, beta);
      if (!first) {
        CHECK(trig.size() <= prev);
        // subset: every triggered position also fires at the lower beta
        for (std::size_t p : trig.positions)
          CHECK(std::find(prev_pos.begin(), prev_pos.end(), p) !=
                prev_pos.end());
      }
      prev = trig.size();
      prev_pos = trig.positions;
      first = false;
    }
  }
}

TEST_CASE("gather_triggered selects rows and scatters gradients") {
  Rng rng(31);
  auto enc = random_tensor<double>({5, 3}, rng);
  Graph<double> g;
  {
    TriggerSet empty;
    const auto out = gather_triggered(g, enc, empty);
    CHECK(out.shape() == Shape{0, 3});
  }
  {
    TriggerSet first;
    first.positions = {0};
    const auto out = gather_triggered(g, enc, first);
    CHECK(out.v() == std::vector<double>(enc.v().begin(), enc.v().begin() + 3));
  }
  {
    TriggerSet oob;
    oob.positions = {9};
    CHECK_THROWS_AS(gather_triggered(g, enc, oob), Error);
  }
  {
    // gradient of sum over gathered rows: 1 at triggered rows, 0 elsewhere
    TriggerSet trig;
    trig.positions = {1, 3};
    enc.set_requires_grad(true);
    enc.zero_grad();
    Graph<double> gg;
    gg.backward(sum_all(gg, gather_triggered(gg, enc, trig)));
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(enc.grad()[r * 3 + c] == ((r == 1 || r == 3) ? 1.0 : 0.0));
  }
}

TEST_CASE("ctc greedy path collapses argmax labels") {
  {
    // argmax sequence: blank, a, a, blank, c  ->  [a, c]
    const std::size_t C = 4;
    Tensor<double> lp({5, C});
    for (auto& v : lp.v()) v = -10;
    const std::size_t argmaxes[5] = {0, 1, 1, 0, 3};
    for (std::size_t t = 0; t < 5; ++t) lp.at(t, argmaxes[t]) = -0.1;
    const auto path = ctc_greedy_path(PosteriorGrid<double>{lp});
    CHECK(path == TokenSequence{0, 2});
  }
  {
    Tensor<double> lp({3, 3});
    for (std::size_t t = 0; t < 3; ++t) lp.at(t, 0) = 1.0;  // blank wins
    CHECK(ctc_greedy_path(PosteriorGrid<double>{lp}).empty());
  }
  {
    Rng rng(37);
    for (int rep = 0; rep < 20; ++rep) {
      auto grid = random_grid<double>(12, 5, rng);
      // direct recomputation
      std::vector<std::size_t> argmax(12);
      for (std::size_t t = 0; t < 12; ++t) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 5; ++c)
          if (grid.log_probs.at(t, c) > grid.log_probs.at(t, best)) best = c;
        argmax[t] = best;
      }
      CHECK(ctc_greedy_path(grid) == testutil::ctc_collapse(argmax));
    }
  }
}

TEST_CASE("gather_triggered after trigger yields exactly T' decoder inputs") {
  Rng rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    auto grid = random_grid<double>(30, 4, rng);
    const auto trig = trigger(grid, 0.5);
    Graph<double> g;
    auto enc = random_tensor<double>({30, 8}, rng);
    CHECK(gather_triggered(g, enc, trig).rows() == trig.size());
  }
}
