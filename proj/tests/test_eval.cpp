#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "helpers.hpp"
#include "stnat/eval.hpp"

using namespace stnat;
using testutil::random_tensor;

TEST_CASE("cer textbook cases") {
  CHECK(cer({0, 1, 2}, {0, 1, 2}).distance == 0);
  CHECK(cer({0, 1, 2}, {0, 1, 2}).rate == 0.0);

  const auto empty_hyp = cer({}, {4, 5, 6, 7});
  CHECK(empty_hyp.distance == 4);
  CHECK(empty_hyp.deletions == 4);
  CHECK(empty_hyp.rate == 1.0);

  const auto sub = cer({0, 9, 2}, {0, 1, 2});
  CHECK(sub.distance == 1);
  CHECK(sub.substitutions == 1);
  CHECK(sub.deletions == 0);
  CHECK(sub.insertions == 0);

  CHECK_THROWS_AS(cer({0}, {}), ContractError);
}

TEST_CASE("cer S+D+I decomposition always sums to the distance") {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    TokenSequence h, r;
    const std::size_t lh = rng.below(8), lr = 1 + rng.below(8);
    for (std::size_t i = 0; i < lh; ++i)
      h.push_back(static_cast<TokenId>(rng.below(3)));
    for (std::size_t i = 0; i < lr; ++i)
      r.push_back(static_cast<TokenId>(rng.below(3)));
    const auto c = cer(h, r);
    CHECK(c.substitutions + c.deletions + c.insertions == c.distance);
  }
}

TEST_CASE("cer distance is symmetric and satisfies the triangle inequality") {
  Rng rng(5);
  for (int rep = 0; rep < 40; ++rep) {
    TokenSequence a, b, c;
    for (std::size_t i = 0; i < 1 + rng.below(7); ++i)
      a.push_back(static_cast<TokenId>(rng.below(4)));
    for (std::size_t i = 0; i < 1 + rng.below(7); ++i)
      b.push_back(static_cast<TokenId>(rng.below(4)));
    for (std::size_t i = 0; i < 1 + rng.below(7); ++i)
      c.push_back(static_cast<TokenId>(rng.below(4)));
    CHECK(cer(a, b).distance == cer(b, a).distance);
    CHECK(cer(a, c).distance <= cer(a, b).distance + cer(b, c).distance);
  }
}

TEST_CASE("length histogram bins and miss fraction") {
  {
    const auto h = length_histogram({{4, 4}, {7, 7}, {2, 2}});
    CHECK(h.bins.size() == 1);
    CHECK(h.bins.at(0) == 3);
    CHECK(h.miss_fraction == 0.0);
    CHECK(h.exact == 3);
  }
  {
    const auto h = length_histogram({{5, 4}, {5, 5}, {5, 7}});
    CHECK(h.bins.at(1) == 1);
    CHECK(h.bins.at(0) == 1);
    CHECK(h.bins.at(-2) == 1);
    CHECK_THAT(h.miss_fraction, Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
  }
  {
    // brute-force recount on random pairs
    Rng rng(7);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (int i = 0; i < 200; ++i)
      pairs.emplace_back(1 + rng.below(10), rng.below(12));
    const auto h = length_histogram(pairs);
    std::size_t total = 0;
    for (const auto& [diff, count] : h.bins) {
      std::size_t recount = 0;
      for (const auto& [t, tp] : pairs)
        if (static_cast<long long>(t) - static_cast<long long>(tp) == diff)
          ++recount;
      CHECK(count == recount);
      total += count;
    }
    CHECK(total == pairs.size());
    // miss fraction == 1 - fraction(T' >= T), exactly
    std::size_t covered = 0;
    for (const auto& [t, tp] : pairs)
      if (tp >= t) ++covered;
    CHECK_THAT(h.miss_fraction,
               Catch::Matchers::WithinAbs(
                   1.0 - static_cast<double>(covered) / pairs.size(), 1e-12));
  }
}

TEST_CASE("rtf report totals and order invariance") {
  DecodeLedger ledger;
  ledger.rows = {{"a", 40.0, 0.8}, {"b", 60.0, 1.2}};
  const auto r = rtf(ledger);
  CHECK_THAT(r.rtf, Catch::Matchers::WithinAbs(0.02, 1e-12));
  CHECK_THAT(r.total_decode_seconds, Catch::Matchers::WithinAbs(2.0, 1e-12));
  CHECK_THAT(r.total_audio_seconds, Catch::Matchers::WithinAbs(100.0, 1e-12));

  std::reverse(ledger.rows.begin(), ledger.rows.end());
  const auto r2 = rtf(ledger);
  CHECK(r2.rtf == r.rtf);

  DecodeLedger empty;
  CHECK_THROWS_AS(rtf(empty), UsageError);
}

TEST_CASE("spike/boundary classification on a constructed utterance") {
  // three characters: [0,8), [12,20), [30,38); gaps [8,12) len 4 and
  // [20,30) len 10; 40 feature frames = 10 encoder frames
  const std::vector<Boundary> bounds{{0, 8}, {12, 20}, {30, 38}};
  TriggerSet trig;
  trig.positions = {1, 3, 8, 6, 2};
  // frame 1 -> [4,8) inside char 0; frame 3 -> [12,16) inside char 1;
  // frame 8 -> [32,36) inside char 2; frame 6 -> [24,28) inside the long
  // gap; frame 2 -> [8,12) exactly the short gap
  const auto rep = spike_boundary_report(trig, bounds, 40);
  REQUIRE(rep.spikes.size() == 5);
  CHECK(rep.spikes[0].token_index == 0);
  CHECK(rep.spikes[1].token_index == 1);
  CHECK(rep.spikes[2].token_index == 2);
  CHECK(rep.spikes[3].token_index == -1);
  CHECK(rep.spikes[3].in_long_silence);  // gap of 10 > 4
  CHECK(rep.spikes[4].token_index == -1);
  CHECK_FALSE(rep.spikes[4].in_long_silence);  // gap of 4 is not "long"
  CHECK(rep.n_inside == 3);
  CHECK_THAT(rep.inside_fraction, Catch::Matchers::WithinAbs(0.6, 1e-12));
  CHECK(rep.n_in_long_silence == 1);
}

TEST_CASE("spike straddling a boundary counts as inside") {
  const std::vector<Boundary> bounds{{0, 5}, {5, 14}};
  TriggerSet trig;
  trig.positions = {1};  // [4,8): one frame in char 0, three in char 1
  const auto rep = spike_boundary_report(trig, bounds, 14);
  CHECK(rep.spikes[0].token_index == 1);  // larger overlap wins
  CHECK(rep.n_inside == 1);

  // equal overlap ties toward the earlier character
  TriggerSet tie;
  tie.positions = {1};  // [4,8) against {0,6},{6,14}: two frames each
  const auto rep2 = spike_boundary_report(tie, {{0, 6}, {6, 14}}, 14);
  CHECK(rep2.spikes[0].token_index == 0);
}

TEST_CASE("export_attention shape, normalization, index checks") {
  ModelConfig cfg;
  cfg.n_enc_blocks = 1;
  cfg.n_dec_blocks = 2;
  cfg.n_heads = 2;
  cfg.d_model = 12;
  cfg.d_ff = 8;
  cfg.feat_dim = 6;
  cfg.vocab_size = 7;
  cfg.dropout = 0.0;
  Rng rng(11);
  auto model = ModelParams<float>::init(cfg, rng);
  auto feat = random_tensor<float>({20, cfg.feat_dim}, rng);

  std::size_t t_prime = 0;
  {
    Graph<float> g;
    g.recording = false;
    RunCtx<float> ctx{g};
    t_prime = forward_st_nat(ctx, model, feat).trig.size();
  }
  REQUIRE(t_prime >= 1);
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (std::size_t head = 0; head < 2; ++head) {
      const auto w = export_attention(model, feat, layer, head);
      CHECK(w.shape() == Shape{t_prime, front_end_out_len(20)});
      for (std::size_t r = 0; r < w.rows(); ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < w.cols(); ++c)
          sum += static_cast<double>(w.at(r, c));
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-5));
      }
    }
  CHECK_THROWS_AS(export_attention(model, feat, 2, 0), UsageError);
  CHECK_THROWS_AS(export_attention(model, feat, 0, 5), UsageError);
}
