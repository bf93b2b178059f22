// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <numeric>

#include "moesim/bitwidth.hpp"
#include "test_util.hpp"

using namespace moesim;
using moesim::testutil::random_instance;
using moesim::testutil::row_from_gains;
using moesim::testutil::worked_instance;

TEST_CASE("delta gains are direct subtractions from the 1-bit loss", "[bitwidth]") {
  const auto gains = delta_gains(LossRow{10, 4, 2, 1});
  CHECK(gains[0] == 6.0);
  CHECK(gains[1] == 8.0);
  CHECK(gains[2] == 9.0);

  const auto flat = delta_gains(LossRow{3.5, 3.5, 3.5, 3.5});
  CHECK(flat == std::array<double, 3>{0.0, 0.0, 0.0});
}

TEST_CASE("delta gains clamp non-monotone rows and report it", "[bitwidth]") {
  bool clamped = false;
  const auto gains = delta_gains(LossRow{10, 11, 2, 1}, &clamped);
  CHECK(clamped);
  CHECK(gains[0] == 0.0);  // envelope pins L(2) to L(1)
  CHECK(gains[1] == 8.0);
  CHECK(gains[2] == 9.0);

  clamped = true;
  delta_gains(LossRow{10, 4, 2, 1}, &clamped);
  CHECK_FALSE(clamped);
}

TEST_CASE("delta gains are nonnegative and nondecreasing on monotone rows", "[bitwidth]") {
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    const LossRow row = testutil::random_monotone_row(rng);
    const auto g = delta_gains(row);
    CHECK(g[0] >= 0.0);
    CHECK(g[0] <= g[1]);
    CHECK(g[1] <= g[2]);
  }
}

TEST_CASE("prefix split solves the worked four-expert instance", "[bitwidth]") {
  const auto rows = worked_instance();
  const LayerBitAllocation alloc = prefix_split(rows, 2.0);
  CHECK(alloc.increment_budget == 4);
  CHECK(alloc.n4 == 0);
  CHECK(alloc.n3 == 1);
  CHECK(alloc.n2 == 2);
  CHECK(alloc.n1 == 1);
  CHECK(alloc.gain == Catch::Approx(16.0));
  CHECK(alloc.bits == std::vector<std::uint8_t>{3, 2, 2, 1});
  CHECK(alloc.achieved_avg_bits == Catch::Approx(2.0));

  // Independent confirmations from both oracles.
  const LayerBitAllocation oracle = oracle_prefix_split(rows, 2.0);
  CHECK(oracle.gain == Catch::Approx(16.0));
  CHECK(oracle.n3 == 1);
  CHECK(oracle.bits == alloc.bits);
  const UnrestrictedAllocation best = oracle_unrestricted(rows, 2.0);
  CHECK(best.gain == Catch::Approx(16.0));
}

TEST_CASE("saturated and empty budgets force the assignment", "[bitwidth]") {
  const auto rows = worked_instance();
  const LayerBitAllocation all4 = prefix_split(rows, 4.0);
  CHECK(all4.n4 == 4);
  CHECK(all4.bits == std::vector<std::uint8_t>{4, 4, 4, 4});

  const LayerBitAllocation all1 = prefix_split(rows, 1.0);
  CHECK(all1.bits == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(all1.gain == 0.0);

  // Single expert: the budget fixes its bitwidth regardless of losses.
  const std::vector<LossRow> one = {row_from_gains(5.0, 1.0, 2.0, 3.0)};
  CHECK(prefix_split(one, 3.0).bits == std::vector<std::uint8_t>{3});
  CHECK(oracle_prefix_split(one, 3.0).bits == std::vector<std::uint8_t>{3});
  const UnrestrictedAllocation u = oracle_unrestricted(one, 3.0);
  CHECK(u.bits == std::vector<std::uint8_t>{3});
  CHECK(u.gain == oracle_prefix_split(one, 3.0).gain);
}

TEST_CASE("target average bits outside [1,4] is rejected", "[bitwidth]") {
  const auto rows = worked_instance();
  CHECK_THROWS_AS(prefix_split(rows, 0.5), ValidationError);
  CHECK_THROWS_AS(prefix_split(rows, 4.01), ValidationError);
}

TEST_CASE("fractional targets floor the increment budget", "[bitwidth]") {
  const auto rows = worked_instance();
  const LayerBitAllocation alloc = prefix_split(rows, 2.6);  // R = floor(6.4) = 6
  CHECK(alloc.increment_budget == 6);
  std::uint32_t increments = 0;
  for (auto b : alloc.bits) increments += b - 1;
  CHECK(increments == 6);
  CHECK(alloc.achieved_avg_bits == Catch::Approx(1.0 + 6.0 / 4.0));
}

TEST_CASE("prefix split matches the enumeration oracle on random instances", "[bitwidth]") {
  Rng rng(2024);
  for (int i = 0; i < 250; ++i) {
    const std::size_t experts = 2 + rng.next_u64() % 7;  // 2..8
    const double target = (rng.next_u64() % 2) ? 2.0 : 3.0;
    const auto rows = random_instance(rng, experts);
    const LayerBitAllocation fast = prefix_split(rows, target);
    const LayerBitAllocation slow = oracle_prefix_split(rows, target);
    REQUIRE(fast.gain == Catch::Approx(slow.gain).epsilon(1e-9));
    CHECK(fast.n4 == slow.n4);
    CHECK(fast.n3 == slow.n3);

    // Budget identity, exact in integers.
    std::uint32_t increments = 0;
    for (auto b : fast.bits) increments += b - 1;
    CHECK(increments == std::uint32_t(experts * (target - 1)));

    // Bits never increase along the importance order.
    for (std::size_t j = 1; j < fast.bits.size(); ++j) CHECK(fast.bits[j] <= fast.bits[j - 1]);

    // The documented quadratic enumeration bound.
    CHECK(fast.pairs_visited <= (experts + 1) * (experts + 1));
  }
}

TEST_CASE("unrestricted search dominates and matches on aligned rows", "[bitwidth]") {
  Rng rng(71);
  for (int i = 0; i < 60; ++i) {
    const std::size_t experts = 2 + rng.next_u64() % 5;  // 2..6
    const double target = (rng.next_u64() % 2) ? 2.0 : 3.0;
    const auto rows = random_instance(rng, experts);
    const double prefix_gain = prefix_split(rows, target).gain;
    const double free_gain = oracle_unrestricted(rows, target).gain;
    CHECK(free_gain >= prefix_gain - 1e-9);
  }

  // Rows scaled from a shared monotone base, ordered by importance: the
  // prefix restriction costs nothing.
  for (int i = 0; i < 40; ++i) {
    const std::size_t experts = 2 + rng.next_u64() % 5;
    const double target = (rng.next_u64() % 2) ? 2.0 : 3.0;
    const double d2 = rng.uniform_pos();
    const double d3 = d2 + rng.uniform_pos();
    const double d4 = d3 + rng.uniform_pos();
    std::vector<LossRow> rows;
    double scale = 4.0;
    for (std::size_t e = 0; e < experts; ++e) {
      rows.push_back(row_from_gains(scale * (d4 + 1.0), scale * d2, scale * d3, scale * d4));
      scale *= 0.5 + 0.4 * rng.uniform();  // strictly decreasing
    }
    const double prefix_gain = prefix_split(rows, target).gain;
    const double free_gain = oracle_unrestricted(rows, target).gain;
    CHECK(free_gain == Catch::Approx(prefix_gain).epsilon(1e-9));
  }
}

TEST_CASE("oracle guards reject oversized instances", "[bitwidth]") {
  const std::vector<LossRow> big(13, row_from_gains(4, 1, 2, 3));
  CHECK_THROWS_AS(oracle_prefix_split(big, 2.0), ValidationError);
  const std::vector<LossRow> nine(9, row_from_gains(4, 1, 2, 3));
  CHECK_THROWS_AS(oracle_unrestricted(nine, 2.0), ValidationError);
}

TEST_CASE("gain is invariant under shifting a whole loss row", "[bitwidth]") {
  Rng rng(5);
  auto rows = random_instance(rng, 5);
  const double base_gain = prefix_split(rows, 3.0).gain;
  for (auto& row : rows) {
    for (auto& v : row) v += 123.456;
  }
  CHECK(prefix_split(rows, 3.0).gain == Catch::Approx(base_gain).margin(1e-9));
}

TEST_CASE("measured loss tables are monotone in bits", "[bitwidth][losstable]") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    LossTableParams params;
    params.seed = seed;
    params.calib_tokens = 16;
    params.reduced_hidden = 48;
    params.reduced_ffn = 96;
    const ModelConfig c = testutil::tiny_model(2, 3, 2);
    const LossTable table = build_loss_table(c, params);
    for (const LossRow& row : table.rows) {
      CHECK(row[0] >= row[1]);
      CHECK(row[1] >= row[2]);
      CHECK(row[2] >= row[3]);
      CHECK(row[3] >= 0.0);
    }
  }
}

TEST_CASE("loss table construction is deterministic per seed", "[bitwidth][losstable]") {
  LossTableParams params;
  params.seed = 9;
  params.calib_tokens = 8;
  params.reduced_hidden = 32;
  params.reduced_ffn = 64;
  const ModelConfig c = testutil::tiny_model(1, 2, 1);
  const LossTable a = build_loss_table(c, params);
  const LossTable b = build_loss_table(c, params);
  CHECK(a.rows == b.rows);
}

TEST_CASE("a zero expert quantizes losslessly at every bitwidth", "[bitwidth][losstable]") {
  SyntheticExpert zero;
  zero.gate = MatrixF(8, 4);
  zero.up = MatrixF(8, 4);
  zero.down = MatrixF(4, 8);
  Rng rng(1);
  const auto inputs = gaussian_inputs(rng, 4, 4);
  for (std::uint32_t bits = 1; bits <= 4; ++bits) {
    CHECK(quantization_output_mse(zero, quantize_expert(zero, bits), inputs) == 0.0);
  }
}

TEST_CASE("16-bit quantization reproduces outputs almost exactly", "[bitwidth][losstable]") {
  Rng rng(4);
  const SyntheticExpert expert = make_synthetic_expert(rng, 32, 64);
  const auto inputs = gaussian_inputs(rng, 8, 32);
  const double mse = quantization_output_mse(expert, quantize_expert(expert, 16), inputs);
  double ref_ms = 0.0;
  std::size_t n = 0;
  for (const auto& x : inputs) {
    for (float y : expert_forward(expert, x)) {
      ref_ms += double(y) * double(y);
      ++n;
    }
  }
  ref_ms /= double(n);
  CHECK(std::sqrt(mse / ref_ms) <= 1e-3);
}

TEST_CASE("loss tables round trip through JSON with provenance", "[bitwidth][losstable]") {
  LossTableParams params;
  params.seed = 13;
  params.calib_tokens = 4;
  params.reduced_hidden = 16;
  params.reduced_ffn = 32;
  const ModelConfig c = testutil::tiny_model(2, 2, 1);
  const LossTable table = build_loss_table(c, params);

  const std::string path = "loss_table_roundtrip_test.json";
  save_loss_table(path, table);
  const LossTable loaded = load_loss_table(path);
  CHECK(loaded.rows == table.rows);
  CHECK(loaded.model_hash == table.model_hash);
  CHECK(loaded.seed == table.seed);
  CHECK_NOTHROW(verify_loss_table(loaded, c, path));

  // A different geometry must be rejected by the hash check.
  const ModelConfig other = testutil::tiny_model(2, 2, 2);
  CHECK_THROWS_AS(verify_loss_table(loaded, other, path), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("full-model bit assignment respects placement and budgets", "[bitwidth]") {
  const ModelConfig c = testutil::tiny_model(3, 6, 2);
  LossTableParams params;
  params.calib_tokens = 4;
  params.reduced_hidden = 16;
  params.reduced_ffn = 32;
  const LossTable table = build_loss_table(c, params);

  GeneratorParams g;
  g.seed = 77;
  g.prompt_len = 32;
  g.num_sequences = 1;
  const auto traces = generate_traces(c, g);
  const ImportanceScores scores = importance(collect_stats(c, traces[0].prefill), 0.5);
  const PlacementPlan plan = place(scores, 2);
  const BitwidthPlan bits = assign_bitwidths(scores, plan, table, 3.0);

  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    std::uint32_t increments = 0;
    for (std::uint32_t e : plan.hot[l]) CHECK(bits.bits(l, e) == 0);
    for (std::uint32_t e : plan.cold[l]) {
      CHECK(bits.bits(l, e) >= 1);
      CHECK(bits.bits(l, e) <= 4);
      increments += bits.bits(l, e) - 1;
    }
    CHECK(increments == (c.num_experts - 2) * 2);  // E_ndp * (avg_bits - 1)
  }

  const BitwidthPlan uniform = uniform_bitwidths(plan, c.num_experts, 2.0);
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    for (std::uint32_t e : plan.cold[l]) CHECK(uniform.bits(l, e) == 2);
  }
  CHECK_THROWS_AS(uniform_bitwidths(plan, c.num_experts, 2.5), ValidationError);
}
