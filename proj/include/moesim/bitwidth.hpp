// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Mixed-precision bitwidth allocation for NDP-resident experts.
//
// Each cold expert may run at 1, 2, 3 or 4 bits. A layer with E_ndp cold
// experts and a target average bitwidth B carries an increment budget
// R = E_ndp * (B - 1): every step 1->2, 2->3 or 3->4 consumes one unit.
// Upgrades are restricted to a prefix structure over the importance
// ranking (bitwidths never increase along it), so an assignment is fully
// described by how many experts sit at 4, 3 and 2 bits. The allocator
// enumerates those block counts and scores them in O(1) each via prefix
// sums of the per-expert upgrade gains; two brute-force oracles validate
// the result from independent directions.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moesim/config.hpp"
#include "moesim/core.hpp"
#include "moesim/placement.hpp"
#include "moesim/quantize.hpp"

namespace moesim {

/// Output MSE of one expert at bitwidths 1..4 (index b-1).
using LossRow = std::array<double, 4>;

/// Per-(layer, expert) quantization losses plus the provenance needed to
/// reuse a cached table: tables are built offline once per (model, seed).
struct LossTable {
  std::uint32_t num_layers = 0;
  std::uint32_t num_experts = 0;
  std::string model_hash;
  std::uint64_t seed = 0;
  std::uint32_t calib_tokens = 0;
  std::uint32_t reduced_hidden = 0;
  std::uint32_t reduced_ffn = 0;
  std::vector<LossRow> rows;  // layer-major

  LossRow& row(std::uint32_t l, std::uint32_t e) {
    return rows[static_cast<std::size_t>(l) * num_experts + e];
  }
  const LossRow& row(std::uint32_t l, std::uint32_t e) const {
    return rows[static_cast<std::size_t>(l) * num_experts + e];
  }

  bool matches(const ModelConfig& c) const {
    return model_hash == model_config_hash(c) && num_layers == c.num_layers &&
           num_experts == c.num_experts;
  }
};

struct LossTableParams {
  std::uint64_t seed = 7;
  std::uint32_t calib_tokens = 32;
  std::uint32_t reduced_hidden = 64;
  std::uint32_t reduced_ffn = 256;

  void validate() const {
    if (calib_tokens < 1) throw ValidationError("loss table: calib_tokens must be >= 1");
    if (reduced_hidden < 1 || reduced_ffn < 1) {
      throw ValidationError("loss table: reduced dims must be >= 1");
    }
  }
};

/// Measures the loss table on synthetic experts: per (layer, expert), a
/// seeded Gaussian expert at reduced dimensions is quantized with the
/// reference RTN quantizer and its output MSE against the full-precision
/// outputs is recorded for each bitwidth. Each expert draws its own weight
/// scale (log-uniform in [0.5, 2]), so sensitivities differ across experts
/// and a bitwidth selector has real choices to make. Deterministic per
/// seed; rows are independent, so construction is spread across threads.
inline LossTable build_loss_table(const ModelConfig& c, const LossTableParams& params) {
  c.validate();
  params.validate();
  LossTable table;
  table.num_layers = c.num_layers;
  table.num_experts = c.num_experts;
  table.model_hash = model_config_hash(c);
  table.seed = params.seed;
  table.calib_tokens = params.calib_tokens;
  table.reduced_hidden = params.reduced_hidden;
  table.reduced_ffn = params.reduced_ffn;
  table.rows.resize(static_cast<std::size_t>(c.num_layers) * c.num_experts);

  const std::size_t total = table.rows.size();
  auto worker_body = [&](std::size_t index) {
    const std::uint32_t l = static_cast<std::uint32_t>(index / c.num_experts);
    const std::uint32_t e = static_cast<std::uint32_t>(index % c.num_experts);
    Rng rng(derive_seed(params.seed, l, e));
    const double weight_scale = std::exp(std::log(0.5) + rng.uniform() * std::log(4.0));
    const SyntheticExpert expert =
        make_synthetic_expert(rng, params.reduced_hidden, params.reduced_ffn, weight_scale);
    const auto inputs = gaussian_inputs(rng, params.calib_tokens, params.reduced_hidden);
    LossRow& row = table.rows[index];
    for (std::uint32_t bits = 1; bits <= 4; ++bits) {
      row[bits - 1] = quantization_output_mse(expert, quantize_expert(expert, bits), inputs);
    }
  };

  const unsigned workers = std::min<unsigned>(
      std::max(1u, std::thread::hardware_concurrency()), static_cast<unsigned>(total));
  if (workers <= 1) {
    for (std::size_t i = 0; i < total; ++i) worker_body(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < total; i = next.fetch_add(1)) worker_body(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return table;
}

inline void save_loss_table(const std::string& path, const LossTable& table) {
  nlohmann::ordered_json j;
  j["model_hash"] = table.model_hash;
  j["seed"] = table.seed;
  j["calib_tokens"] = table.calib_tokens;
  j["reduced_hidden"] = table.reduced_hidden;
  j["reduced_ffn"] = table.reduced_ffn;
  j["num_layers"] = table.num_layers;
  j["num_experts"] = table.num_experts;
  nlohmann::ordered_json loss;
  for (std::uint32_t l = 0; l < table.num_layers; ++l) {
    nlohmann::ordered_json layer;
    for (std::uint32_t e = 0; e < table.num_experts; ++e) {
      layer[std::to_string(e)] = table.row(l, e);
    }
    loss[std::to_string(l)] = std::move(layer);
  }
  j["loss"] = std::move(loss);
  std::ofstream f(path);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed: " + path);
}

inline LossTable load_loss_table(const std::string& path) {
  const nlohmann::json j = load_json_file(path);
  if (!j.is_object()) throw ValidationError(path + ": expected a JSON object");
  detail::reject_unknown_keys(j,
                              {"model_hash", "seed", "calib_tokens", "reduced_hidden",
                               "reduced_ffn", "num_layers", "num_experts", "loss"},
                              path);
  LossTable table;
  detail::read_field(j, "model_hash", table.model_hash);
  detail::read_field(j, "seed", table.seed);
  detail::read_field(j, "calib_tokens", table.calib_tokens);
  detail::read_field(j, "reduced_hidden", table.reduced_hidden);
  detail::read_field(j, "reduced_ffn", table.reduced_ffn);
  detail::read_field(j, "num_layers", table.num_layers);
  detail::read_field(j, "num_experts", table.num_experts);
  if (table.num_layers < 1 || table.num_experts < 1) {
    throw ValidationError(path + ": num_layers and num_experts must be >= 1");
  }
  table.rows.resize(static_cast<std::size_t>(table.num_layers) * table.num_experts);
  if (!j.contains("loss")) throw ValidationError(path + ": missing loss object");
  for (std::uint32_t l = 0; l < table.num_layers; ++l) {
    const std::string lk = std::to_string(l);
    if (!j["loss"].contains(lk)) throw ValidationError(path + ": missing layer " + lk);
    for (std::uint32_t e = 0; e < table.num_experts; ++e) {
      const std::string ek = std::to_string(e);
      if (!j["loss"][lk].contains(ek)) {
        throw ValidationError(path + ": missing expert " + ek + " in layer " + lk);
      }
      const auto& arr = j["loss"][lk][ek];
      if (!arr.is_array() || arr.size() != 4) {
        throw ValidationError(path + ": loss row must hold 4 values (layer " + lk + ", expert " +
                              ek + ")");
      }
      LossRow& row = table.row(l, e);
      for (std::size_t b = 0; b < 4; ++b) {
        row[b] = arr[b].get<double>();
        if (!(row[b] >= 0.0)) {
          throw ValidationError(path + ": loss values must be nonnegative (layer " + lk +
                                ", expert " + ek + ")");
        }
      }
    }
  }
  return table;
}

/// Verifies a loaded table belongs to the active model.
inline void verify_loss_table(const LossTable& table, const ModelConfig& c,
                              const std::string& origin) {
  if (!table.matches(c)) {
    throw ValidationError(origin + ": loss table was built for a different model (hash " +
                          table.model_hash + ", expected " + model_config_hash(c) + ")");
  }
}

/// True when a cached table was produced by exactly this (model, params)
/// combination and can be reused instead of rebuilding.
inline bool loss_table_up_to_date(const LossTable& table, const ModelConfig& c,
                                  const LossTableParams& params) {
  return table.matches(c) && table.seed == params.seed &&
         table.calib_tokens == params.calib_tokens &&
         table.reduced_hidden == params.reduced_hidden && table.reduced_ffn == params.reduced_ffn;
}

/// Upgrade gains of one expert relative to 1-bit: delta[b-2] = L(1) - L(b)
/// for b in {2,3,4}. A non-monotone row is clamped to its monotone envelope
/// and reported through `clamped` (measured tables can carry tiny
/// inversions; the allocator treats them as flat).
inline std::array<double, 3> delta_gains(const LossRow& losses, bool* clamped = nullptr) {
  if (clamped) *clamped = false;
  double envelope = losses[0];
  std::array<double, 3> gains{};
  for (std::size_t b = 1; b < 4; ++b) {
    double value = losses[b];
    if (value > envelope) {
      value = envelope;
      if (clamped) *clamped = true;
    }
    envelope = value;
    gains[b - 1] = losses[0] - value;
  }
  return gains;
}

/// Bit assignment of one layer's cold experts, in importance order.
struct LayerBitAllocation {
  std::vector<std::uint8_t> bits;  // aligned with the importance ordering
  double gain = 0.0;
  std::uint32_t n4 = 0, n3 = 0, n2 = 0, n1 = 0;
  std::uint32_t increment_budget = 0;
  double achieved_avg_bits = 0.0;
  std::uint32_t pairs_visited = 0;  // enumeration states, bounded by (E_ndp+1)^2
  std::uint32_t clamped_rows = 0;
};

namespace detail {

inline std::uint32_t increment_budget_for(std::size_t num_experts, double avg_bits) {
  if (avg_bits < 1.0 || avg_bits > 4.0) {
    throw ValidationError("bitwidth allocation: target average bits must be in [1, 4], got " +
                          format_double(avg_bits));
  }
  // Fractional targets are floored to whole increments; the achieved
  // average is reported alongside the plan.
  const double raw = static_cast<double>(num_experts) * (avg_bits - 1.0);
  auto budget = static_cast<std::uint64_t>(std::floor(raw + 1e-9));
  return static_cast<std::uint32_t>(std::min<std::uint64_t>(budget, 3 * num_experts));
}

inline void finalize_allocation(LayerBitAllocation& out, std::size_t num_experts) {
  out.n1 = static_cast<std::uint32_t>(num_experts) - out.n4 - out.n3 - out.n2;
  out.bits.assign(num_experts, 1);
  std::size_t i = 0;
  for (std::uint32_t j = 0; j < out.n4; ++j) out.bits[i++] = 4;
  for (std::uint32_t j = 0; j < out.n3; ++j) out.bits[i++] = 3;
  for (std::uint32_t j = 0; j < out.n2; ++j) out.bits[i++] = 2;
  out.achieved_avg_bits =
      num_experts ? 1.0 + static_cast<double>(out.increment_budget) / num_experts : 0.0;
}

}  // namespace detail

/// Picks the block counts (n4, n3, n2) maximizing the total upgrade gain
/// under the increment budget. `losses` must be ordered by descending
/// importance; ties prefer larger n4, then larger n3. O(E_ndp^2).
inline LayerBitAllocation prefix_split(std::span<const LossRow> losses, double avg_bits) {
  const std::size_t E = losses.size();
  LayerBitAllocation out;
  out.increment_budget = detail::increment_budget_for(E, avg_bits);
  if (E == 0) return out;

  // Prefix sums of the upgrade gains: cum[b][j] = sum of delta(b) over the
  // j most important experts, so any block's contribution is a difference.
  std::array<std::vector<double>, 3> cum;
  for (auto& v : cum) v.assign(E + 1, 0.0);
  for (std::size_t i = 0; i < E; ++i) {
    bool clamped = false;
    const auto gains = delta_gains(losses[i], &clamped);
    if (clamped) ++out.clamped_rows;
    for (std::size_t b = 0; b < 3; ++b) cum[b][i + 1] = cum[b][i] + gains[b];
  }

  const std::uint32_t budget = out.increment_budget;
  const auto count = static_cast<std::uint32_t>(E);
  bool found = false;
  double best_gain = 0.0;
  std::uint32_t best_n4 = 0, best_n3 = 0, best_n2 = 0;
  for (std::uint32_t n4 = 0; n4 <= count && 3 * n4 <= budget; ++n4) {
    for (std::uint32_t n3 = 0; n4 + n3 <= count && 3 * n4 + 2 * n3 <= budget; ++n3) {
      ++out.pairs_visited;
      const std::uint32_t n2 = budget - 3 * n4 - 2 * n3;
      if (n4 + n3 + n2 > count) continue;
      const double gain = cum[2][n4] + (cum[1][n4 + n3] - cum[1][n4]) +
                          (cum[0][n4 + n3 + n2] - cum[0][n4 + n3]);
      const bool better =
          !found || gain > best_gain ||
          (gain == best_gain && (n4 > best_n4 || (n4 == best_n4 && n3 > best_n3)));
      if (better) {
        found = true;
        best_gain = gain;
        best_n4 = n4;
        best_n3 = n3;
        best_n2 = n2;
      }
    }
  }
  out.gain = best_gain;
  out.n4 = best_n4;
  out.n3 = best_n3;
  out.n2 = best_n2;
  detail::finalize_allocation(out, E);
  return out;
}

/// Validation oracle: enumerates every prefix-structured assignment that
/// meets the budget and scores it by direct summation, no prefix sums.
inline LayerBitAllocation oracle_prefix_split(std::span<const LossRow> losses, double avg_bits) {
  const std::size_t E = losses.size();
  if (E > 12) {
    throw ValidationError("oracle_prefix_split: guarded to <= 12 experts, got " +
                          std::to_string(E));
  }
  LayerBitAllocation out;
  out.increment_budget = detail::increment_budget_for(E, avg_bits);
  if (E == 0) return out;

  std::vector<std::array<double, 3>> gains(E);
  for (std::size_t i = 0; i < E; ++i) gains[i] = delta_gains(losses[i]);

  const auto count = static_cast<std::uint32_t>(E);
  bool found = false;
  for (std::uint32_t n4 = 0; n4 <= count; ++n4) {
    for (std::uint32_t n3 = 0; n4 + n3 <= count; ++n3) {
      for (std::uint32_t n2 = 0; n4 + n3 + n2 <= count; ++n2) {
        if (3 * n4 + 2 * n3 + n2 != out.increment_budget) continue;
        double gain = 0.0;
        for (std::size_t i = 0; i < E; ++i) {
          if (i < n4) {
            gain += gains[i][2];
          } else if (i < n4 + n3) {
            gain += gains[i][1];
          } else if (i < std::size_t(n4) + n3 + n2) {
            gain += gains[i][0];
          }
        }
        const bool better =
            !found || gain > out.gain ||
            (gain == out.gain && (n4 > out.n4 || (n4 == out.n4 && n3 > out.n3)));
        if (better) {
          found = true;
          out.gain = gain;
          out.n4 = n4;
          out.n3 = n3;
          out.n2 = n2;
        }
      }
    }
  }
  detail::finalize_allocation(out, E);
  return out;
}

struct UnrestrictedAllocation {
  std::vector<std::uint8_t> bits;
  double gain = 0.0;
  std::uint32_t increment_budget = 0;
};

/// Exhaustive search over all 4^E assignments meeting the budget, with no
/// prefix restriction. Quantifies what the prefix structure gives up.
inline UnrestrictedAllocation oracle_unrestricted(std::span<const LossRow> losses,
                                                  double avg_bits) {
  const std::size_t E = losses.size();
  if (E > 8) {
    throw ValidationError("oracle_unrestricted: guarded to <= 8 experts, got " +
                          std::to_string(E));
  }
  UnrestrictedAllocation out;
  out.increment_budget = detail::increment_budget_for(E, avg_bits);
  if (E == 0) return out;

  std::vector<std::array<double, 3>> gains(E);
  for (std::size_t i = 0; i < E; ++i) gains[i] = delta_gains(losses[i]);

  std::vector<std::uint8_t> assignment(E, 1);
  bool found = false;
  for (;;) {
    std::uint32_t increments = 0;
    for (auto b : assignment) increments += b - 1;
    if (increments == out.increment_budget) {
      double gain = 0.0;
      for (std::size_t i = 0; i < E; ++i) {
        if (assignment[i] > 1) gain += gains[i][assignment[i] - 2];
      }
      if (!found || gain > out.gain) {
        found = true;
        out.gain = gain;
        out.bits = assignment;
      }
    }
    // odometer over {1..4}^E
    std::size_t pos = 0;
    while (pos < E && assignment[pos] == 4) {
      assignment[pos] = 1;
      ++pos;
    }
    if (pos == E) break;
    ++assignment[pos];
  }
  return out;
}

/// Full-model bitwidth plan: bits per (layer, expert), 0 for GPU residents.
struct BitwidthPlan {
  Grid<std::uint8_t> bits;
  std::vector<double> layer_gain;
  std::uint64_t clamped_rows = 0;

  double total_gain() const {
    double g = 0.0;
    for (double v : layer_gain) g += v;
    return g;
  }
};

/// Runs prefix_split on every layer's cold experts, ranked by importance.
inline BitwidthPlan assign_bitwidths(const ImportanceScores& scores, const PlacementPlan& plan,
                                     const LossTable& table, double avg_bits) {
  const std::uint32_t L = scores.num_layers();
  BitwidthPlan out;
  out.bits = Grid<std::uint8_t>(L, scores.num_experts(), 0);
  out.layer_gain.assign(L, 0.0);
  for (std::uint32_t l = 0; l < L; ++l) {
    std::vector<std::uint32_t> cold_ranked;
    for (std::uint32_t e : rank_by_score(scores, l)) {
      if (std::binary_search(plan.cold[l].begin(), plan.cold[l].end(), e)) {
        cold_ranked.push_back(e);
      }
    }
    std::vector<LossRow> losses(cold_ranked.size());
    for (std::size_t i = 0; i < cold_ranked.size(); ++i) losses[i] = table.row(l, cold_ranked[i]);
    const LayerBitAllocation alloc = prefix_split(losses, avg_bits);
    out.layer_gain[l] = alloc.gain;
    out.clamped_rows += alloc.clamped_rows;
    for (std::size_t i = 0; i < cold_ranked.size(); ++i) {
      out.bits(l, cold_ranked[i]) = alloc.bits[i];
    }
  }
  return out;
}

/// Ablation variant: every cold expert at the same bitwidth.
inline BitwidthPlan uniform_bitwidths(const PlacementPlan& plan, std::uint32_t num_experts,
                                      double avg_bits) {
  const auto bits = static_cast<std::uint32_t>(std::llround(avg_bits));
  if (bits < 1 || bits > 4 || std::abs(avg_bits - bits) > 1e-9) {
    throw ValidationError("uniform bitwidth mode needs an integer average in {1,2,3,4}, got " +
                          format_double(avg_bits));
  }
  BitwidthPlan out;
  out.bits = Grid<std::uint8_t>(plan.num_layers(), num_experts, 0);
  out.layer_gain.assign(plan.num_layers(), 0.0);
  for (std::uint32_t l = 0; l < plan.num_layers(); ++l) {
    for (std::uint32_t e : plan.cold[l]) out.bits(l, e) = static_cast<std::uint8_t>(bits);
  }
  return out;
}

/// Debug dump: layer, expert, bits (GPU residents omitted).
inline void write_bitwidths_csv(const std::string& path, const BitwidthPlan& plan) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << "layer,expert,bits\n";
  for (std::uint32_t l = 0; l < plan.bits.rows(); ++l) {
    for (std::uint32_t e = 0; e < plan.bits.cols(); ++e) {
      if (plan.bits(l, e) != 0) f << l << ',' << e << ',' << int(plan.bits(l, e)) << '\n';
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace moesim
