// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Trace-driven cost model of MoE decoding on the GPU + NDP system.
//
// Every expert execution is a roofline term: time is the max of streaming
// the expert's weights at the device bandwidth and running its FLOPs at the
// device compute throughput. Single-token decode is bandwidth-bound on both
// devices at the default rates. Within a layer the GPU and NDP sides
// overlap (max); layers and tokens are sequential. Whenever a token touches
// the NDP tier, its hidden vector crosses PCIe once in each direction.
//
// Policies:
//   ours           prefill stats -> top-K placement (one migration per
//                  sequence, delta-charged against residency) -> prefix-
//                  split bitwidths for the NDP side.
//   monde_static   global-frequency placement shared by all sequences,
//                  NDP experts at full precision.
//   gpu_on_demand  no NDP: per-layer LRU cache on the GPU, misses fetch
//                  quantized replicas over PCIe before compute.

#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moesim/bitwidth.hpp"
#include "moesim/config.hpp"
#include "moesim/core.hpp"
#include "moesim/placement.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"

namespace moesim {

enum class Policy { ours, monde_static, gpu_on_demand };
enum class BitwidthMode { selector, uniform };

inline std::string policy_name(Policy p) {
  switch (p) {
    case Policy::ours: return "ours";
    case Policy::monde_static: return "monde_static";
    case Policy::gpu_on_demand: return "gpu_on_demand";
  }
  return "?";
}

struct PolicyConfig {
  Policy policy = Policy::ours;
  // ours
  double avg_bits = 3.0;
  BitwidthMode bitwidth_mode = BitwidthMode::selector;
  double alpha = 0.5;
  bool prefill_on_gpu = false;
  // ours + monde_static
  std::optional<std::uint32_t> k_hot;
  bool full_recharge = false;
  // gpu_on_demand
  std::uint32_t gpu_cache_capacity = 4;
  std::uint32_t fetch_bits = 4;

  std::uint32_t resolve_k_hot(const ModelConfig& c) const {
    return k_hot ? *k_hot : default_k_hot(c);
  }

  void validate(const ModelConfig& c, const HardwareConfig& h) const {
    if (policy != Policy::gpu_on_demand && resolve_k_hot(c) > c.num_experts) {
      throw ValidationError("policy: k_hot exceeds the number of experts");
    }
    if (policy == Policy::ours) {
      if (alpha < 0.0 || alpha > 1.0) throw ValidationError("policy: alpha must be in [0, 1]");
      if (avg_bits < 1.0 || avg_bits > 4.0) {
        throw ValidationError("policy: avg_bits must be in [1, 4]");
      }
    }
    if (policy == Policy::gpu_on_demand) {
      if (!((fetch_bits >= 1 && fetch_bits <= 4) || fetch_bits == h.fp_bits())) {
        throw ValidationError("policy: fetch_bits must be in {1,2,3,4} or the full-precision "
                              "width " +
                              std::to_string(h.fp_bits()));
      }
    }
  }
};

inline PolicyConfig policy_config_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw ValidationError("policy config: expected a JSON object");
  std::string name;
  detail::read_field(obj, "policy", name);
  PolicyConfig p;
  if (name == "ours") {
    p.policy = Policy::ours;
    detail::reject_unknown_keys(
        obj, {"policy", "avg_bits", "bitwidth_mode", "alpha", "k_hot", "full_recharge",
              "prefill_on_gpu"},
        "policy \"ours\"");
    detail::read_field(obj, "avg_bits", p.avg_bits);
    detail::read_field(obj, "alpha", p.alpha);
    detail::read_field(obj, "full_recharge", p.full_recharge);
    detail::read_field(obj, "prefill_on_gpu", p.prefill_on_gpu);
    if (obj.contains("bitwidth_mode")) {
      const std::string mode = obj["bitwidth_mode"].get<std::string>();
      if (mode == "selector") {
        p.bitwidth_mode = BitwidthMode::selector;
      } else if (mode == "uniform") {
        p.bitwidth_mode = BitwidthMode::uniform;
      } else {
        throw ValidationError("policy: bitwidth_mode must be \"selector\" or \"uniform\"");
      }
    }
  } else if (name == "monde_static") {
    p.policy = Policy::monde_static;
    detail::reject_unknown_keys(obj, {"policy", "k_hot", "full_recharge"},
                                "policy \"monde_static\"");
    detail::read_field(obj, "full_recharge", p.full_recharge);
  } else if (name == "gpu_on_demand") {
    p.policy = Policy::gpu_on_demand;
    detail::reject_unknown_keys(obj, {"policy", "gpu_cache_capacity", "fetch_bits"},
                                "policy \"gpu_on_demand\"");
    detail::read_field(obj, "gpu_cache_capacity", p.gpu_cache_capacity);
    detail::read_field(obj, "fetch_bits", p.fetch_bits);
  } else {
    throw ValidationError("policy must be one of: ours, monde_static, gpu_on_demand (got \"" +
                          name + "\")");
  }
  if (obj.contains("k_hot")) {
    p.k_hot = obj["k_hot"].get<std::uint32_t>();
  }
  return p;
}

inline nlohmann::json policy_config_to_json(const PolicyConfig& p) {
  nlohmann::json j{{"policy", policy_name(p.policy)}};
  if (p.policy == Policy::ours) {
    j["avg_bits"] = p.avg_bits;
    j["bitwidth_mode"] = p.bitwidth_mode == BitwidthMode::selector ? "selector" : "uniform";
    j["alpha"] = p.alpha;
    if (p.prefill_on_gpu) j["prefill_on_gpu"] = true;
  }
  if (p.policy != Policy::gpu_on_demand) {
    if (p.k_hot) j["k_hot"] = *p.k_hot;
    if (p.full_recharge) j["full_recharge"] = true;
  } else {
    j["gpu_cache_capacity"] = p.gpu_cache_capacity;
    j["fetch_bits"] = p.fetch_bits;
  }
  return j;
}

enum class Device { gpu, ndp };

/// Roofline execution time of one expert processing `tokens` tokens.
/// An expert that sees no tokens costs nothing.
inline double expert_exec_time(const ModelConfig& c, const HardwareConfig& h, Device device,
                               std::uint32_t bits, std::uint64_t tokens) {
  if (tokens == 0) return 0.0;
  if (device == Device::gpu && bits != h.fp_bits()) {
    throw ValidationError("expert_exec_time: GPU experts run at full precision");
  }
  const double bytes = static_cast<double>(expert_bytes(c, bits, h.fp_bits()));
  const double flops = 2.0 * static_cast<double>(expert_param_count(c)) *
                       static_cast<double>(tokens);
  const double bandwidth = device == Device::gpu ? h.gpu_hbm_bandwidth : h.ndp_bandwidth;
  const double compute =
      device == Device::gpu ? h.gpu_peak_flops : h.ndp_compute_throughput(bits);
  return std::max(bytes / bandwidth, flops / compute);
}

struct SequenceReport {
  std::string seq_id;
  double prefill_time = 0.0;
  double migration_time = 0.0;
  double decode_time = 0.0;
  double ndp_busy_decode = 0.0;
  double gpu_busy_decode = 0.0;
  double prefill_ndp_busy = 0.0;
  std::uint64_t migration_bytes = 0;
  std::uint64_t migrated_experts = 0;
  double loss_proxy = 0.0;
  double similarity = 0.0;  // prefill<->decode cosine, mean over layers
};

struct SimReport {
  std::string policy_label;
  std::uint64_t sequences = 0;
  std::uint64_t decode_tokens = 0;
  double e2e_latency = 0.0;
  double prefill_latency = 0.0;
  double migration_latency = 0.0;
  double decode_latency = 0.0;
  double ndp_latency = 0.0;  // NDP busy time during decode, PCIe excluded
  std::uint64_t migration_bytes = 0;
  double decode_throughput = 0.0;
  double loss_proxy = 0.0;
  double mean_similarity = 0.0;
  std::vector<SequenceReport> per_sequence;
};

/// Device-residency state carried across sequences: which experts currently
/// sit in GPU memory (hot plan for ours/monde, LRU contents for on-demand).
struct SimState {
  PlacementPlan residency;                          // ours / monde_static
  std::vector<std::deque<std::uint32_t>> lru;       // gpu_on_demand, per layer
};

namespace detail {

inline bool contains_sorted(const std::vector<std::uint32_t>& sorted, std::uint32_t value) {
  return std::binary_search(sorted.begin(), sorted.end(), value);
}

/// Bytes both ways of one token's hidden vector over PCIe.
inline double activation_round_trip_bytes(const ModelConfig& c, const HardwareConfig& h) {
  return 2.0 * static_cast<double>(c.hidden_dim) * static_cast<double>(h.fp_bytes);
}

/// Tokens routed to each expert of each layer in one stage.
inline Grid<std::uint64_t> stage_expert_tokens(const ModelConfig& c,
                                               const std::vector<TokenRouting>& stage) {
  Grid<std::uint64_t> tokens(c.num_layers, c.num_experts, 0);
  for (const auto& token : stage) {
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      for (const auto& sel : token.layer(l)) tokens(l, sel.expert) += 1;
    }
  }
  return tokens;
}

/// LRU touch; returns true on hit. Capacity 0 caches nothing.
inline bool lru_touch(std::deque<std::uint32_t>& cache, std::uint32_t expert,
                      std::uint32_t capacity) {
  auto it = std::find(cache.begin(), cache.end(), expert);
  if (it != cache.end()) {
    cache.erase(it);
    cache.push_front(expert);
    return true;
  }
  if (capacity > 0) {
    cache.push_front(expert);
    while (cache.size() > capacity) cache.pop_back();
  }
  return false;
}

/// Batched prefill pass with every expert resident on the NDP tier at full
/// precision (the layout before any placement decision).
inline void prefill_all_ndp(const ModelConfig& c, const HardwareConfig& h,
                            const Grid<std::uint64_t>& tokens, std::uint64_t num_tokens,
                            SequenceReport& report) {
  const double act_time = activation_round_trip_bytes(c, h) / h.pcie_bandwidth;
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    double ndp_side = 0.0;
    for (std::uint32_t e = 0; e < c.num_experts; ++e) {
      ndp_side += expert_exec_time(c, h, Device::ndp, h.fp_bits(), tokens(l, e));
    }
    report.prefill_ndp_busy += ndp_side;
    report.prefill_time += ndp_side + static_cast<double>(num_tokens) * act_time +
                           static_cast<double>(num_tokens) * h.nonexpert_layer_time;
  }
}

/// Batched prefill on the GPU: activated experts stream over PCIe at full
/// precision, then execute at GPU rates (sensitivity flag for ours).
inline void prefill_gpu_fetch(const ModelConfig& c, const HardwareConfig& h,
                              const Grid<std::uint64_t>& tokens, std::uint64_t num_tokens,
                              SequenceReport& report) {
  const double fetch_time =
      static_cast<double>(expert_bytes(c, h.fp_bits(), h.fp_bits())) / h.pcie_bandwidth;
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    double layer_time = 0.0;
    for (std::uint32_t e = 0; e < c.num_experts; ++e) {
      if (tokens(l, e) == 0) continue;
      layer_time += fetch_time + expert_exec_time(c, h, Device::gpu, h.fp_bits(), tokens(l, e));
    }
    report.prefill_time += layer_time + static_cast<double>(num_tokens) * h.nonexpert_layer_time;
  }
}

/// Batched prefill under a fixed hot/cold layout (monde_static): both sides
/// overlap; tokens that touch any cold expert pay the activation transfer.
inline void prefill_static_layout(const ModelConfig& c, const HardwareConfig& h,
                                  const PlacementPlan& plan,
                                  const std::vector<TokenRouting>& stage,
                                  const Grid<std::uint64_t>& tokens, SequenceReport& report) {
  const double act_time = activation_round_trip_bytes(c, h) / h.pcie_bandwidth;
  std::vector<std::uint64_t> ndp_touched_tokens(c.num_layers, 0);
  for (const auto& token : stage) {
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      for (const auto& sel : token.layer(l)) {
        if (contains_sorted(plan.cold[l], sel.expert)) {
          ndp_touched_tokens[l] += 1;
          break;
        }
      }
    }
  }
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    double gpu_side = 0.0;
    double ndp_side = 0.0;
    for (std::uint32_t e = 0; e < c.num_experts; ++e) {
      if (tokens(l, e) == 0) continue;
      if (contains_sorted(plan.hot[l], e)) {
        gpu_side += expert_exec_time(c, h, Device::gpu, h.fp_bits(), tokens(l, e));
      } else {
        ndp_side += expert_exec_time(c, h, Device::ndp, h.fp_bits(), tokens(l, e));
      }
    }
    report.prefill_ndp_busy += ndp_side;
    report.prefill_time += std::max(gpu_side, ndp_side) +
                           static_cast<double>(ndp_touched_tokens[l]) * act_time +
                           static_cast<double>(stage.size()) * h.nonexpert_layer_time;
  }
}

/// Prefill for the on-demand policy: per layer, cache misses among the
/// activated experts are fetched before the layer executes on the GPU.
inline void prefill_on_demand(const ModelConfig& c, const HardwareConfig& h,
                              const PolicyConfig& policy, const Grid<std::uint64_t>& tokens,
                              std::uint64_t num_tokens, SimState& state, SequenceReport& report) {
  const double fetch_time =
      static_cast<double>(expert_bytes(c, policy.fetch_bits, h.fp_bits())) / h.pcie_bandwidth;
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    double transfer = 0.0;
    double compute = 0.0;
    for (std::uint32_t e = 0; e < c.num_experts; ++e) {
      if (tokens(l, e) == 0) continue;
      if (!lru_touch(state.lru[l], e, policy.gpu_cache_capacity)) {
        transfer += fetch_time;
        report.migration_bytes += expert_bytes(c, policy.fetch_bits, h.fp_bits());
      }
      compute += expert_exec_time(c, h, Device::gpu, h.fp_bits(), tokens(l, e));
    }
    report.prefill_time +=
        transfer + compute + static_cast<double>(num_tokens) * h.nonexpert_layer_time;
  }
}

}  // namespace detail

/// Simulates one sequence under `policy`, consuming and updating the
/// device-residency state. For ours this runs the full online flow: collect
/// prefill statistics, place the top-K experts per layer, assign NDP
/// bitwidths, charge the migration delta once, then decode token by token.
inline SequenceReport simulate_sequence(const ModelConfig& c, const HardwareConfig& h,
                                        const PolicyConfig& policy, const SequenceTrace& seq,
                                        const LossTable* loss_table,
                                        const PlacementPlan* static_plan, SimState& state) {
  SequenceReport report;
  report.seq_id = seq.seq_id;

  const std::uint32_t fp_bits = h.fp_bits();
  const double act_time = detail::activation_round_trip_bytes(c, h) / h.pcie_bandwidth;
  const Grid<std::uint64_t> prefill_tokens = detail::stage_expert_tokens(c, seq.prefill);

  const StageStats prefill_stats = collect_stats(c, seq.prefill);
  const StageStats decode_stats = collect_stats(c, seq.decode);
  report.similarity = stage_similarity(prefill_stats, decode_stats).mean;

  PlacementPlan plan;
  BitwidthPlan bit_plan;
  if (policy.policy == Policy::ours) {
    if (!loss_table) throw ValidationError("policy \"ours\" needs a loss table");
    const ImportanceScores scores = importance(prefill_stats, policy.alpha);
    plan = place(scores, policy.resolve_k_hot(c));
    bit_plan = policy.bitwidth_mode == BitwidthMode::selector
                   ? assign_bitwidths(scores, plan, *loss_table, policy.avg_bits)
                   : uniform_bitwidths(plan, c.num_experts, policy.avg_bits);
  } else if (policy.policy == Policy::monde_static) {
    if (!static_plan) throw ValidationError("policy \"monde_static\" needs a calibration plan");
    if (static_plan->num_layers() != c.num_layers) {
      throw ValidationError("calibration plan covers " +
                            std::to_string(static_plan->num_layers()) + " layers, model has " +
                            std::to_string(c.num_layers));
    }
    plan = *static_plan;
  }

  // Prefill (batched pass under the pre-decode layout).
  if (policy.policy == Policy::ours) {
    if (policy.prefill_on_gpu) {
      detail::prefill_gpu_fetch(c, h, prefill_tokens, seq.prefill.size(), report);
    } else {
      detail::prefill_all_ndp(c, h, prefill_tokens, seq.prefill.size(), report);
    }
  } else if (policy.policy == Policy::monde_static) {
    detail::prefill_static_layout(c, h, plan, seq.prefill, prefill_tokens, report);
  } else {
    if (state.lru.size() != c.num_layers) state.lru.assign(c.num_layers, {});
    detail::prefill_on_demand(c, h, policy, prefill_tokens, seq.prefill.size(), state, report);
  }

  // One migration per sequence: only experts newly hot relative to the
  // residency left by the previous sequence cross PCIe.
  if (policy.policy != Policy::gpu_on_demand) {
    std::uint64_t moved;
    if (policy.full_recharge) {
      moved = 0;
      for (const auto& hot : plan.hot) moved += hot.size();
    } else {
      moved = migration_expert_count(state.residency, plan);
    }
    report.migrated_experts = moved;
    report.migration_bytes = moved * expert_bytes(c, fp_bits, fp_bits);
    report.migration_time = static_cast<double>(report.migration_bytes) / h.pcie_bandwidth;
    state.residency = plan;
  }

  // Decode, token by token, layer by layer.
  Grid<std::uint64_t> decode_counts(c.num_layers, c.num_experts, 0);
  for (const auto& token : seq.decode) {
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      double gpu_time = 0.0;
      double ndp_time = 0.0;
      double transfer = 0.0;
      bool ndp_touched = false;
      for (const auto& sel : token.layer(l)) {
        decode_counts(l, sel.expert) += 1;
        if (policy.policy == Policy::gpu_on_demand) {
          if (!detail::lru_touch(state.lru[l], sel.expert, policy.gpu_cache_capacity)) {
            const std::uint64_t bytes = expert_bytes(c, policy.fetch_bits, fp_bits);
            report.migration_bytes += bytes;
            transfer += static_cast<double>(bytes) / h.pcie_bandwidth;
          }
          gpu_time += expert_exec_time(c, h, Device::gpu, fp_bits, 1);
        } else if (detail::contains_sorted(plan.hot[l], sel.expert)) {
          gpu_time += expert_exec_time(c, h, Device::gpu, fp_bits, 1);
        } else {
          const std::uint32_t bits = policy.policy == Policy::ours
                                         ? bit_plan.bits(l, sel.expert)
                                         : fp_bits;
          ndp_time += expert_exec_time(c, h, Device::ndp, bits, 1);
          ndp_touched = true;
        }
      }
      if (ndp_touched) transfer += act_time;
      report.decode_time += std::max(gpu_time, ndp_time) + transfer + h.nonexpert_layer_time;
      report.gpu_busy_decode += gpu_time;
      report.ndp_busy_decode += ndp_time;
    }
  }

  // Expected quantization degradation, weighted by decode activations.
  if (policy.policy == Policy::ours && loss_table) {
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      for (std::uint32_t e : plan.cold[l]) {
        const std::uint32_t bits = bit_plan.bits(l, e);
        if (bits >= 1 && bits <= 4 && decode_counts(l, e) > 0) {
          report.loss_proxy +=
              static_cast<double>(decode_counts(l, e)) * loss_table->row(l, e)[bits - 1];
        }
      }
    }
  } else if (policy.policy == Policy::gpu_on_demand && policy.fetch_bits <= 4) {
    if (!loss_table) {
      throw ValidationError("policy \"gpu_on_demand\" with quantized fetches needs a loss table");
    }
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      for (std::uint32_t e = 0; e < c.num_experts; ++e) {
        if (decode_counts(l, e) > 0) {
          report.loss_proxy += static_cast<double>(decode_counts(l, e)) *
                               loss_table->row(l, e)[policy.fetch_bits - 1];
        }
      }
    }
  }
  return report;
}

/// Folds simulate_sequence over a trace set in order, preserving residency,
/// and aggregates the per-sequence reports.
inline SimReport simulate(const ModelConfig& c, const HardwareConfig& h,
                          const std::vector<SequenceTrace>& traces, const PolicyConfig& policy,
                          const LossTable* loss_table = nullptr,
                          const PlacementPlan* static_plan = nullptr) {
  c.validate();
  h.validate();
  policy.validate(c, h);
  validate_traces(traces, c);
  if (loss_table) verify_loss_table(*loss_table, c, "simulate");

  SimReport report;
  report.policy_label = policy_name(policy.policy);
  report.sequences = traces.size();
  SimState state;
  for (const auto& seq : traces) {
    SequenceReport r = simulate_sequence(c, h, policy, seq, loss_table, static_plan, state);
    report.prefill_latency += r.prefill_time;
    report.migration_latency += r.migration_time;
    report.decode_latency += r.decode_time;
    report.ndp_latency += r.ndp_busy_decode;
    report.migration_bytes += r.migration_bytes;
    report.loss_proxy += r.loss_proxy;
    report.mean_similarity += r.similarity;
    report.decode_tokens += seq.decode.size();
    report.per_sequence.push_back(std::move(r));
  }
  report.e2e_latency = report.prefill_latency + report.migration_latency + report.decode_latency;
  report.decode_throughput =
      report.decode_latency > 0.0 ? static_cast<double>(report.decode_tokens) / report.decode_latency
                                  : 0.0;
  if (!traces.empty()) report.mean_similarity /= static_cast<double>(traces.size());
  return report;
}

inline nlohmann::json sim_report_to_json(const SimReport& r, bool include_sequences = false) {
  nlohmann::json j{{"policy", r.policy_label},
                   {"sequences", r.sequences},
                   {"decode_tokens", r.decode_tokens},
                   {"e2e_latency", r.e2e_latency},
                   {"prefill_latency", r.prefill_latency},
                   {"migration_latency", r.migration_latency},
                   {"decode_latency", r.decode_latency},
                   {"ndp_latency", r.ndp_latency},
                   {"migration_bytes", r.migration_bytes},
                   {"decode_throughput", r.decode_throughput},
                   {"loss_proxy", r.loss_proxy},
                   {"mean_similarity", r.mean_similarity}};
  if (include_sequences) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : r.per_sequence) {
      seqs.push_back({{"seq_id", s.seq_id},
                      {"prefill_time", s.prefill_time},
                      {"migration_time", s.migration_time},
                      {"decode_time", s.decode_time},
                      {"ndp_busy_decode", s.ndp_busy_decode},
                      {"migration_bytes", s.migration_bytes},
                      {"migrated_experts", s.migrated_experts},
                      {"loss_proxy", s.loss_proxy},
                      {"similarity", s.similarity}});
    }
    j["per_sequence"] = std::move(seqs);
  }
  return j;
}

}  // namespace moesim
