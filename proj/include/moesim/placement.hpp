// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Per-layer GPU/NDP expert partition, fixed once per sequence after prefill.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/stats.hpp"

namespace moesim {

/// Per-layer partition: hot experts execute on the GPU in full precision,
/// cold experts stay on the NDP tier. Both sets are stored sorted by id.
struct PlacementPlan {
  std::uint32_t k_hot = 0;
  std::vector<std::vector<std::uint32_t>> hot;
  std::vector<std::vector<std::uint32_t>> cold;

  std::uint32_t num_layers() const { return static_cast<std::uint32_t>(hot.size()); }
  bool operator==(const PlacementPlan&) const = default;
};

/// Experts of one layer ordered by descending score, ties by lower id.
/// Shared by placement and the bitwidth allocator so both see one ranking.
inline std::vector<std::uint32_t> rank_by_score(const ImportanceScores& scores, std::uint32_t l) {
  std::vector<std::uint32_t> order(scores.num_experts());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double sa = scores.values(l, a);
    const double sb = scores.values(l, b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return order;
}

/// Keeps the k_hot highest-scoring experts of each layer on the GPU.
inline PlacementPlan place(const ImportanceScores& scores, std::uint32_t k_hot) {
  const std::uint32_t E = scores.num_experts();
  if (k_hot > E) {
    throw ValidationError("place: k_hot " + std::to_string(k_hot) + " exceeds expert count " +
                          std::to_string(E));
  }
  PlacementPlan plan;
  plan.k_hot = k_hot;
  plan.hot.resize(scores.num_layers());
  plan.cold.resize(scores.num_layers());
  for (std::uint32_t l = 0; l < scores.num_layers(); ++l) {
    std::vector<std::uint32_t> order = rank_by_score(scores, l);
    plan.hot[l].assign(order.begin(), order.begin() + k_hot);
    plan.cold[l].assign(order.begin() + k_hot, order.end());
    std::sort(plan.hot[l].begin(), plan.hot[l].end());
    std::sort(plan.cold[l].begin(), plan.cold[l].end());
  }
  return plan;
}

/// Context-agnostic baseline placement: ranks experts by their global
/// activation frequency in a calibration trace set and shares the resulting
/// plan across all sequences.
inline PlacementPlan static_frequency_place(const StageStats& calibration, std::uint32_t k_hot) {
  return place(importance(calibration, 1.0), k_hot);
}

/// Experts of `next` hot sets that were not hot in `prev` (these are the
/// ones that must cross PCIe). An empty `prev` counts every hot expert.
inline std::uint64_t migration_expert_count(const PlacementPlan& prev, const PlacementPlan& next) {
  std::uint64_t moved = 0;
  for (std::uint32_t l = 0; l < next.num_layers(); ++l) {
    if (l < prev.num_layers()) {
      for (std::uint32_t e : next.hot[l]) {
        if (!std::binary_search(prev.hot[l].begin(), prev.hot[l].end(), e)) ++moved;
      }
    } else {
      moved += next.hot[l].size();
    }
  }
  return moved;
}

/// Debug dump: layer, expert, device.
inline void write_plan_csv(const std::string& path, const PlacementPlan& plan) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << "layer,expert,device\n";
  for (std::uint32_t l = 0; l < plan.num_layers(); ++l) {
    for (std::uint32_t e : plan.hot[l]) f << l << ',' << e << ",gpu\n";
    for (std::uint32_t e : plan.cold[l]) f << l << ',' << e << ",ndp\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace moesim
