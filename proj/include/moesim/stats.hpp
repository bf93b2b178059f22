// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Per-(layer, expert) activation statistics of a trace stage, the blended
// importance score that drives placement, and prefill<->decode similarity.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/trace.hpp"

namespace moesim {

/// Activation counts and routing-score sums of one stage. For a valid stage
/// the counts of every layer sum to top_k * token_count.
struct StageStats {
  Grid<std::uint64_t> counts;      // selections per (layer, expert)
  Grid<double> score_sums;         // accumulated routing scores
  std::uint64_t token_count = 0;

  std::uint32_t num_layers() const { return counts.rows(); }
  std::uint32_t num_experts() const { return counts.cols(); }
};

inline StageStats collect_stats(const ModelConfig& c, std::span<const TokenRouting> stage) {
  if (stage.empty()) {
    throw ValidationError("collect_stats: stage is empty; placement would be undefined");
  }
  StageStats stats;
  stats.counts = Grid<std::uint64_t>(c.num_layers, c.num_experts);
  stats.score_sums = Grid<double>(c.num_layers, c.num_experts);
  stats.token_count = stage.size();
  for (const TokenRouting& token : stage) {
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
      for (const ExpertSelection& sel : token.layer(l)) {
        stats.counts(l, sel.expert) += 1;
        stats.score_sums(l, sel.expert) += sel.score;
      }
    }
  }
  return stats;
}

/// Accumulates `other` into `into` (used to aggregate calibration sets).
inline void merge_stats(StageStats& into, const StageStats& other) {
  if (!into.counts.same_shape(other.counts)) {
    throw ValidationError("merge_stats: shape mismatch");
  }
  for (std::uint32_t l = 0; l < into.num_layers(); ++l) {
    for (std::uint32_t e = 0; e < into.num_experts(); ++e) {
      into.counts(l, e) += other.counts(l, e);
      into.score_sums(l, e) += other.score_sums(l, e);
    }
  }
  into.token_count += other.token_count;
}

/// Stats of both stages of every sequence, merged (global frequencies).
inline StageStats aggregate_all_stats(const ModelConfig& c,
                                      const std::vector<SequenceTrace>& traces) {
  StageStats total;
  total.counts = Grid<std::uint64_t>(c.num_layers, c.num_experts);
  total.score_sums = Grid<double>(c.num_layers, c.num_experts);
  for (const auto& seq : traces) {
    merge_stats(total, collect_stats(c, seq.prefill));
    merge_stats(total, collect_stats(c, seq.decode));
  }
  return total;
}

/// Blended importance per (layer, expert): values sum to 1 per layer.
struct ImportanceScores {
  Grid<double> values;
  double alpha = 0.5;

  std::uint32_t num_layers() const { return values.rows(); }
  std::uint32_t num_experts() const { return values.cols(); }
};

/// Blends L1-normalized activation counts and score sums:
/// alpha * counts_norm + (1 - alpha) * score_norm per layer. A layer whose
/// sum is zero contributes the uniform vector for that term, so the result
/// is total even on degenerate inputs.
inline ImportanceScores importance(const StageStats& stats, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("importance: alpha must be in [0, 1]");
  const std::uint32_t L = stats.num_layers();
  const std::uint32_t E = stats.num_experts();
  ImportanceScores scores;
  scores.alpha = alpha;
  scores.values = Grid<double>(L, E);
  const double uniform = 1.0 / static_cast<double>(E);
  for (std::uint32_t l = 0; l < L; ++l) {
    double count_sum = 0.0;
    double score_sum = 0.0;
    for (std::uint32_t e = 0; e < E; ++e) {
      count_sum += static_cast<double>(stats.counts(l, e));
      score_sum += stats.score_sums(l, e);
    }
    for (std::uint32_t e = 0; e < E; ++e) {
      const double count_norm =
          count_sum > 0.0 ? static_cast<double>(stats.counts(l, e)) / count_sum : uniform;
      const double score_norm = score_sum > 0.0 ? stats.score_sums(l, e) / score_sum : uniform;
      scores.values(l, e) = alpha * count_norm + (1.0 - alpha) * score_norm;
    }
  }
  return scores;
}

struct SimilarityReport {
  std::vector<double> per_layer;
  double mean = 0.0;
};

/// Cosine similarity of the L1-normalized activation-count vectors of two
/// stages, per layer and averaged. A zero vector yields 0 for its layer.
inline SimilarityReport stage_similarity(const StageStats& a, const StageStats& b) {
  if (!a.counts.same_shape(b.counts)) {
    throw ValidationError("stage_similarity: shape mismatch");
  }
  const std::uint32_t L = a.num_layers();
  const std::uint32_t E = a.num_experts();
  SimilarityReport report;
  report.per_layer.resize(L);
  for (std::uint32_t l = 0; l < L; ++l) {
    double sum_a = 0.0, sum_b = 0.0;
    for (std::uint32_t e = 0; e < E; ++e) {
      sum_a += static_cast<double>(a.counts(l, e));
      sum_b += static_cast<double>(b.counts(l, e));
    }
    double dot = 0.0, norm_a = 0.0, norm_b = 0.0;
    if (sum_a > 0.0 && sum_b > 0.0) {
      for (std::uint32_t e = 0; e < E; ++e) {
        const double pa = static_cast<double>(a.counts(l, e)) / sum_a;
        const double pb = static_cast<double>(b.counts(l, e)) / sum_b;
        dot += pa * pb;
        norm_a += pa * pa;
        norm_b += pb * pb;
      }
    }
    report.per_layer[l] =
        (norm_a > 0.0 && norm_b > 0.0) ? dot / (std::sqrt(norm_a) * std::sqrt(norm_b)) : 0.0;
    report.mean += report.per_layer[l];
  }
  if (L > 0) report.mean /= static_cast<double>(L);
  return report;
}

/// Mean prefill<->decode similarity over a trace set.
inline double mean_prefill_decode_similarity(const ModelConfig& c,
                                             const std::vector<SequenceTrace>& traces) {
  if (traces.empty()) return 0.0;
  double total = 0.0;
  for (const auto& seq : traces) {
    total += stage_similarity(collect_stats(c, seq.prefill), collect_stats(c, seq.decode)).mean;
  }
  return total / static_cast<double>(traces.size());
}

/// Debug dump: layer, expert, count, score sum, blended importance.
inline void write_importance_csv(const std::string& path, const StageStats& stats,
                                 const ImportanceScores& scores) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << "layer,expert,P,W,S\n";
  for (std::uint32_t l = 0; l < stats.num_layers(); ++l) {
    for (std::uint32_t e = 0; e < stats.num_experts(); ++e) {
      f << l << ',' << e << ',' << stats.counts(l, e) << ',' << format_double(stats.score_sums(l, e))
        << ',' << format_double(scores.values(l, e)) << '\n';
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace moesim
