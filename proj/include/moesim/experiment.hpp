// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configs: a model + hardware + generator + policy list, with
// optional sweep axes over alpha, avg_bits, k_hot and similarity. Every run
// is reproducible from its config alone; outputs echo the config and its
// content hash, and rows follow a frozen CSV schema.

#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moesim/bitwidth.hpp"
#include "moesim/config.hpp"
#include "moesim/core.hpp"
#include "moesim/simulator.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"

namespace moesim {

struct SweepAxes {
  std::vector<double> alpha;
  std::vector<double> avg_bits;
  std::vector<std::uint32_t> k_hot;
  std::vector<double> similarity;

  bool empty() const {
    return alpha.empty() && avg_bits.empty() && k_hot.empty() && similarity.empty();
  }
};

struct ExperimentConfig {
  ModelConfig model = mixtral_8x7b();
  HardwareConfig hardware;
  GeneratorParams generator;
  std::vector<PolicyConfig> policies;
  SweepAxes sweep;
  LossTableParams loss_params;
  std::optional<std::string> loss_path;
  std::optional<std::string> trace_path;
  std::optional<std::string> out_json;
  std::optional<std::string> out_csv;
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("experiment config: expected a JSON object");
  detail::reject_unknown_keys(
      j, {"model", "hardware", "generator", "policies", "sweep", "loss_table", "trace_path",
          "output"},
      "experiment config");
  ExperimentConfig cfg;
  if (j.contains("model")) cfg.model = resolve_model(j["model"]);
  if (j.contains("hardware")) cfg.hardware = resolve_hardware(j["hardware"]);
  if (j.contains("generator")) cfg.generator = generator_params_from_json(j["generator"]);
  if (!j.contains("policies") || !j["policies"].is_array() || j["policies"].empty()) {
    throw ValidationError("experiment config: \"policies\" must be a nonempty array");
  }
  for (const auto& p : j["policies"]) cfg.policies.push_back(policy_config_from_json(p));

  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::reject_unknown_keys(s, {"alpha", "avg_bits", "k_hot", "similarity"}, "sweep");
    auto read_axis = [&](const char* key, auto& out) {
      if (!s.contains(key)) return;
      if (!s[key].is_array() || s[key].empty()) {
        throw ValidationError(std::string("sweep axis \"") + key + "\" must be a nonempty array");
      }
      for (const auto& v : s[key]) out.push_back(v.template get<typename std::decay_t<
                                                     decltype(out)>::value_type>());
    };
    read_axis("alpha", cfg.sweep.alpha);
    read_axis("avg_bits", cfg.sweep.avg_bits);
    read_axis("k_hot", cfg.sweep.k_hot);
    read_axis("similarity", cfg.sweep.similarity);
  }

  if (j.contains("loss_table")) {
    const auto& lt = j["loss_table"];
    detail::reject_unknown_keys(
        lt, {"seed", "calib_tokens", "reduced_hidden", "reduced_ffn", "path"}, "loss_table");
    detail::read_field(lt, "seed", cfg.loss_params.seed);
    detail::read_field(lt, "calib_tokens", cfg.loss_params.calib_tokens);
    detail::read_field(lt, "reduced_hidden", cfg.loss_params.reduced_hidden);
    detail::read_field(lt, "reduced_ffn", cfg.loss_params.reduced_ffn);
    if (lt.contains("path")) cfg.loss_path = lt["path"].get<std::string>();
    cfg.loss_params.validate();
  }
  if (j.contains("trace_path")) cfg.trace_path = j["trace_path"].get<std::string>();
  if (j.contains("output")) {
    detail::reject_unknown_keys(j["output"], {"json", "csv"}, "output");
    if (j["output"].contains("json")) cfg.out_json = j["output"]["json"].get<std::string>();
    if (j["output"].contains("csv")) cfg.out_csv = j["output"]["csv"].get<std::string>();
  }
  return cfg;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["model"] = model_config_to_json(cfg.model);
  j["hardware"] = hardware_config_to_json(cfg.hardware);
  j["generator"] = generator_params_to_json(cfg.generator);
  j["policies"] = nlohmann::json::array();
  for (const auto& p : cfg.policies) j["policies"].push_back(policy_config_to_json(p));
  if (!cfg.sweep.empty()) {
    nlohmann::json s;
    if (!cfg.sweep.alpha.empty()) s["alpha"] = cfg.sweep.alpha;
    if (!cfg.sweep.avg_bits.empty()) s["avg_bits"] = cfg.sweep.avg_bits;
    if (!cfg.sweep.k_hot.empty()) s["k_hot"] = cfg.sweep.k_hot;
    if (!cfg.sweep.similarity.empty()) s["similarity"] = cfg.sweep.similarity;
    j["sweep"] = std::move(s);
  }
  j["loss_table"] = {{"seed", cfg.loss_params.seed},
                     {"calib_tokens", cfg.loss_params.calib_tokens},
                     {"reduced_hidden", cfg.loss_params.reduced_hidden},
                     {"reduced_ffn", cfg.loss_params.reduced_ffn}};
  if (cfg.loss_path) j["loss_table"]["path"] = *cfg.loss_path;
  if (cfg.trace_path) j["trace_path"] = *cfg.trace_path;
  return j;
}

/// Hash of the canonical config dump; echoed into every output.
inline std::string experiment_config_hash(const ExperimentConfig& cfg) {
  return to_hex(fnv1a64(experiment_config_to_json(cfg).dump()));
}

/// One sweep cell: overrides applied to the base config.
struct SweepCell {
  std::optional<double> alpha;
  std::optional<double> avg_bits;
  std::optional<std::uint32_t> k_hot;
  std::optional<double> similarity;
};

inline std::vector<SweepCell> expand_sweep(const SweepAxes& axes) {
  std::vector<SweepCell> cells{SweepCell{}};
  auto product = [&cells](const auto& axis, auto apply) {
    if (axis.empty()) return;
    std::vector<SweepCell> next;
    next.reserve(cells.size() * axis.size());
    for (const auto& value : axis) {
      for (SweepCell cell : cells) {
        apply(cell, value);
        next.push_back(cell);
      }
    }
    cells = std::move(next);
  };
  // similarity varies slowest so rows over one trace distribution stay adjacent
  product(axes.k_hot, [](SweepCell& c, std::uint32_t v) { c.k_hot = v; });
  product(axes.avg_bits, [](SweepCell& c, double v) { c.avg_bits = v; });
  product(axes.alpha, [](SweepCell& c, double v) { c.alpha = v; });
  product(axes.similarity, [](SweepCell& c, double v) { c.similarity = v; });
  return cells;
}

inline PolicyConfig apply_cell(const PolicyConfig& base, const SweepCell& cell) {
  PolicyConfig p = base;
  if (p.policy == Policy::ours) {
    if (cell.alpha) p.alpha = *cell.alpha;
    if (cell.avg_bits) p.avg_bits = *cell.avg_bits;
  }
  if (p.policy != Policy::gpu_on_demand && cell.k_hot) p.k_hot = *cell.k_hot;
  return p;
}

struct ResultRow {
  PolicyConfig policy;
  SweepCell cell;
  std::optional<double> generator_similarity;  // empty when traces came from a file
  std::optional<std::uint64_t> generator_seed;
  SimReport report;
};

/// Frozen CSV schema (append-only): columns never reorder or disappear.
inline constexpr const char* kResultCsvHeader =
    "policy,bitwidth_mode,avg_bits,k_hot,alpha,similarity,seed,sequences,"
    "e2e_latency,decode_latency,decode_throughput,ndp_latency,migration_bytes,"
    "loss_proxy,mean_similarity";

inline std::string result_rows_to_csv(const std::vector<ResultRow>& rows,
                                      const ModelConfig& model, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += kResultCsvHeader;
  out += '\n';
  for (const auto& row : rows) {
    const PolicyConfig& p = row.policy;
    out += policy_name(p.policy);
    out += ',';
    if (p.policy == Policy::ours) {
      out += p.bitwidth_mode == BitwidthMode::selector ? "selector" : "uniform";
    }
    out += ',';
    if (p.policy == Policy::ours) out += format_double(p.avg_bits);
    out += ',';
    if (p.policy != Policy::gpu_on_demand) out += std::to_string(p.resolve_k_hot(model));
    out += ',';
    if (p.policy == Policy::ours) out += format_double(p.alpha);
    out += ',';
    if (row.generator_similarity) out += format_double(*row.generator_similarity);
    out += ',';
    if (row.generator_seed) out += std::to_string(*row.generator_seed);
    out += ',';
    out += std::to_string(row.report.sequences);
    out += ',';
    out += format_double(row.report.e2e_latency);
    out += ',';
    out += format_double(row.report.decode_latency);
    out += ',';
    out += format_double(row.report.decode_throughput);
    out += ',';
    out += format_double(row.report.ndp_latency);
    out += ',';
    out += std::to_string(row.report.migration_bytes);
    out += ',';
    out += format_double(row.report.loss_proxy);
    out += ',';
    out += format_double(row.report.mean_similarity);
    out += '\n';
  }
  return out;
}

inline nlohmann::json result_rows_to_json(const std::vector<ResultRow>& rows,
                                          const ExperimentConfig& cfg,
                                          bool include_sequences = false) {
  nlohmann::json j;
  j["config_hash"] = experiment_config_hash(cfg);
  j["config"] = experiment_config_to_json(cfg);
  j["results"] = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json r = sim_report_to_json(row.report, include_sequences);
    r["policy_config"] = policy_config_to_json(row.policy);
    if (row.generator_similarity) r["generator_similarity"] = *row.generator_similarity;
    if (row.generator_seed) r["generator_seed"] = *row.generator_seed;
    j["results"].push_back(std::move(r));
  }
  return j;
}

inline unsigned resolve_worker_count(std::optional<unsigned> flag_value) {
  if (flag_value && *flag_value > 0) return *flag_value;
  if (const char* env = std::getenv("MOESIM_WORKERS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? hc : 1;
}

/// Loads the loss table from cfg.loss_path when it was built from exactly
/// the configured (model, params); otherwise rebuilds it (and refreshes the
/// file when a path was configured), so results never depend on stale disk
/// state.
inline LossTable obtain_loss_table(const ExperimentConfig& cfg, bool* built = nullptr) {
  if (built) *built = false;
  if (cfg.loss_path && std::filesystem::exists(*cfg.loss_path)) {
    LossTable table = load_loss_table(*cfg.loss_path);
    if (loss_table_up_to_date(table, cfg.model, cfg.loss_params)) return table;
  }
  LossTable table = build_loss_table(cfg.model, cfg.loss_params);
  if (built) *built = true;
  if (cfg.loss_path) save_loss_table(*cfg.loss_path, table);
  return table;
}

/// Runs every (cell, policy) pair. Cells execute in a worker pool; within a
/// cell, sequences stay ordered so residency is deterministic. Row order is
/// independent of scheduling.
inline std::vector<ResultRow> execute_experiment(const ExperimentConfig& cfg,
                                                 unsigned workers = 1) {
  if (cfg.policies.empty()) throw ValidationError("experiment: policy list is empty");
  cfg.model.validate();
  cfg.hardware.validate();

  const std::vector<SweepCell> cells = expand_sweep(cfg.sweep);
  if (!cfg.sweep.similarity.empty() && cfg.trace_path) {
    throw ValidationError("experiment: a similarity sweep regenerates traces and cannot be "
                          "combined with trace_path");
  }

  const LossTable loss_table = obtain_loss_table(cfg);

  std::vector<SequenceTrace> file_traces;
  if (cfg.trace_path) {
    file_traces = read_traces(*cfg.trace_path, cfg.model);
    if (file_traces.empty()) {
      throw ValidationError(*cfg.trace_path + ": trace file holds no sequences");
    }
  }

  const std::size_t num_policies = cfg.policies.size();
  std::vector<ResultRow> rows(cells.size() * num_policies);

  std::atomic<std::size_t> next_cell{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;

  auto run_cell = [&](std::size_t cell_idx) {
    const SweepCell& cell = cells[cell_idx];
    std::vector<SequenceTrace> generated;
    const std::vector<SequenceTrace>* traces = &file_traces;
    GeneratorParams gen = cfg.generator;
    if (!cfg.trace_path) {
      if (cell.similarity) gen.similarity = *cell.similarity;
      generated = generate_traces(cfg.model, gen);
      traces = &generated;
    }
    const StageStats calibration = aggregate_all_stats(cfg.model, *traces);

    for (std::size_t p = 0; p < num_policies; ++p) {
      const PolicyConfig policy = apply_cell(cfg.policies[p], cell);
      PlacementPlan static_plan;
      const PlacementPlan* static_plan_ptr = nullptr;
      if (policy.policy == Policy::monde_static) {
        static_plan = static_frequency_place(calibration, policy.resolve_k_hot(cfg.model));
        static_plan_ptr = &static_plan;
      }
      ResultRow& row = rows[cell_idx * num_policies + p];
      row.policy = policy;
      row.cell = cell;
      if (!cfg.trace_path) {
        row.generator_similarity = gen.similarity;
        row.generator_seed = gen.seed;
      }
      row.report = simulate(cfg.model, cfg.hardware, *traces, policy, &loss_table,
                            static_plan_ptr);
    }
  };

  const unsigned pool_size =
      std::min<unsigned>(std::max(1u, workers), static_cast<unsigned>(cells.size()));
  if (pool_size <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(pool_size);
    for (unsigned w = 0; w < pool_size; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next_cell.fetch_add(1); i < cells.size();
             i = next_cell.fetch_add(1)) {
          try {
            run_cell(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return rows;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << content;
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace moesim
