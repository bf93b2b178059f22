// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the CLI. Flags override config-file values;
// every command is reproducible from its inputs alone. Exit codes: 0 on
// success, 1 on validation errors, 2 on I/O errors.

#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "moesim/experiment.hpp"

namespace moesim {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

struct GeneratorOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> concentration;
  std::optional<double> similarity;
  std::optional<std::uint32_t> prompt_len;
  std::optional<std::uint32_t> output_len;
  std::optional<std::uint32_t> num_sequences;

  void apply(GeneratorParams& g) const {
    if (seed) g.seed = *seed;
    if (concentration) g.concentration = *concentration;
    if (similarity) g.similarity = *similarity;
    if (prompt_len) g.prompt_len = *prompt_len;
    if (output_len) g.output_len = *output_len;
    if (num_sequences) g.num_sequences = *num_sequences;
    g.validate();
  }
};

struct GenTraceOptions {
  std::optional<std::string> config_path;
  std::optional<std::string> model;  // preset name
  GeneratorOverrides generator;
  std::string out_path;
};

struct BuildLossOptions {
  std::optional<std::string> config_path;
  std::optional<std::string> model;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> calib_tokens;
  std::optional<std::uint32_t> reduced_hidden;
  std::optional<std::uint32_t> reduced_ffn;
  std::string out_path;
  bool force = false;
};

struct RunOptions {
  std::string config_path;
  std::optional<std::string> trace_path;
  std::optional<std::string> loss_path;
  std::optional<std::string> out_json;
  std::optional<std::string> out_csv;
  std::optional<std::string> dump_dir;
  std::optional<unsigned> workers;
  bool per_sequence = false;  // include the per-sequence breakdown in JSON
};

struct ValidateOptions {
  std::string trace_path;
  std::optional<std::string> config_path;
  std::optional<std::string> model;
};

namespace detail {

inline ExperimentConfig load_base_config(const std::optional<std::string>& config_path) {
  if (!config_path) {
    ExperimentConfig cfg;
    cfg.policies.push_back(PolicyConfig{});
    return cfg;
  }
  return experiment_config_from_json(load_json_file(*config_path));
}

}  // namespace detail

inline int cmd_gen_trace(const GenTraceOptions& opt, std::ostream& log) {
  ExperimentConfig cfg = detail::load_base_config(opt.config_path);
  if (opt.model) cfg.model = resolve_model(nlohmann::json(*opt.model));
  opt.generator.apply(cfg.generator);

  const auto traces = generate_traces(cfg.model, cfg.generator);
  write_traces(opt.out_path, make_trace_header(cfg.model), traces);
  log << "wrote " << traces.size() << " sequences (" << cfg.generator.prompt_len << " prefill + "
      << cfg.generator.output_len << " decode tokens each) to " << opt.out_path << "\n";
  return kExitOk;
}

inline int cmd_build_loss(const BuildLossOptions& opt, std::ostream& log) {
  ExperimentConfig cfg = detail::load_base_config(opt.config_path);
  if (opt.model) cfg.model = resolve_model(nlohmann::json(*opt.model));
  if (opt.seed) cfg.loss_params.seed = *opt.seed;
  if (opt.calib_tokens) cfg.loss_params.calib_tokens = *opt.calib_tokens;
  if (opt.reduced_hidden) cfg.loss_params.reduced_hidden = *opt.reduced_hidden;
  if (opt.reduced_ffn) cfg.loss_params.reduced_ffn = *opt.reduced_ffn;
  cfg.loss_params.validate();

  if (!opt.force && std::filesystem::exists(opt.out_path)) {
    const LossTable existing = load_loss_table(opt.out_path);
    if (loss_table_up_to_date(existing, cfg.model, cfg.loss_params)) {
      log << opt.out_path << " is up to date (model hash " << existing.model_hash << ")\n";
      return kExitOk;
    }
  }
  const LossTable table = build_loss_table(cfg.model, cfg.loss_params);
  save_loss_table(opt.out_path, table);
  log << "built loss table for " << cfg.model.name << " (" << table.num_layers << " layers x "
      << table.num_experts << " experts, seed " << table.seed << ") -> " << opt.out_path << "\n";
  return kExitOk;
}

namespace detail {

inline void apply_run_overrides(ExperimentConfig& cfg, const RunOptions& opt) {
  if (opt.trace_path) cfg.trace_path = *opt.trace_path;
  if (opt.loss_path) cfg.loss_path = *opt.loss_path;
  if (opt.out_json) cfg.out_json = *opt.out_json;
  if (opt.out_csv) cfg.out_csv = *opt.out_csv;
}

inline void dump_first_sequence_plans(const ExperimentConfig& cfg, const std::string& dir,
                                      std::ostream& log) {
  std::filesystem::create_directories(dir);
  std::vector<SequenceTrace> traces;
  if (cfg.trace_path) {
    traces = read_traces(*cfg.trace_path, cfg.model);
  } else {
    GeneratorParams one = cfg.generator;
    one.num_sequences = 1;
    traces = generate_traces(cfg.model, one);
  }
  if (traces.empty()) return;
  const LossTable table = obtain_loss_table(cfg);
  for (std::size_t i = 0; i < cfg.policies.size(); ++i) {
    const PolicyConfig& p = cfg.policies[i];
    if (p.policy != Policy::ours) continue;
    const StageStats stats = collect_stats(cfg.model, traces.front().prefill);
    const ImportanceScores scores = importance(stats, p.alpha);
    const PlacementPlan plan = place(scores, p.resolve_k_hot(cfg.model));
    const BitwidthPlan bits = p.bitwidth_mode == BitwidthMode::selector
                                  ? assign_bitwidths(scores, plan, table, p.avg_bits)
                                  : uniform_bitwidths(plan, cfg.model.num_experts, p.avg_bits);
    const std::string prefix = dir + "/policy" + std::to_string(i) + "_";
    write_importance_csv(prefix + "importance.csv", stats, scores);
    write_plan_csv(prefix + "placement.csv", plan);
    write_bitwidths_csv(prefix + "bitwidths.csv", bits);
    log << "dumped per-layer plans for policy " << i << " to " << prefix << "*.csv\n";
  }
}

inline int run_experiment_command(const RunOptions& opt, bool allow_sweep, std::ostream& log) {
  ExperimentConfig cfg = experiment_config_from_json(load_json_file(opt.config_path));
  apply_run_overrides(cfg, opt);
  if (!allow_sweep && !cfg.sweep.empty()) {
    throw ValidationError("config declares sweep axes; use the sweep command");
  }

  const unsigned workers = resolve_worker_count(opt.workers);
  const std::vector<ResultRow> rows = execute_experiment(cfg, workers);
  const std::string config_hash = experiment_config_hash(cfg);

  const std::string csv = result_rows_to_csv(rows, cfg.model, config_hash);
  if (cfg.out_csv) {
    write_text_file(*cfg.out_csv, csv);
    log << "wrote " << rows.size() << " rows to " << *cfg.out_csv << "\n";
  } else {
    log << csv;
  }
  if (cfg.out_json) {
    write_text_file(*cfg.out_json,
                    result_rows_to_json(rows, cfg, opt.per_sequence).dump(2) + "\n");
    log << "wrote report to " << *cfg.out_json << "\n";
  }
  if (opt.dump_dir) dump_first_sequence_plans(cfg, *opt.dump_dir, log);
  return kExitOk;
}

}  // namespace detail

inline int cmd_run(const RunOptions& opt, std::ostream& log) {
  return detail::run_experiment_command(opt, /*allow_sweep=*/false, log);
}

inline int cmd_sweep(const RunOptions& opt, std::ostream& log) {
  return detail::run_experiment_command(opt, /*allow_sweep=*/true, log);
}

inline int cmd_validate(const ValidateOptions& opt, std::ostream& log) {
  std::optional<ModelConfig> model;
  if (opt.config_path) {
    model = experiment_config_from_json(load_json_file(*opt.config_path)).model;
  }
  if (opt.model) model = resolve_model(nlohmann::json(*opt.model));

  if (model) {
    const auto traces = read_traces(opt.trace_path, *model);
    log << opt.trace_path << ": OK, " << traces.size() << " sequences match " << model->name
        << "\n";
    return kExitOk;
  }
  const TraceFile file = read_traces(opt.trace_path);
  if (file.header) {
    log << opt.trace_path << ": OK, " << file.sequences.size() << " sequences (header model "
        << file.header->model << ", L=" << file.header->num_layers
        << ", E=" << file.header->num_experts << ", k=" << file.header->top_k << ")\n";
  } else {
    log << opt.trace_path << ": OK, empty trace file\n";
  }
  return kExitOk;
}

/// Maps exceptions from a command body onto the documented exit codes.
template <typename Fn>
int run_command(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace moesim
