// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// moesim CLI: generate routing traces, build quantization loss tables, run
// policies on a workload, sweep parameter grids, validate trace files.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "moesim/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Trace-driven simulator for MoE decoding on a GPU + NDP system"};
  app.require_subcommand(1);

  moesim::GenTraceOptions gen_opt;
  auto* gen = app.add_subcommand("gen-trace", "Generate a synthetic routing-trace file");
  gen->add_option("--config", gen_opt.config_path, "Experiment config JSON");
  gen->add_option("--model", gen_opt.model, "Model preset (mixtral-8x7b, mixtral-8x22b)");
  gen->add_option("--seed", gen_opt.generator.seed, "Generator seed");
  gen->add_option("--concentration", gen_opt.generator.concentration,
                  "Dirichlet concentration (smaller = more skew)");
  gen->add_option("--similarity", gen_opt.generator.similarity,
                  "Prefill->decode mixing weight in [0,1]");
  gen->add_option("--prompt-len", gen_opt.generator.prompt_len, "Prefill tokens per sequence");
  gen->add_option("--output-len", gen_opt.generator.output_len, "Decode tokens per sequence");
  gen->add_option("--num-sequences", gen_opt.generator.num_sequences, "Number of sequences");
  gen->add_option("--out", gen_opt.out_path, "Output trace file (JSON Lines)")->required();

  moesim::BuildLossOptions loss_opt;
  auto* loss = app.add_subcommand("build-loss", "Build the per-expert quantization loss table");
  loss->add_option("--config", loss_opt.config_path, "Experiment config JSON");
  loss->add_option("--model", loss_opt.model, "Model preset");
  loss->add_option("--seed", loss_opt.seed, "Calibration seed");
  loss->add_option("--calib-tokens", loss_opt.calib_tokens, "Calibration inputs per expert");
  loss->add_option("--reduced-hidden", loss_opt.reduced_hidden, "Synthetic expert hidden dim");
  loss->add_option("--reduced-ffn", loss_opt.reduced_ffn, "Synthetic expert ffn dim");
  loss->add_option("--out", loss_opt.out_path, "Output loss-table JSON")->required();
  loss->add_flag("--force", loss_opt.force, "Rebuild even if the file is up to date");

  moesim::RunOptions run_opt;
  auto* run = app.add_subcommand("run", "Simulate all configured policies once");
  run->add_option("--config", run_opt.config_path, "Experiment config JSON")->required();
  run->add_option("--trace", run_opt.trace_path, "Trace file (overrides config)");
  run->add_option("--loss", run_opt.loss_path, "Loss-table file (overrides config)");
  run->add_option("--out-json", run_opt.out_json, "Report JSON path");
  run->add_option("--out-csv", run_opt.out_csv, "Report CSV path");
  run->add_option("--dump-dir", run_opt.dump_dir, "Dump first-sequence plan CSVs here");
  run->add_option("--workers", run_opt.workers, "Worker threads (or MOESIM_WORKERS)");
  run->add_flag("--per-seq", run_opt.per_sequence,
                "Include the per-sequence breakdown in the JSON report");

  moesim::RunOptions sweep_opt;
  auto* sweep = app.add_subcommand("sweep", "Run the full sweep grid from the config");
  sweep->add_option("--config", sweep_opt.config_path, "Experiment config JSON")->required();
  sweep->add_option("--trace", sweep_opt.trace_path, "Trace file (overrides config)");
  sweep->add_option("--loss", sweep_opt.loss_path, "Loss-table file (overrides config)");
  sweep->add_option("--out-json", sweep_opt.out_json, "Report JSON path");
  sweep->add_option("--out-csv", sweep_opt.out_csv, "Report CSV path");
  sweep->add_option("--workers", sweep_opt.workers, "Worker threads (or MOESIM_WORKERS)");

  moesim::ValidateOptions val_opt;
  auto* val = app.add_subcommand("validate", "Validate a trace file");
  val->add_option("--trace", val_opt.trace_path, "Trace file to validate")->required();
  val->add_option("--config", val_opt.config_path, "Experiment config JSON to check against");
  val->add_option("--model", val_opt.model, "Model preset to check against");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? moesim::kExitOk : moesim::kExitValidation;
  }

  return moesim::run_command([&]() -> int {
    if (gen->parsed()) return moesim::cmd_gen_trace(gen_opt, std::cout);
    if (loss->parsed()) return moesim::cmd_build_loss(loss_opt, std::cout);
    if (run->parsed()) return moesim::cmd_run(run_opt, std::cout);
    if (sweep->parsed()) return moesim::cmd_sweep(sweep_opt, std::cout);
    if (val->parsed()) return moesim::cmd_validate(val_opt, std::cout);
    return moesim::kExitValidation;
  });
}
