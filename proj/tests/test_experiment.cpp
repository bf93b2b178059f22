// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "moesim/commands.hpp"
#include "moesim/experiment.hpp"
#include "test_util.hpp"

using namespace moesim;

namespace {

nlohmann::json base_config_json() {
  return nlohmann::json{
      {"model", "mixtral-8x7b"},
      {"hardware", "default"},
      {"generator",
       {{"seed", 5}, {"concentration", 0.3}, {"similarity", 0.9}, {"prompt_len", 8},
        {"output_len", 8}, {"num_sequences", 4}}},
      {"policies",
       {{{"policy", "ours"}, {"avg_bits", 3.0}},
        {{"policy", "ours"}, {"avg_bits", 2.0}},
        {{"policy", "monde_static"}},
        {{"policy", "gpu_on_demand"}}}},
      {"loss_table",
       {{"seed", 7}, {"calib_tokens", 2}, {"reduced_hidden", 8}, {"reduced_ffn", 16}}}};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("experiment config parsing enforces the schema", "[experiment]") {
  const ExperimentConfig cfg = experiment_config_from_json(base_config_json());
  CHECK(cfg.model.name == "mixtral-8x7b");
  CHECK(cfg.policies.size() == 4);

  nlohmann::json no_policies = base_config_json();
  no_policies["policies"] = nlohmann::json::array();
  CHECK_THROWS_AS(experiment_config_from_json(no_policies), ValidationError);

  nlohmann::json unknown = base_config_json();
  unknown["modle"] = "typo";
  CHECK_THROWS_AS(experiment_config_from_json(unknown), ValidationError);

  nlohmann::json empty_axis = base_config_json();
  empty_axis["sweep"] = {{"avg_bits", nlohmann::json::array()}};
  CHECK_THROWS_AS(experiment_config_from_json(empty_axis), ValidationError);
}

TEST_CASE("policy JSON only accepts fields relevant to the policy", "[experiment]") {
  CHECK_THROWS_AS(
      policy_config_from_json(nlohmann::json{{"policy", "monde_static"}, {"avg_bits", 3.0}}),
      ValidationError);
  CHECK_THROWS_AS(
      policy_config_from_json(nlohmann::json{{"policy", "gpu_on_demand"}, {"alpha", 0.5}}),
      ValidationError);
  CHECK_THROWS_AS(policy_config_from_json(nlohmann::json{{"policy", "cpu_offload"}}),
                  ValidationError);
  CHECK_THROWS_AS(
      policy_config_from_json(nlohmann::json{{"policy", "ours"}, {"bitwidth_mode", "magic"}}),
      ValidationError);

  const PolicyConfig p = policy_config_from_json(
      nlohmann::json{{"policy", "ours"}, {"bitwidth_mode", "uniform"}, {"k_hot", 2}});
  CHECK(p.bitwidth_mode == BitwidthMode::uniform);
  REQUIRE(p.k_hot.has_value());
  CHECK(*p.k_hot == 2);
}

TEST_CASE("a run produces one frozen-schema row per policy", "[experiment]") {
  const ExperimentConfig cfg = experiment_config_from_json(base_config_json());
  const auto rows = execute_experiment(cfg, 1);
  REQUIRE(rows.size() == 4);

  const std::string csv = result_rows_to_csv(rows, cfg.model, experiment_config_hash(cfg));
  std::istringstream lines(csv);
  std::string comment, header;
  std::getline(lines, comment);
  std::getline(lines, header);
  CHECK(comment.rfind("# config_hash=", 0) == 0);
  CHECK(header ==
        "policy,bitwidth_mode,avg_bits,k_hot,alpha,similarity,seed,sequences,"
        "e2e_latency,decode_latency,decode_throughput,ndp_latency,migration_bytes,"
        "loss_proxy,mean_similarity");
  int data_rows = 0;
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty()) ++data_rows;
  }
  CHECK(data_rows == 4);

  // A tighter NDP budget cannot lower decode throughput.
  CHECK(rows[1].report.decode_throughput >= rows[0].report.decode_throughput);

  const nlohmann::json j = result_rows_to_json(rows, cfg);
  CHECK(j.contains("config_hash"));
  CHECK(j["config"]["model"]["name"] == "mixtral-8x7b");
  CHECK(j["results"].size() == 4);
}

TEST_CASE("sweeps expand the cartesian grid deterministically", "[experiment]") {
  nlohmann::json j = base_config_json();
  j["policies"] = {{{"policy", "ours"}, {"bitwidth_mode", "selector"}},
                   {{"policy", "ours"}, {"bitwidth_mode", "uniform"}}};
  j["sweep"] = {{"avg_bits", {2.0, 3.0}}};
  const ExperimentConfig cfg = experiment_config_from_json(j);
  const auto rows = execute_experiment(cfg, 2);
  REQUIRE(rows.size() == 4);  // 2 avg_bits x {selector, uniform}
  for (const auto& row : rows) {
    CHECK(row.policy.policy == Policy::ours);
    REQUIRE(row.cell.avg_bits.has_value());
  }
  CHECK(rows[0].cell.avg_bits == 2.0);
  CHECK(rows[2].cell.avg_bits == 3.0);

  // Selector never loses to uniform on the loss proxy at matching budgets.
  CHECK(rows[0].report.loss_proxy <= rows[1].report.loss_proxy + 1e-12);

  // Single-point axes reduce to a plain run.
  nlohmann::json single = base_config_json();
  single["sweep"] = {{"avg_bits", {3.0}}};
  const auto single_rows = execute_experiment(experiment_config_from_json(single), 1);
  const auto run_rows = execute_experiment(experiment_config_from_json(base_config_json()), 1);
  REQUIRE(single_rows.size() == run_rows.size());
  CHECK(single_rows[0].report.e2e_latency == run_rows[0].report.e2e_latency);
}

TEST_CASE("sweep results do not depend on the worker count", "[experiment]") {
  nlohmann::json j = base_config_json();
  j["sweep"] = {{"avg_bits", {2.0, 3.0}}, {"alpha", {0.0, 0.5, 1.0}}};
  const ExperimentConfig cfg = experiment_config_from_json(j);
  const auto serial = execute_experiment(cfg, 1);
  const auto parallel = execute_experiment(cfg, 4);
  REQUIRE(serial.size() == parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].report.e2e_latency == parallel[i].report.e2e_latency);
    CHECK(serial[i].report.loss_proxy == parallel[i].report.loss_proxy);
    CHECK(policy_name(serial[i].policy.policy) == policy_name(parallel[i].policy.policy));
  }
}

TEST_CASE("similarity sweeps regenerate traces and report rising similarity", "[experiment]") {
  nlohmann::json j = base_config_json();
  j["policies"] = {{{"policy", "ours"}}};
  j["generator"]["num_sequences"] = 12;
  j["generator"]["prompt_len"] = 32;
  j["generator"]["output_len"] = 16;
  j["sweep"] = {{"similarity", {0.0, 0.5, 0.9}}};
  const auto rows = execute_experiment(experiment_config_from_json(j), 2);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].report.mean_similarity < rows[1].report.mean_similarity);
  CHECK(rows[1].report.mean_similarity < rows[2].report.mean_similarity);

  // Sweeping similarity requires generated traces.
  j["trace_path"] = "whatever.jsonl";
  CHECK_THROWS_AS(execute_experiment(experiment_config_from_json(j), 1), ValidationError);
}

TEST_CASE("a cached loss table is rebuilt when its provenance mismatches", "[experiment]") {
  TempFile loss_file("exp_loss_cache_test.json");
  nlohmann::json j = base_config_json();
  j["loss_table"]["path"] = loss_file.path;
  ExperimentConfig cfg = experiment_config_from_json(j);

  bool built = false;
  const LossTable first = obtain_loss_table(cfg, &built);
  CHECK(built);
  obtain_loss_table(cfg, &built);
  CHECK_FALSE(built);  // same provenance: reused from disk

  // A different calibration seed must not silently reuse the stale file.
  cfg.loss_params.seed = 1234;
  const LossTable rebuilt = obtain_loss_table(cfg, &built);
  CHECK(built);
  CHECK(rebuilt.seed == 1234);
  CHECK(load_loss_table(loss_file.path).seed == 1234);
  CHECK_FALSE(rebuilt.rows == first.rows);
}

TEST_CASE("worker count resolution prefers flag over environment", "[experiment]") {
  setenv("MOESIM_WORKERS", "3", 1);
  CHECK(resolve_worker_count(std::nullopt) == 3);
  CHECK(resolve_worker_count(7) == 7);
  unsetenv("MOESIM_WORKERS");
  CHECK(resolve_worker_count(std::nullopt) >= 1);
}

TEST_CASE("gen-trace writes a reproducible, valid file", "[experiment][cli]") {
  TempFile out("cli_gen_test.jsonl");
  TempFile out2("cli_gen_test2.jsonl");
  GenTraceOptions opt;
  opt.model = "mixtral-8x7b";
  opt.generator.seed = 5;
  opt.generator.prompt_len = 4;
  opt.generator.output_len = 4;
  opt.generator.num_sequences = 2;
  opt.out_path = out.path;
  std::ostringstream log;
  REQUIRE(cmd_gen_trace(opt, log) == kExitOk);

  std::ifstream in(out.path);
  std::string header;
  std::getline(in, header);
  CHECK(header == R"({"model":"mixtral-8x7b","L":32,"E":8,"k":2})");

  // Same seed, byte-identical file.
  opt.out_path = out2.path;
  REQUIRE(cmd_gen_trace(opt, log) == kExitOk);
  CHECK(slurp(out.path) == slurp(out2.path));

  ValidateOptions vopt;
  vopt.trace_path = out.path;
  vopt.model = "mixtral-8x7b";
  CHECK(cmd_validate(vopt, log) == kExitOk);

  // Zero sequences produce a header-only file that still validates.
  opt.generator.num_sequences = 0;
  opt.out_path = out.path;
  REQUIRE(cmd_gen_trace(opt, log) == kExitOk);
  CHECK(slurp(out.path) == header + "\n");
  CHECK(cmd_validate(vopt, log) == kExitOk);
}

TEST_CASE("build-loss caches by content hash", "[experiment][cli]") {
  TempFile out("cli_loss_test.json");
  BuildLossOptions opt;
  opt.model = "mixtral-8x7b";
  opt.seed = 7;
  opt.calib_tokens = 2;
  opt.reduced_hidden = 8;
  opt.reduced_ffn = 16;
  opt.out_path = out.path;
  std::ostringstream log;
  REQUIRE(cmd_build_loss(opt, log) == kExitOk);
  const std::string first = slurp(out.path);

  // Second invocation is a no-op.
  std::ostringstream log2;
  REQUIRE(cmd_build_loss(opt, log2) == kExitOk);
  CHECK(log2.str().find("up to date") != std::string::npos);
  CHECK(slurp(out.path) == first);

  // A different seed rebuilds.
  opt.seed = 8;
  std::ostringstream log3;
  REQUIRE(cmd_build_loss(opt, log3) == kExitOk);
  CHECK(log3.str().find("built loss table") != std::string::npos);
}

TEST_CASE("run command emits reports and honors exit codes", "[experiment][cli]") {
  TempFile cfg_file("cli_run_cfg.json");
  TempFile csv_file("cli_run_out.csv");
  TempFile json_file("cli_run_out.json");
  {
    std::ofstream f(cfg_file.path);
    f << base_config_json().dump(2);
  }
  RunOptions opt;
  opt.config_path = cfg_file.path;
  opt.out_csv = csv_file.path;
  opt.out_json = json_file.path;
  opt.workers = 1;
  std::ostringstream log;
  REQUIRE(cmd_run(opt, log) == kExitOk);

  const std::string csv = slurp(csv_file.path);
  CHECK(csv.find("ours,selector,3,") != std::string::npos);
  CHECK(csv.find("monde_static") != std::string::npos);
  CHECK(csv.find("gpu_on_demand") != std::string::npos);

  const nlohmann::json report = nlohmann::json::parse(slurp(json_file.path));
  CHECK(report["results"].size() == 4);

  // Sweep axes in a run config are a validation error (exit 1).
  {
    nlohmann::json j = base_config_json();
    j["sweep"] = {{"avg_bits", {2.0, 3.0}}};
    std::ofstream f(cfg_file.path);
    f << j.dump(2);
  }
  CHECK(run_command([&] { return cmd_run(opt, log); }, log) == kExitValidation);

  // Missing config file is an I/O error (exit 2).
  RunOptions missing;
  missing.config_path = "no_such_config.json";
  CHECK(run_command([&] { return cmd_run(missing, log); }, log) == kExitIo);
}

TEST_CASE("validate rejects corrupted files with exit code 1", "[experiment][cli]") {
  TempFile bad("cli_bad_trace.jsonl");
  {
    std::ofstream f(bad.path);
    f << R"({"model":"mixtral-8x7b","L":32,"E":8,"k":2})" << "\n";
    f << "{broken\n";
  }
  ValidateOptions opt;
  opt.trace_path = bad.path;
  std::ostringstream log;
  CHECK(run_command([&] { return cmd_validate(opt, log); }, log) == kExitValidation);

  ValidateOptions missing;
  missing.trace_path = "no_such_trace.jsonl";
  CHECK(run_command([&] { return cmd_validate(missing, log); }, log) == kExitIo);
}
