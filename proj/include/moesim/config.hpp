// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Model geometry and device parameters. Every cost formula in the simulator
// is derived from the counts and rates defined here.

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "moesim/core.hpp"

namespace moesim {

/// Geometry of one MoE model: each of the `num_layers` MoE layers holds
/// `num_experts` expert FFNs of `matrices_per_expert` weight matrices with
/// shape (hidden_dim x ffn_dim); the router activates `top_k` per token.
struct ModelConfig {
  std::string name = "unnamed";
  std::uint32_t hidden_dim = 0;
  std::uint32_t ffn_dim = 0;
  std::uint32_t num_layers = 0;
  std::uint32_t num_experts = 0;
  std::uint32_t top_k = 0;
  std::uint32_t matrices_per_expert = 3;  // gate / up / down projections

  void validate() const {
    if (hidden_dim < 1 || ffn_dim < 1 || num_layers < 1 || num_experts < 1 ||
        matrices_per_expert < 1) {
      throw ValidationError("model config: all dimensions must be >= 1");
    }
    if (top_k < 1 || top_k > num_experts) {
      throw ValidationError("model config: top_k must be in [1, num_experts]");
    }
  }
};

/// Parameters of one expert FFN.
inline std::uint64_t expert_param_count(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.matrices_per_expert) * c.hidden_dim * c.ffn_dim;
}

/// Parameters of all experts across all layers.
inline std::uint64_t total_expert_params(const ModelConfig& c) {
  return expert_param_count(c) * c.num_experts * c.num_layers;
}

/// Byte size of one expert stored at `bits` per weight. Valid bitwidths are
/// the NDP replica set {1,2,3,4} and the full-precision width `fp_bits`.
inline std::uint64_t expert_bytes(const ModelConfig& c, std::uint32_t bits,
                                  std::uint32_t fp_bits = 16) {
  if (!((bits >= 1 && bits <= 4) || bits == fp_bits)) {
    throw ValidationError("expert_bytes: bits must be in {1,2,3,4} or equal fp_bits (" +
                          std::to_string(fp_bits) + "), got " + std::to_string(bits));
  }
  return (expert_param_count(c) * bits + 7) / 8;
}

/// Device rates for the GPU + NDP system. Bandwidths are bytes/s, compute
/// is FLOP/s, clock is Hz.
///
/// The NDP MAC arrays are modeled as precision scalable: effective
/// throughput at b-bit operands is 2 * ndp_macs * ndp_clock * (fp_bits / b).
/// Quantizing an NDP-resident expert therefore relieves both the weight
/// traffic and the compute pressure, which keeps single-token decode
/// bandwidth-bound at every supported bitwidth under the default rates.
struct HardwareConfig {
  double gpu_hbm_bandwidth = 3.35e12;  // H100 HBM3
  double gpu_peak_flops = 989.4e12;
  double pcie_bandwidth = 32e9;  // PCIe Gen4 x16, unidirectional
  double ndp_bandwidth = 512e9;
  std::uint32_t ndp_macs = 1024;  // 64 x (4x4 systolic arrays)
  double ndp_clock = 1e9;
  std::uint32_t fp_bytes = 2;  // FP16 full precision
  double nonexpert_layer_time = 0.0;  // seconds per (layer, token) outside experts

  std::uint32_t fp_bits() const { return 8 * fp_bytes; }

  /// NDP FLOP/s at full precision.
  double ndp_compute_throughput() const { return 2.0 * ndp_macs * ndp_clock; }

  /// NDP FLOP/s on b-bit operands (precision-scalable arrays).
  double ndp_compute_throughput(std::uint32_t bits) const {
    return ndp_compute_throughput() * static_cast<double>(fp_bits()) / static_cast<double>(bits);
  }

  void validate() const {
    if (!(gpu_hbm_bandwidth > 0) || !(gpu_peak_flops > 0) || !(pcie_bandwidth > 0) ||
        !(ndp_bandwidth > 0) || ndp_macs < 1 || !(ndp_clock > 0)) {
      throw ValidationError("hardware config: all rates must be strictly positive");
    }
    if (fp_bytes < 1) throw ValidationError("hardware config: fp_bytes must be >= 1");
    if (nonexpert_layer_time < 0) {
      throw ValidationError("hardware config: nonexpert_layer_time must be >= 0");
    }
  }
};

inline ModelConfig mixtral_8x7b() {
  return ModelConfig{"mixtral-8x7b", 4096, 14336, 32, 8, 2, 3};
}

inline ModelConfig mixtral_8x22b() {
  return ModelConfig{"mixtral-8x22b", 6144, 16384, 56, 8, 2, 3};
}

inline HardwareConfig default_hardware() { return HardwareConfig{}; }

/// Per-layer GPU expert budget used when a run does not set one explicitly.
inline std::uint32_t default_k_hot(const ModelConfig& c) {
  if (c.name == "mixtral-8x22b") return 2;
  std::uint32_t half = c.num_experts / 2;
  return half < 1 ? 1 : (half > 4 ? 4 : half);
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& known,
                                const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key())) {
      throw ValidationError(context + ": unknown key \"" + it.key() + "\"");
    }
  }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) {
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(std::string("invalid value for key \"") + key + "\"");
    }
  }
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw ValidationError("model config: expected a JSON object");
  detail::reject_unknown_keys(obj,
                              {"name", "hidden_dim", "ffn_dim", "num_layers", "num_experts",
                               "top_k", "matrices_per_expert"},
                              "model config");
  ModelConfig c;
  detail::read_field(obj, "name", c.name);
  detail::read_field(obj, "hidden_dim", c.hidden_dim);
  detail::read_field(obj, "ffn_dim", c.ffn_dim);
  detail::read_field(obj, "num_layers", c.num_layers);
  detail::read_field(obj, "num_experts", c.num_experts);
  detail::read_field(obj, "top_k", c.top_k);
  detail::read_field(obj, "matrices_per_expert", c.matrices_per_expert);
  c.validate();
  return c;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"name", c.name},
                        {"hidden_dim", c.hidden_dim},
                        {"ffn_dim", c.ffn_dim},
                        {"num_layers", c.num_layers},
                        {"num_experts", c.num_experts},
                        {"top_k", c.top_k},
                        {"matrices_per_expert", c.matrices_per_expert}};
}

inline HardwareConfig hardware_config_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw ValidationError("hardware config: expected a JSON object");
  detail::reject_unknown_keys(obj,
                              {"gpu_hbm_bandwidth", "gpu_peak_flops", "pcie_bandwidth",
                               "ndp_bandwidth", "ndp_macs", "ndp_clock", "fp_bytes",
                               "nonexpert_layer_time"},
                              "hardware config");
  HardwareConfig h;
  detail::read_field(obj, "gpu_hbm_bandwidth", h.gpu_hbm_bandwidth);
  detail::read_field(obj, "gpu_peak_flops", h.gpu_peak_flops);
  detail::read_field(obj, "pcie_bandwidth", h.pcie_bandwidth);
  detail::read_field(obj, "ndp_bandwidth", h.ndp_bandwidth);
  detail::read_field(obj, "ndp_macs", h.ndp_macs);
  detail::read_field(obj, "ndp_clock", h.ndp_clock);
  detail::read_field(obj, "fp_bytes", h.fp_bytes);
  detail::read_field(obj, "nonexpert_layer_time", h.nonexpert_layer_time);
  h.validate();
  return h;
}

inline nlohmann::json hardware_config_to_json(const HardwareConfig& h) {
  return nlohmann::json{{"gpu_hbm_bandwidth", h.gpu_hbm_bandwidth},
                        {"gpu_peak_flops", h.gpu_peak_flops},
                        {"pcie_bandwidth", h.pcie_bandwidth},
                        {"ndp_bandwidth", h.ndp_bandwidth},
                        {"ndp_macs", h.ndp_macs},
                        {"ndp_clock", h.ndp_clock},
                        {"fp_bytes", h.fp_bytes},
                        {"nonexpert_layer_time", h.nonexpert_layer_time}};
}

/// Resolves a model reference: either a preset name or an inline object.
inline ModelConfig resolve_model(const nlohmann::json& ref) {
  if (ref.is_string()) {
    const std::string name = ref.get<std::string>();
    if (name == "mixtral-8x7b") return mixtral_8x7b();
    if (name == "mixtral-8x22b") return mixtral_8x22b();
    throw ValidationError("unknown model preset \"" + name +
                          "\" (known: mixtral-8x7b, mixtral-8x22b)");
  }
  return model_config_from_json(ref);
}

inline HardwareConfig resolve_hardware(const nlohmann::json& ref) {
  if (ref.is_string()) {
    const std::string name = ref.get<std::string>();
    if (name == "default" || name == "h100-ndp") return default_hardware();
    throw ValidationError("unknown hardware preset \"" + name + "\" (known: h100-ndp, default)");
  }
  return hardware_config_from_json(ref);
}

/// Stable fingerprint of a model config (used to key loss-table files).
inline std::string model_config_hash(const ModelConfig& c) {
  return to_hex(fnv1a64(model_config_to_json(c).dump()));
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace moesim
