// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Routing traces: per-token, per-layer top-k expert selections with routing
// scores, split into a prefill stage and a decode stage. Includes a JSON
// Lines file format with a model header and a synthetic generator with
// controllable expert skew and prefill->decode similarity.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moesim/config.hpp"
#include "moesim/core.hpp"
#include "moesim/rng.hpp"

namespace moesim {

struct ExpertSelection {
  std::uint32_t expert = 0;
  double score = 0.0;
  bool operator==(const ExpertSelection&) const = default;
};

/// Routing decisions of a single token: exactly top_k (expert, score) pairs
/// for each of the num_layers MoE layers, stored flat in layer-major order.
class TokenRouting {
 public:
  TokenRouting() = default;
  TokenRouting(std::uint32_t num_layers, std::uint32_t top_k)
      : num_layers_(num_layers),
        top_k_(top_k),
        selections_(static_cast<std::size_t>(num_layers) * top_k) {}

  std::span<ExpertSelection> layer(std::uint32_t l) {
    return {selections_.data() + static_cast<std::size_t>(l) * top_k_, top_k_};
  }
  std::span<const ExpertSelection> layer(std::uint32_t l) const {
    return {selections_.data() + static_cast<std::size_t>(l) * top_k_, top_k_};
  }

  std::uint32_t num_layers() const { return num_layers_; }
  std::uint32_t top_k() const { return top_k_; }

  bool operator==(const TokenRouting&) const = default;

 private:
  std::uint32_t num_layers_ = 0;
  std::uint32_t top_k_ = 0;
  std::vector<ExpertSelection> selections_;
};

struct SequenceTrace {
  std::string seq_id;
  std::vector<TokenRouting> prefill;
  std::vector<TokenRouting> decode;
  bool operator==(const SequenceTrace&) const = default;
};

/// First line of a trace file; readers verify it against the active model.
struct TraceHeader {
  std::string model;
  std::uint32_t num_layers = 0;
  std::uint32_t num_experts = 0;
  std::uint32_t top_k = 0;
  bool operator==(const TraceHeader&) const = default;
};

inline TraceHeader make_trace_header(const ModelConfig& c) {
  return TraceHeader{c.name, c.num_layers, c.num_experts, c.top_k};
}

struct TraceFile {
  std::optional<TraceHeader> header;
  std::vector<SequenceTrace> sequences;
};

struct GeneratorParams {
  std::uint64_t seed = 0;
  // Dirichlet concentration of the per-(sequence, layer) expert probability
  // vectors; smaller values concentrate routing mass on fewer experts.
  double concentration = 0.3;
  // Mixing weight between a sequence's prefill distribution and an
  // independent drift distribution for its decode stage. 1 reuses the
  // prefill distribution unchanged, 0 decodes from the drift alone.
  double similarity = 0.9;
  std::uint32_t prompt_len = 128;
  std::uint32_t output_len = 128;
  std::uint32_t num_sequences = 1;

  void validate() const {
    if (!(concentration > 0)) throw ValidationError("generator: concentration must be > 0");
    if (similarity < 0.0 || similarity > 1.0) {
      throw ValidationError("generator: similarity must be in [0, 1]");
    }
    if (prompt_len < 1 || output_len < 1) {
      throw ValidationError("generator: prompt_len and output_len must be >= 1");
    }
  }
};

inline GeneratorParams generator_params_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw ValidationError("generator config: expected a JSON object");
  detail::reject_unknown_keys(
      obj, {"seed", "concentration", "similarity", "prompt_len", "output_len", "num_sequences"},
      "generator config");
  GeneratorParams g;
  detail::read_field(obj, "seed", g.seed);
  detail::read_field(obj, "concentration", g.concentration);
  detail::read_field(obj, "similarity", g.similarity);
  detail::read_field(obj, "prompt_len", g.prompt_len);
  detail::read_field(obj, "output_len", g.output_len);
  detail::read_field(obj, "num_sequences", g.num_sequences);
  g.validate();
  return g;
}

inline nlohmann::json generator_params_to_json(const GeneratorParams& g) {
  return nlohmann::json{{"seed", g.seed},
                        {"concentration", g.concentration},
                        {"similarity", g.similarity},
                        {"prompt_len", g.prompt_len},
                        {"output_len", g.output_len},
                        {"num_sequences", g.num_sequences}};
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_token(const TokenRouting& token, const ModelConfig& c,
                           const std::string& context) {
  if (token.num_layers() != c.num_layers || token.top_k() != c.top_k) {
    throw ValidationError(context + ": expected " + std::to_string(c.num_layers) + " layers x " +
                          std::to_string(c.top_k) + " selections, got " +
                          std::to_string(token.num_layers()) + " x " +
                          std::to_string(token.top_k()));
  }
  for (std::uint32_t l = 0; l < token.num_layers(); ++l) {
    auto sel = token.layer(l);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      if (sel[i].expert >= c.num_experts) {
        throw ValidationError(context + " layer " + std::to_string(l) + ": expert_id " +
                              std::to_string(sel[i].expert) + " out of range [0, " +
                              std::to_string(c.num_experts) + ")");
      }
      if (!(sel[i].score > 0.0) || sel[i].score > 1.0) {
        throw ValidationError(context + " layer " + std::to_string(l) +
                              ": routing score must be in (0, 1], got " +
                              format_double(sel[i].score));
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (sel[j].expert == sel[i].expert) {
          throw ValidationError(context + " layer " + std::to_string(l) +
                                ": duplicate expert_id " + std::to_string(sel[i].expert));
        }
      }
    }
  }
}

inline void validate_sequence(const SequenceTrace& seq, const ModelConfig& c) {
  if (seq.prefill.empty()) {
    throw ValidationError("sequence \"" + seq.seq_id + "\": prefill stage must be nonempty");
  }
  if (seq.decode.empty()) {
    throw ValidationError("sequence \"" + seq.seq_id + "\": decode stage must be nonempty");
  }
  for (std::size_t t = 0; t < seq.prefill.size(); ++t) {
    validate_token(seq.prefill[t], c,
                   "sequence \"" + seq.seq_id + "\" prefill token " + std::to_string(t));
  }
  for (std::size_t t = 0; t < seq.decode.size(); ++t) {
    validate_token(seq.decode[t], c,
                   "sequence \"" + seq.seq_id + "\" decode token " + std::to_string(t));
  }
}

inline void validate_traces(const std::vector<SequenceTrace>& traces, const ModelConfig& c) {
  for (const auto& s : traces) validate_sequence(s, c);
}

inline void verify_header(const TraceHeader& header, const ModelConfig& c) {
  if (header.model != c.name || header.num_layers != c.num_layers ||
      header.num_experts != c.num_experts || header.top_k != c.top_k) {
    throw ValidationError("trace header (model=" + header.model +
                          ", L=" + std::to_string(header.num_layers) +
                          ", E=" + std::to_string(header.num_experts) +
                          ", k=" + std::to_string(header.top_k) +
                          ") does not match active model config (model=" + c.name +
                          ", L=" + std::to_string(c.num_layers) +
                          ", E=" + std::to_string(c.num_experts) +
                          ", k=" + std::to_string(c.top_k) + ")");
  }
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

/// Gumbel-top-k sampling without replacement: perturb log-probabilities with
/// Gumbel noise and keep the k largest keys. Selected experts are stored in
/// key order; their scores are the source probabilities renormalized over
/// the selected set, so selection and scores come from one distribution.
inline void sample_token_layer(Rng& rng, const std::vector<double>& probs, std::uint32_t top_k,
                               std::span<ExpertSelection> out) {
  const std::size_t num_experts = probs.size();
  std::size_t positive = 0;
  for (double p : probs) {
    if (p > 0.0) ++positive;
  }

  static thread_local std::vector<double> keys;
  static thread_local std::vector<std::uint32_t> order;
  keys.resize(num_experts);
  order.resize(num_experts);

  const bool degenerate = positive < top_k;
  const double uniform_p = 1.0 / static_cast<double>(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    const double p = degenerate ? uniform_p : probs[e];
    keys[e] = (p > 0.0) ? std::log(p) + rng.gumbel()
                        : -std::numeric_limits<double>::infinity();
    order[e] = static_cast<std::uint32_t>(e);
  }
  std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (keys[a] != keys[b]) return keys[a] > keys[b];
                      return a < b;
                    });

  double selected_mass = 0.0;
  for (std::uint32_t i = 0; i < top_k; ++i) {
    selected_mass += degenerate ? uniform_p : probs[order[i]];
  }
  for (std::uint32_t i = 0; i < top_k; ++i) {
    const double p = degenerate ? uniform_p : probs[order[i]];
    out[i] = ExpertSelection{order[i], p / selected_mass};
  }
}

}  // namespace detail

/// Generates num_sequences synthetic traces. Each sequence draws, per layer,
/// a prefill expert-probability vector p ~ Dirichlet(concentration) and an
/// independent drift vector q, samples prefill tokens from p and decode
/// tokens from similarity*p + (1-similarity)*q. Deterministic for fixed
/// (seed, params); sequences use derived seeds so generation order is free.
inline std::vector<SequenceTrace> generate_traces(const ModelConfig& c, const GeneratorParams& g) {
  c.validate();
  g.validate();
  const std::uint32_t L = c.num_layers;
  const std::uint32_t E = c.num_experts;
  const std::uint32_t k = c.top_k;

  std::vector<SequenceTrace> out(g.num_sequences);
  for (std::uint32_t s = 0; s < g.num_sequences; ++s) {
    Rng rng(derive_seed(g.seed, s));
    SequenceTrace& seq = out[s];
    seq.seq_id = "seq-" + std::to_string(s);

    std::vector<std::vector<double>> prefill_dist(L), decode_dist(L);
    for (std::uint32_t l = 0; l < L; ++l) {
      prefill_dist[l] = rng.dirichlet(g.concentration, E);
      std::vector<double> drift = rng.dirichlet(g.concentration, E);
      decode_dist[l].resize(E);
      for (std::uint32_t e = 0; e < E; ++e) {
        decode_dist[l][e] = g.similarity * prefill_dist[l][e] + (1.0 - g.similarity) * drift[e];
      }
    }

    seq.prefill.assign(g.prompt_len, TokenRouting(L, k));
    for (auto& token : seq.prefill) {
      for (std::uint32_t l = 0; l < L; ++l) {
        detail::sample_token_layer(rng, prefill_dist[l], k, token.layer(l));
      }
    }
    seq.decode.assign(g.output_len, TokenRouting(L, k));
    for (auto& token : seq.decode) {
      for (std::uint32_t l = 0; l < L; ++l) {
        detail::sample_token_layer(rng, decode_dist[l], k, token.layer(l));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File format: UTF-8 JSON Lines. The first line is a header object
// {"model": name, "L": ..., "E": ..., "k": ...}; each following line is one
// sequence {"seq_id": ..., "prefill": [...], "decode": [...]} whose stages
// are nested arrays [[ [expert, score], ... ] x L] x tokens. Scores are
// written with 6 significant digits, which re-serializes byte-identically.

namespace detail {

inline void append_score(std::string& out, double score) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", score);
  out += buf;
}

inline void append_stage(std::string& out, const std::vector<TokenRouting>& stage) {
  out += '[';
  for (std::size_t t = 0; t < stage.size(); ++t) {
    if (t) out += ',';
    out += '[';
    for (std::uint32_t l = 0; l < stage[t].num_layers(); ++l) {
      if (l) out += ',';
      out += '[';
      auto sel = stage[t].layer(l);
      for (std::size_t i = 0; i < sel.size(); ++i) {
        if (i) out += ',';
        out += '[';
        out += std::to_string(sel[i].expert);
        out += ',';
        append_score(out, sel[i].score);
        out += ']';
      }
      out += ']';
    }
    out += ']';
  }
  out += ']';
}

}  // namespace detail

inline std::string serialize_traces(const TraceHeader& header,
                                    const std::vector<SequenceTrace>& traces) {
  nlohmann::ordered_json h;
  h["model"] = header.model;
  h["L"] = header.num_layers;
  h["E"] = header.num_experts;
  h["k"] = header.top_k;

  std::string out = h.dump();
  out += '\n';
  for (const auto& seq : traces) {
    out += "{\"seq_id\":";
    out += nlohmann::json(seq.seq_id).dump();
    out += ",\"prefill\":";
    detail::append_stage(out, seq.prefill);
    out += ",\"decode\":";
    detail::append_stage(out, seq.decode);
    out += "}\n";
  }
  return out;
}

inline void write_traces(const std::string& path, const TraceHeader& header,
                         const std::vector<SequenceTrace>& traces) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f << serialize_traces(header, traces);
  if (!f) throw IoError("write failed: " + path);
}

namespace detail {

inline std::vector<TokenRouting> parse_stage(const nlohmann::json& arr, const std::string& context,
                                             std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": " + context;
  if (!arr.is_array()) throw ValidationError(where + ": expected an array of tokens");
  std::vector<TokenRouting> stage;
  stage.reserve(arr.size());
  for (std::size_t t = 0; t < arr.size(); ++t) {
    const auto& token_json = arr[t];
    if (!token_json.is_array() || token_json.empty()) {
      throw ValidationError(where + " token " + std::to_string(t) +
                            ": expected a nonempty array of layers");
    }
    const std::uint32_t L = static_cast<std::uint32_t>(token_json.size());
    const auto& first_layer = token_json[0];
    if (!first_layer.is_array() || first_layer.empty()) {
      throw ValidationError(where + " token " + std::to_string(t) +
                            " layer 0: expected a nonempty array of [expert, score] pairs");
    }
    const std::uint32_t k = static_cast<std::uint32_t>(first_layer.size());
    TokenRouting token(L, k);
    for (std::uint32_t l = 0; l < L; ++l) {
      const auto& layer_json = token_json[l];
      if (!layer_json.is_array() || layer_json.size() != k) {
        throw ValidationError(where + " token " + std::to_string(t) + " layer " +
                              std::to_string(l) + ": expected " + std::to_string(k) +
                              " [expert, score] pairs");
      }
      auto sel = token.layer(l);
      for (std::uint32_t i = 0; i < k; ++i) {
        const auto& pair = layer_json[i];
        if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() ||
            !pair[1].is_number()) {
          throw ValidationError(where + " token " + std::to_string(t) + " layer " +
                                std::to_string(l) + ": expected [expert, score] pair");
        }
        const auto expert = pair[0].get<std::int64_t>();
        if (expert < 0) {
          throw ValidationError(where + " token " + std::to_string(t) + " layer " +
                                std::to_string(l) + ": expert_id must be nonnegative");
        }
        sel[i] = ExpertSelection{static_cast<std::uint32_t>(expert), pair[1].get<double>()};
      }
    }
    stage.push_back(std::move(token));
  }
  return stage;
}

}  // namespace detail

/// Parses a trace stream. An empty stream yields no header and no sequences.
/// Sequences are validated against the header's geometry.
inline TraceFile parse_traces(std::istream& in) {
  TraceFile out;
  std::string line;
  std::size_t line_no = 0;
  ModelConfig header_config;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected a JSON object");
    }

    if (line_no == 1) {
      detail::reject_unknown_keys(j, {"model", "L", "E", "k"}, "line 1: trace header");
      TraceHeader h;
      detail::read_field(j, "model", h.model);
      detail::read_field(j, "L", h.num_layers);
      detail::read_field(j, "E", h.num_experts);
      detail::read_field(j, "k", h.top_k);
      if (h.num_layers < 1 || h.num_experts < 1 || h.top_k < 1) {
        throw ValidationError("line 1: trace header must set positive L, E and k");
      }
      out.header = h;
      header_config = ModelConfig{h.model, 1, 1, h.num_layers, h.num_experts, h.top_k, 1};
      continue;
    }

    detail::reject_unknown_keys(j, {"seq_id", "prefill", "decode"},
                                "line " + std::to_string(line_no) + ": sequence");
    SequenceTrace seq;
    detail::read_field(j, "seq_id", seq.seq_id);
    if (!j.contains("prefill") || !j.contains("decode")) {
      throw ValidationError("line " + std::to_string(line_no) +
                            ": sequence needs prefill and decode stages");
    }
    seq.prefill = detail::parse_stage(j["prefill"], "prefill", line_no);
    seq.decode = detail::parse_stage(j["decode"], "decode", line_no);
    validate_sequence(seq, header_config);
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

inline TraceFile read_traces(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open trace file: " + path);
  return parse_traces(f);
}

/// Reads a trace file and verifies its header against the active model.
inline std::vector<SequenceTrace> read_traces(const std::string& path, const ModelConfig& c) {
  TraceFile file = read_traces(path);
  if (!file.header) {
    if (!file.sequences.empty()) {
      throw ValidationError(path + ": trace file has sequences but no header line");
    }
    return {};
  }
  verify_header(*file.header, c);
  validate_traces(file.sequences, c);
  return std::move(file.sequences);
}

}  // namespace moesim
