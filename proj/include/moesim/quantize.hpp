// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Reference weight quantizer and the reduced-size synthetic experts used to
// measure per-bitwidth output loss. Real calibration pipelines are out of
// scope; these experts exist only to produce loss tables with realistic
// shape (monotone in bits, heterogeneous across experts).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/rng.hpp"

namespace moesim {

/// Row-major dense matrix; rows are output channels.
struct MatrixF {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;

  MatrixF() = default;
  MatrixF(std::uint32_t r, std::uint32_t c) : rows(r), cols(c), data(std::size_t(r) * c, 0.0f) {}
  float* row(std::uint32_t r) { return data.data() + std::size_t(r) * cols; }
  const float* row(std::uint32_t r) const { return data.data() + std::size_t(r) * cols; }
};

inline MatrixF gaussian_matrix(Rng& rng, std::uint32_t rows, std::uint32_t cols, double stddev) {
  MatrixF m(rows, cols);
  for (auto& w : m.data) w = static_cast<float>(rng.normal() * stddev);
  return m;
}

/// Symmetric uniform round-to-nearest quantization with one scale per output
/// channel. The grid is the 2^bits mid-rise levels (i + 0.5) * step with
/// step = max|w| / 2^(bits-1), so no exact-zero level exists and a 1-bit
/// channel degenerates to sign(w) * max|w| / 2. An all-zero channel is
/// returned unchanged.
inline MatrixF quantize_rtn(const MatrixF& m, std::uint32_t bits) {
  if (bits < 1 || bits > 24) throw ValidationError("quantize_rtn: bits must be in [1, 24]");
  MatrixF out(m.rows, m.cols);
  const double half_levels = std::pow(2.0, static_cast<double>(bits) - 1.0);
  for (std::uint32_t r = 0; r < m.rows; ++r) {
    const float* src = m.row(r);
    float* dst = out.row(r);
    double max_abs = 0.0;
    for (std::uint32_t c = 0; c < m.cols; ++c) {
      max_abs = std::max(max_abs, std::abs(static_cast<double>(src[c])));
    }
    if (max_abs == 0.0) continue;
    const double step = max_abs / half_levels;
    for (std::uint32_t c = 0; c < m.cols; ++c) {
      double q = std::floor(static_cast<double>(src[c]) / step);
      q = std::min(std::max(q, -half_levels), half_levels - 1.0);
      dst[c] = static_cast<float>((q + 0.5) * step);
    }
  }
  return out;
}

/// Gate/up/down projection triple at reduced dimensions.
struct SyntheticExpert {
  MatrixF gate;  // ffn x hidden
  MatrixF up;    // ffn x hidden
  MatrixF down;  // hidden x ffn
};

/// `weight_scale` multiplies the fan-in initialization of all three
/// projections, so experts built at different scales produce quantization
/// losses of genuinely different magnitude.
inline SyntheticExpert make_synthetic_expert(Rng& rng, std::uint32_t hidden, std::uint32_t ffn,
                                             double weight_scale = 1.0) {
  SyntheticExpert e;
  const double in_scale = weight_scale / std::sqrt(static_cast<double>(hidden));
  const double out_scale = weight_scale / std::sqrt(static_cast<double>(ffn));
  e.gate = gaussian_matrix(rng, ffn, hidden, in_scale);
  e.up = gaussian_matrix(rng, ffn, hidden, in_scale);
  e.down = gaussian_matrix(rng, hidden, ffn, out_scale);
  return e;
}

inline SyntheticExpert quantize_expert(const SyntheticExpert& e, std::uint32_t bits) {
  return SyntheticExpert{quantize_rtn(e.gate, bits), quantize_rtn(e.up, bits),
                         quantize_rtn(e.down, bits)};
}

namespace detail {

inline void matvec(const MatrixF& m, const std::vector<float>& x, std::vector<float>& out) {
  out.resize(m.rows);
  for (std::uint32_t r = 0; r < m.rows; ++r) {
    const float* row = m.row(r);
    double acc = 0.0;
    for (std::uint32_t c = 0; c < m.cols; ++c) acc += double(row[c]) * double(x[c]);
    out[r] = static_cast<float>(acc);
  }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

/// y = down( silu(gate x) * up x )
inline std::vector<float> expert_forward(const SyntheticExpert& e, const std::vector<float>& x) {
  std::vector<float> g, u, h, y;
  detail::matvec(e.gate, x, g);
  detail::matvec(e.up, x, u);
  h.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    h[i] = static_cast<float>(detail::silu(g[i]) * u[i]);
  }
  detail::matvec(e.down, h, y);
  return y;
}

/// Mean squared error between the quantized expert's outputs and the
/// full-precision outputs over a batch of calibration inputs.
inline double quantization_output_mse(const SyntheticExpert& ref, const SyntheticExpert& quantized,
                                      const std::vector<std::vector<float>>& inputs) {
  double sum_sq = 0.0;
  std::size_t count = 0;
  for (const auto& x : inputs) {
    const std::vector<float> y_ref = expert_forward(ref, x);
    const std::vector<float> y_q = expert_forward(quantized, x);
    for (std::size_t i = 0; i < y_ref.size(); ++i) {
      const double d = double(y_q[i]) - double(y_ref[i]);
      sum_sq += d * d;
    }
    count += y_ref.size();
  }
  return count ? sum_sq / static_cast<double>(count) : 0.0;
}

inline std::vector<std::vector<float>> gaussian_inputs(Rng& rng, std::uint32_t count,
                                                       std::uint32_t dim) {
  std::vector<std::vector<float>> inputs(count);
  for (auto& x : inputs) {
    x.resize(dim);
    for (auto& v : x) v = static_cast<float>(rng.normal());
  }
  return inputs;
}

}  // namespace moesim
