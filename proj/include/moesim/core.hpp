// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moesim {

/// Raised when an input violates a documented contract (bad config value,
/// malformed trace, infeasible budget). CLI maps this to exit code 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a file cannot be read or written. CLI maps this to exit code 2.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense (layer, expert) table. Rows are layers, columns are experts.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::uint32_t rows, std::uint32_t cols, T init = T{})
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, init) {}

  T& operator()(std::uint32_t r, std::uint32_t c) { return data_[idx(r, c)]; }
  const T& operator()(std::uint32_t r, std::uint32_t c) const { return data_[idx(r, c)]; }

  std::uint32_t rows() const { return rows_; }
  std::uint32_t cols() const { return cols_; }
  bool same_shape(const Grid& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }

 private:
  std::size_t idx(std::uint32_t r, std::uint32_t c) const {
    return static_cast<std::size_t>(r) * cols_ + c;
  }

  std::uint32_t rows_ = 0;
  std::uint32_t cols_ = 0;
  std::vector<T> data_;
};

/// FNV-1a, used to fingerprint configs so outputs can name their inputs.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return std::string(buf);
}

/// Shortest stable decimal form used across all text outputs.
inline std::string format_double(double value, int significant_digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", significant_digits, value);
  return std::string(buf);
}

}  // namespace moesim
