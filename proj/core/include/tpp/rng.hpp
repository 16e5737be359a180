// Copyright 2026 The TPP Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace tpp {

/// 64-bit FNV-1a over raw bytes. Used for labels, content hashes and stream derivation.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);

std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** seeded through splitmix64.
///
/// The output stream is fully specified by the seed, so every platform sees the
/// same bits. Floating-point helpers only use IEEE operations plus sqrt/log/cos
/// from <cmath>. Sub-streams are derived from the master seed (never from the
/// current position), so drawing from one stream does not perturb another.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller (the second value of each pair is cached).
  double normal();
  double normal(double mean, double stddev);
  /// Normal(0, stddev) resampled until |x| <= 2*stddev.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  SeededRng derive(std::string_view label) const;
  SeededRng derive(std::string_view label, std::uint64_t a) const;
  SeededRng derive(std::string_view label, std::uint64_t a, std::uint64_t b) const;

  std::array<std::uint64_t, 4> state() const { return s_; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tpp
