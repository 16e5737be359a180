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

#include <cstddef>
#include <string>
#include <string_view>
#include <variant>

#include "tpp/backbone.hpp"

namespace tpp {

/// Serial bottleneck after each block's MLP output: h + Up(GELU(Down(h))).
struct AdapterSpec {
  std::size_t bottleneck = 8;
};

/// Parallel bottleneck beside the MLP, scaled by `scale`.
struct AdaptFormerSpec {
  std::size_t bottleneck = 8;
  double scale = 0.1;
};

enum class VptMode { Shallow, Deep };

/// Learnable prompt tokens inserted after the class token.
struct VptSpec {
  std::size_t num_tokens = 10;
  VptMode mode = VptMode::Deep;
};

/// Per-channel scale and shift after every linear and norm output in a block.
struct SsfSpec {};

/// Trains existing bias terms; adds no parameters.
struct BitFitSpec {};

/// Low-rank update (alpha/rank) * B(Ax) on the query and/or value projections.
struct LoraSpec {
  std::size_t rank = 4;
  double alpha = 4.0;
  bool query = true;
  bool value = true;
};

using PeftSpec = std::variant<AdapterSpec, AdaptFormerSpec, VptSpec, SsfSpec, BitFitSpec, LoraSpec>;

std::string_view peft_name(const PeftSpec& spec);
/// Canonical text form, e.g. "adapter:bottleneck=8" or "lora:rank=4,alpha=4,targets=query+value".
std::string to_string(const PeftSpec& spec);
/// Parses the canonical form; omitted keys take defaults. Throws ConfigError.
PeftSpec parse_peft_spec(std::string_view text);
/// True for mechanisms that add new parameters (everything but BitFit).
bool adds_parameters(const PeftSpec& spec);

/// Attaches `spec` to a model whose Backbone group is frozen. New parameters
/// join the Target group as "<mechanism>.*" and start at the mechanism's
/// identity-preserving initialization (VPT excepted). BitFit re-tags the
/// backbone biases as trainable Target parameters instead.
/// Throws StateError on a second attachment or an unfrozen backbone.
void attach(VisionTransformer& model, const PeftSpec& spec, const SeededRng& rng);

/// Restores the default initialization of every Target parameter created by
/// `spec` (random init mode). BitFit biases are left untouched.
void reset_target_params(VisionTransformer& model, const PeftSpec& spec, const SeededRng& rng);

}  // namespace tpp
