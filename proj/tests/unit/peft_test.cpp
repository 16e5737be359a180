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

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "grad_cases.hpp"
#include "tpp/error.hpp"
#include "tpp/ops.hpp"
#include "tpp/peft.hpp"

namespace tpp {
namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

VisionTransformer frozen_model() {
  VisionTransformer m(tiny(), SeededRng(1));
  m.registry().set_group_trainable(ParamGroup::Backbone, false);
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

TEST(PeftSpec, ParseAndPrintRoundTrip) {
  for (const char* text : {"adapter:bottleneck=4", "adaptformer:bottleneck=8,scale=0.1", "vpt:tokens=5,mode=shallow",
                           "ssf", "bitfit", "lora:rank=2,alpha=8,targets=query+value"}) {
    const PeftSpec spec = parse_peft_spec(text);
    EXPECT_EQ(to_string(parse_peft_spec(to_string(spec))), to_string(spec)) << text;
  }
  EXPECT_EQ(peft_name(parse_peft_spec("lora")), "lora");
}

TEST(PeftSpec, BadSpecsThrowConfigError) {
  EXPECT_THROW(parse_peft_spec("prefix"), ConfigError);
  EXPECT_THROW(parse_peft_spec("adapter:bottleneck=0"), ConfigError);
  EXPECT_THROW(parse_peft_spec("adapter:size=3"), ConfigError);
  EXPECT_THROW(parse_peft_spec("vpt:mode=wide"), ConfigError);
  EXPECT_THROW(parse_peft_spec("ssf:x=1"), ConfigError);
}

TEST(Attach, RequiresFrozenBackbone) {
  VisionTransformer m(tiny(), SeededRng(1));
  EXPECT_THROW(attach(m, AdapterSpec{4}, SeededRng(2)), StateError);
}

TEST(Attach, SecondMechanismIsRejected) {
  VisionTransformer m = frozen_model();
  attach(m, AdapterSpec{4}, SeededRng(2));
  EXPECT_THROW(attach(m, SsfSpec{}, SeededRng(2)), StateError);
}

TEST(Attach, AdapterAddsClosedFormCount) {
  VisionTransformer m = frozen_model();
  attach(m, AdapterSpec{3}, SeededRng(2));
  EXPECT_EQ(m.registry().count(ParamGroup::Target), 2u * (2 * 8 * 3 + 3 + 8));
}

TEST(Attach, BitFitMovesBiasesIntoTarget) {
  VisionTransformer m = frozen_model();
  const std::size_t total = m.registry().total_count();
  attach(m, BitFitSpec{}, SeededRng(2));
  EXPECT_EQ(m.registry().total_count(), total);
  EXPECT_EQ(m.registry().param("blocks.0.mlp.fc1.bias").group, ParamGroup::Target);
  EXPECT_EQ(m.registry().param("blocks.0.mlp.fc1.weight").group, ParamGroup::Backbone);
  EXPECT_FALSE(adds_parameters(BitFitSpec{}));
}

TEST(Attach, LoraRankAboveWidthIsRejected) {
  VisionTransformer m = frozen_model();
  EXPECT_THROW(attach(m, LoraSpec{9, 1.0, true, true}, SeededRng(2)), ArgumentError);
}

class IdentityAtInit : public ::testing::TestWithParam<const char*> {};

TEST_P(IdentityAtInit, ForwardIsUnchanged) {
  const VisionTransformer base(tiny(), SeededRng(1));
  VisionTransformer m = frozen_model();
  attach(m, parse_peft_spec(GetParam()), SeededRng(2));
  SeededRng rng(3);
  const Tensor x = testing::random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
  NoGradGuard guard;
  EXPECT_TRUE(bit_equal(base.encode_images(x), m.encode_images(x)));
}

INSTANTIATE_TEST_SUITE_P(Mechanisms, IdentityAtInit,
                         ::testing::Values("adapter:bottleneck=4", "adaptformer:bottleneck=4", "ssf",
                                           "lora:rank=2,targets=query", "lora:rank=2,targets=value", "bitfit"));

TEST(Vpt, ChangesTheForward) {
  for (const char* spec : {"vpt:tokens=3,mode=deep", "vpt:tokens=3,mode=shallow"}) {
    const VisionTransformer base(tiny(), SeededRng(1));
    VisionTransformer m = frozen_model();
    attach(m, parse_peft_spec(spec), SeededRng(2));
    const Tensor x(Shape{1, 3, 16, 16}, 0.4);
    NoGradGuard guard;
    const Tensor y = m.encode_images(x);
    EXPECT_EQ(y.shape(), base.encode_images(x).shape());
    EXPECT_FALSE(bit_equal(base.encode_images(x), y)) << spec;
  }
}

TEST(Peft, GradientsReachEveryTargetParameter) {
  for (const char* spec : {"adapter:bottleneck=2", "adaptformer:bottleneck=2", "vpt:tokens=2", "ssf", "lora:rank=2"}) {
    VisionTransformer m = frozen_model();
    attach(m, parse_peft_spec(spec), SeededRng(2));
    m.add_head(HeadSpec::classification(3), SeededRng(3));
    // Move off the zero init so every factor carries signal.
    for (const auto& p : m.registry().params()) {
      if (p.group != ParamGroup::Target) continue;
      Tensor t = p.tensor;
      SeededRng rng = SeededRng(4).derive(p.name);
      for (auto& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
    }
    SeededRng rng(5);
    const Tensor x = testing::random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
    const std::vector<std::size_t> labels{0, 2};
    backward(cross_entropy(m.classify(x), labels));
    Tape::current().clear();
    for (const auto& p : m.registry().params()) {
      if (p.group != ParamGroup::Target) continue;
      ASSERT_TRUE(p.tensor.has_grad()) << spec << " " << p.name;
      double norm = 0.0;
      for (double g : p.tensor.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << spec << " " << p.name;
    }
  }
}

TEST(Lora, MergedWeightsMatchHookedForward) {
  VisionTransformer m = frozen_model();
  const LoraSpec spec{2, 3.0, true, true};
  attach(m, spec, SeededRng(2));
  VisionTransformer merged(tiny(), SeededRng(1));
  for (std::size_t b = 0; b < 2; ++b) {
    for (const char* site : {"query", "value"}) {
      const std::string p = "lora.blocks." + std::to_string(b) + "." + site;
      Tensor bmat = m.registry().get(p + ".B");
      SeededRng rng = SeededRng(6).derive(p);
      for (auto& v : bmat.mutable_data()) v = rng.uniform(-0.5, 0.5);
      const Tensor delta = scale(matmul(m.registry().get(p + ".A"), bmat), spec.alpha / 2.0);
      Tensor w = merged.registry().get("blocks." + std::to_string(b) + ".attn." + site + ".weight");
      for (std::size_t i = 0; i < w.numel(); ++i) w.mutable_data()[i] += delta[i];
    }
  }
  SeededRng rng(7);
  const Tensor x = testing::random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
  NoGradGuard guard;
  const Tensor a = m.encode_images(x), b = merged.encode_images(x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Adapter, OneStepBreaksIdentity) {
  VisionTransformer m = frozen_model();
  attach(m, AdapterSpec{1}, SeededRng(2));
  m.add_head(HeadSpec::classification(2), SeededRng(3));
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor down = m.registry().get("adapter.blocks." + std::to_string(b) + ".down.weight");
    for (auto& v : down.mutable_data()) v = 1.0;
  }
  const VisionTransformer base(tiny(), SeededRng(1));
  SeededRng rng(4);
  const Tensor x = testing::random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
  {
    NoGradGuard guard;
    EXPECT_TRUE(bit_equal(base.encode_images(x), m.encode_images(x)));
  }
  const std::vector<std::size_t> labels{0, 1};
  backward(cross_entropy(m.classify(x), labels));
  Tape::current().clear();
  for (const auto& p : m.registry().params()) {
    if (!p.trainable) continue;
    Tensor t = p.tensor;
    for (std::size_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] -= 0.1 * p.tensor.grad()[i];
  }
  double up = 0.0;
  for (double v : m.registry().get("adapter.blocks.1.up.weight").data()) up += std::fabs(v);
  EXPECT_GT(up, 0.0);
  NoGradGuard guard;
  EXPECT_FALSE(bit_equal(base.encode_images(x), m.encode_images(x)));
  for (const auto& p : m.registry().params())
    if (p.group == ParamGroup::Backbone) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    }
}

TEST(Peft, ResetRestoresInitialValues) {
  VisionTransformer a = frozen_model();
  attach(a, AdapterSpec{4}, SeededRng(2));
  const Tensor before = a.registry().get("adapter.blocks.0.down.weight").clone();
  Tensor w = a.registry().get("adapter.blocks.0.down.weight");
  w.mutable_data()[0] += 1.0;
  reset_target_params(a, AdapterSpec{4}, SeededRng(2));
  EXPECT_EQ(a.registry().get("adapter.blocks.0.down.weight").values(), before.values());
}

}  // namespace
}  // namespace tpp
