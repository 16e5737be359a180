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

#include <variant>

#include "tpp/config.hpp"
#include "tpp/error.hpp"

namespace tpp {
namespace {

TEST(Config, DefaultsValidate) {
  const ExperimentConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.str("model.pool"), "cls");
  EXPECT_EQ(vit_config(cfg).pooling, Pooling::ClassToken);
  EXPECT_TRUE(std::holds_alternative<AdapterSpec>(peft_spec(cfg)));
}

TEST(Config, ParsesSectionsAndComments) {
  const auto cfg = ExperimentConfig::parse(R"(
# leading comment
[model]
embed_dim = 32   ; trailing comment
pool = mean

[peft]
spec = lora:rank=2,alpha=4
[stage]
finetune_lr = 5e-4
)");
  EXPECT_EQ(cfg.count("model.embed_dim"), 32u);
  EXPECT_EQ(vit_config(cfg).pooling, Pooling::MeanPatch);
  EXPECT_EQ(cfg.num("stage.finetune_lr"), 5e-4);
  const PeftSpec spec = peft_spec(cfg);
  const auto* lora = std::get_if<LoraSpec>(&spec);
  ASSERT_NE(lora, nullptr);
  EXPECT_EQ(lora->rank, 2u);
}

TEST(Config, RejectsUnknownKeysAndSections) {
  EXPECT_THROW(ExperimentConfig::parse("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[optim]\nlr = 1\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("lr = 1\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[model\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[model]\nembed_dim\n"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(ExperimentConfig::parse("[model]\nembed_dim = -4\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[model]\npool = max\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[pretext]\nmask_ratio = 1.0\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[pretext]\nnorm_pix_targets = maybe\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[stage]\nfinetune_lr = fast\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("[model]\nembed_dim = 30\nnum_heads = 4\n"), ConfigError);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    ExperimentConfig::parse("[model]\n\nbogus = 1\n", "exp.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exp.cfg:3"), std::string::npos) << e.what();
  }
}

TEST(Config, EffectiveTextRoundTrips) {
  auto cfg = ExperimentConfig::parse("[data]\nnoise = 0.25\n[pretext]\nobjective = dino\n");
  const std::string text = cfg.to_text();
  const auto again = ExperimentConfig::parse(text);
  EXPECT_EQ(again.to_text(), text);
  EXPECT_EQ(again.str("data.noise"), "0.25");
  for (const auto& k : config_schema()) {
    const std::string key = std::string(k.section) + "." + std::string(k.key);
    EXPECT_EQ(again.raw(key), cfg.raw(key)) << key;
  }
}

TEST(Config, TppPlanDefaultsFollowObjective) {
  const StagePlan mae = tpp_plan(ExperimentConfig());
  EXPECT_EQ(mae.objective, Objective::MAE);
  EXPECT_EQ(mae.schedule.base_lr, 1.5e-3);
  EXPECT_EQ(mae.epochs, 500u);
  EXPECT_EQ(mae.batch_size, 64u);

  auto seg = ExperimentConfig::parse("[data]\ntask = segmentation\n");
  EXPECT_EQ(tpp_plan(seg).epochs, 1000u);

  auto dino = ExperimentConfig::parse("[pretext]\nobjective = dino\n[stage]\ntpp_iterations = 7\ntpp_lr = 2e-4\n");
  const StagePlan d = tpp_plan(dino);
  EXPECT_EQ(d.objective, Objective::DINO);
  EXPECT_EQ(d.iterations, 7u);
  EXPECT_EQ(d.schedule.base_lr, 2e-4);
  ASSERT_TRUE(d.schedule.wd_end.has_value());
  EXPECT_EQ(*d.schedule.wd_end, 0.4);
}

TEST(Config, FinetunePlan) {
  auto cfg = ExperimentConfig::parse("[stage]\nfinetune_iterations = 12\nfinetune_batch_size = 8\n");
  const StagePlan p = finetune_plan(cfg);
  EXPECT_EQ(p.stage, Stage::Finetune);
  EXPECT_EQ(p.iterations, 12u);
  EXPECT_EQ(p.batch_size, 8u);
  EXPECT_EQ(p.schedule.base_lr, 1e-3);
  EXPECT_TRUE(p.frozen_groups.count(ParamGroup::Backbone));
}

TEST(Pooling, NamesRoundTrip) {
  for (Pooling p : {Pooling::ClassToken, Pooling::MeanPatch}) EXPECT_EQ(parse_pooling(pooling_name(p)), p);
  EXPECT_THROW(parse_pooling("max"), ArgumentError);
}

TEST(Pooling, MeanIsPatchTokenAverage) {
  ViTConfig vc;
  vc.image_size = 16;
  vc.embed_dim = 8;
  vc.depth = 1;
  vc.num_heads = 2;
  vc.pooling = Pooling::MeanPatch;
  const VisionTransformer m(vc, SeededRng(3));
  Tensor images({2, 3, 16, 16});
  auto px = images.mutable_data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = 0.01 * static_cast<double>(i % 97) - 0.4;

  const Tensor feats = m.encode_images(images);
  const Tensor pooled = m.pooled(images);
  ASSERT_EQ(pooled.shape(), (Shape{2, 8}));
  const std::size_t n = feats.dim(1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0.0;
      for (std::size_t t = 1; t < n; ++t) s += feats[(b * n + t) * 8 + j];
      EXPECT_NEAR(pooled[b * 8 + j], s / static_cast<double>(n - 1), 1e-12);
    }

  vc.pooling = Pooling::ClassToken;
  const VisionTransformer c(vc, SeededRng(3));
  const Tensor cls = c.pooled(images);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(cls[b * 8 + j], feats[b * n * 8 + j]);
}

}  // namespace
}  // namespace tpp
