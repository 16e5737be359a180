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
#include <numeric>

#include "grad_cases.hpp"
#include "tpp/error.hpp"
#include "tpp/ops.hpp"
#include "tpp/pretext.hpp"

namespace tpp {
namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

TEST(Mask, CountsFollowRoundedRatio) {
  SeededRng rng(1);
  const MaskSplit a = sample_mask(rng, 196, 0.75);
  EXPECT_EQ(a.masked.size(), 147u);
  EXPECT_EQ(a.visible.size(), 49u);
  const MaskSplit b = sample_mask(rng, 4, 0.75);
  EXPECT_EQ(b.masked.size(), 3u);
  EXPECT_EQ(b.visible.size(), 1u);
  EXPECT_TRUE(std::is_sorted(a.masked.begin(), a.masked.end()));
  EXPECT_TRUE(std::is_sorted(a.visible.begin(), a.visible.end()));
}

TEST(Mask, EveryIndexIsMaskedUniformly) {
  SeededRng rng(2);
  std::vector<int> hits(8, 0);
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i)
    for (std::size_t k : sample_mask(rng, 8, 0.75).masked) ++hits[k];
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / kDraws, 0.75, 0.02);
}

TEST(Mask, InvalidRatioThrows) {
  SeededRng rng(3);
  EXPECT_ANY_THROW(sample_mask(rng, 8, 1.0));
  EXPECT_ANY_THROW(sample_mask(rng, 8, -0.1));
}

TEST(Mae, LossIsZeroWhenMaskedPredictionsMatch) {
  const Tensor target(Shape{1, 3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor pred = target.clone();
  pred.mutable_data()[0] = 100.0;  // row 0 stays visible
  EXPECT_EQ(mse_masked(pred, target, {false, true, true}).item(), 0.0);
}

TEST(Mae, VisibleTargetsDoNotReachTheLoss) {
  VisionTransformer m(tiny(), SeededRng(4));
  MaeConfig cfg;
  add_mae_decoder(m, cfg, SeededRng(5));
  SeededRng rng(6);
  const Tensor images = testing::random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
  const Tensor targets = patchify(images, 4);
  const std::vector<MaskSplit> masks{sample_mask(rng, 16, 0.75), sample_mask(rng, 16, 0.75)};
  Tensor mutated = targets.clone();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k : masks[b].visible) mutated.mutable_data()[(b * 16 + k) * 48] += 3.0;
  NoGradGuard guard;
  const double a = mae_loss(m, cfg, images, targets, masks).item();
  const double c = mae_loss(m, cfg, images, mutated, masks).item();
  EXPECT_EQ(std::memcmp(&a, &c, sizeof a), 0);
}

TEST(Mae, DecoderJoinsHeadGroupAndResolvesDefaults) {
  VisionTransformer m(tiny(), SeededRng(4));
  MaeConfig cfg;
  EXPECT_EQ(cfg.resolved_dim(tiny()), 4u);
  add_mae_decoder(m, cfg, SeededRng(5));
  EXPECT_TRUE(has_mae_decoder(m.registry()));
  EXPECT_EQ(m.registry().param("mae_decoder.mask_token").group, ParamGroup::Head);
}

TEST(Dino, MomentumEndpoints) {
  std::vector<double> t{1.0, 2.0}, s{5.0, -1.0};
  dino_teacher_update(t, s, 1.0);
  EXPECT_EQ(t, (std::vector<double>{1.0, 2.0}));
  dino_teacher_update(t, s, 0.0);
  EXPECT_EQ(t, s);
}

TEST(Dino, TeacherFollowsGeometricSeries) {
  std::vector<double> t{0.0};
  const std::vector<double> s{1.0};
  for (int k = 1; k <= 30; ++k) {
    dino_teacher_update(t, s, 0.9);
    EXPECT_NEAR(t[0], 1.0 - std::pow(0.9, k), 1e-12);
  }
}

TEST(Dino, RegistryUpdateSkipsFrozenAndRejectsSharing) {
  ParamRegistry student;
  student.add("a", Tensor::scalar(1.0), ParamGroup::Target);
  student.add("b", Tensor::scalar(1.0), ParamGroup::Backbone, false);
  ParamRegistry teacher = student.detached_copy();
  dino_teacher_update(teacher, student, 0.5);
  EXPECT_EQ(teacher.get("b").item(), 1.0);
  ParamRegistry other;
  other.add("x", Tensor::scalar(0.0), ParamGroup::Target);
  EXPECT_THROW(dino_teacher_update(other, student, 0.5), StateError);
}

TEST(Dino, CenterFollowsGeometricSeries) {
  std::vector<double> c(4, 0.0);
  const Tensor out(Shape{3, 4}, 2.5);
  for (int k = 1; k <= 20; ++k) {
    c = dino_center_update(c, {out}, 0.9);
    ASSERT_EQ(c.size(), 4u);
    for (double v : c) EXPECT_NEAR(v, 2.5 * (1.0 - std::pow(0.9, k)), 1e-12);
  }
  EXPECT_EQ(dino_center_update(c, {out}, 1.0), c);
}

TEST(Dino, LossOfMatchingDistributionsIsEntropy) {
  DinoConfig cfg;
  cfg.teacher_temp = cfg.student_temp = 0.5;
  const Tensor logits(Shape{1, 3}, {0.2, -0.4, 1.0});
  const std::vector<double> center(3, 0.0);
  const double loss = dino_loss({logits, logits}, {logits, logits}, center, cfg).item();
  const Tensor p = softmax(logits, 0.5);
  double h = 0.0;
  for (double v : p.data()) h -= v * std::log(v);
  EXPECT_NEAR(loss, h, 1e-12);
}

TEST(Dino, SharpenedTeacherGivesStudentNll) {
  DinoConfig cfg;
  const Tensor teacher(Shape{1, 2}, {10.0, -10.0});
  const Tensor student(Shape{1, 2}, {0.3, 0.1});
  const std::vector<double> center(2, 0.0);
  const double loss = dino_loss({student, student}, {teacher, teacher}, center, cfg).item();
  const double nll = -std::log(softmax(student, cfg.student_temp)[0]);
  EXPECT_NEAR(loss, nll, 1e-9);
}

TEST(Dino, StudentGradientMatchesFiniteDifferences) {
  DinoConfig cfg;
  SeededRng rng(8);
  const std::vector<Tensor> teacher{testing::random_tensor(rng, {2, 5}), testing::random_tensor(rng, {2, 5})};
  const std::vector<double> center{0.1, -0.2, 0.0, 0.3, 0.05};
  const auto err = testing::check_gradients(
      {testing::random_tensor(rng, {2, 5}), testing::random_tensor(rng, {2, 5}), testing::random_tensor(rng, {2, 5})},
      [&](const std::vector<Tensor>& s) { return dino_loss(s, teacher, center, cfg); }, rng);
  EXPECT_LT(err.max_rel, 1e-4);
}

TEST(Dino, HeadOutputsHaveConfiguredWidth) {
  VisionTransformer m(tiny(), SeededRng(4));
  DinoConfig cfg;
  cfg.head_hidden = 16;
  cfg.head_output_dim = 12;
  add_dino_head(m, cfg, ParamGroup::Target, SeededRng(5));
  EXPECT_EQ(dino_forward(m, Tensor({3, 3, 16, 16}, 0.5)).shape(), (Shape{3, 12}));
}

TEST(Augment, NoneIsIdentity) {
  SeededRng rng(9);
  const Tensor img = testing::random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
  EXPECT_EQ(augment(rng, img, AugmentPolicy::None).values(), img.values());
}

TEST(Augment, SolarizeFlipsBrightPixels) {
  const Tensor img(Shape{1, 1, 2}, {0.8, 0.3});
  const Tensor s = solarize(img, 0.5);
  EXPECT_NEAR(s[0], 0.2, 1e-15);
  EXPECT_EQ(s[1], 0.3);
}

TEST(Augment, ColorJitterStaysWithinBounds) {
  SeededRng rng(10);
  const Tensor img = testing::random_tensor(rng, {3, 8, 8}, 0.2, 0.6);
  const auto stats = [](const Tensor& t) {
    const double n = static_cast<double>(t.numel());
    const double mean = std::accumulate(t.data().begin(), t.data().end(), 0.0) / n;
    double var = 0.0;
    for (double v : t.data()) var += (v - mean) * (v - mean) / n;
    return std::pair{mean, var};
  };
  const auto [m0, v0] = stats(img);
  const double b = 0.4, c = 0.4;
  for (int i = 0; i < 1000; ++i) {
    const Tensor j = color_jitter(img, rng.uniform(1 - b, 1 + b), rng.uniform(1 - c, 1 + c));
    const auto [m, v] = stats(j);
    EXPECT_GE(m, (1 - b) * m0 - 1e-12);
    EXPECT_LE(m, (1 + b) * m0 + 1e-12);
    EXPECT_GE(v, std::pow((1 - b) * (1 - c), 2) * v0 - 1e-12);
    EXPECT_LE(v, std::pow((1 + b) * (1 + c), 2) * v0 + 1e-12);
  }
}

TEST(Augment, ViewsHaveConfiguredSizes) {
  SeededRng rng(11);
  std::vector<Tensor> images{testing::random_tensor(rng, {3, 16, 16}, 0, 1), testing::random_tensor(rng, {3, 16, 16}, 0, 1)};
  std::vector<SeededRng> rngs{SeededRng(1), SeededRng(2)};
  DinoConfig cfg;
  const ViewBatch v = make_views(rngs, images, cfg);
  ASSERT_EQ(v.global_views.size(), 2u);
  ASSERT_EQ(v.local_views.size(), 2u);
  EXPECT_EQ(v.global_views[0].shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(v.local_views[0].shape(), (Shape{2, 3, 8, 8}));
}

TEST(Augment, ParsePolicyRoundTrip) {
  for (auto p : {AugmentPolicy::None, AugmentPolicy::DinoGlobal, AugmentPolicy::DinoLocal, AugmentPolicy::FinetuneLight})
    EXPECT_EQ(parse_policy(policy_name(p)), p);
  EXPECT_ANY_THROW(parse_policy("cutmix"));
}

}  // namespace
}  // namespace tpp
