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

#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "tpp/checkpoint.hpp"
#include "tpp/error.hpp"
#include "tpp/peft.hpp"

namespace tpp {
namespace {

namespace fs = std::filesystem;

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

VisionTransformer adapted(std::size_t r, std::uint64_t seed = 1) {
  VisionTransformer m(tiny(), SeededRng(seed));
  m.registry().set_group_trainable(ParamGroup::Backbone, false);
  attach(m, AdapterSpec{r}, SeededRng(seed + 1));
  return m;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  const VisionTransformer m = adapted(4);
  const Checkpoint c = snapshot(m.registry(), "unit", "[model]\n", {1, 2, 3, 4});
  const Checkpoint d = decode_checkpoint(encode_checkpoint(c));
  EXPECT_EQ(d.provenance, "unit");
  EXPECT_EQ(d.config, "[model]\n");
  EXPECT_EQ(d.rng_state, c.rng_state);
  ASSERT_EQ(d.records.size(), c.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    EXPECT_EQ(d.records[i].name, c.records[i].name);
    EXPECT_EQ(d.records[i].group, c.records[i].group);
    EXPECT_EQ(d.records[i].shape, c.records[i].shape);
    EXPECT_TRUE(same_bits(d.records[i].data, c.records[i].data));
    EXPECT_TRUE(d.records[i].hash_verified);
  }
  EXPECT_EQ(encode_checkpoint(d), encode_checkpoint(c));
}

TEST(Checkpoint, GroupFilteredSnapshot) {
  const VisionTransformer m = adapted(4);
  const ParamGroup target[] = {ParamGroup::Target};
  const Checkpoint c = snapshot(m.registry(), "unit", {}, {}, target);
  EXPECT_EQ(c.count(ParamGroup::Backbone), 0u);
  EXPECT_EQ(c.count(ParamGroup::Target), 2u * (2 * 8 * 4 + 4 + 8));
  EXPECT_EQ(c.records.size(), 8u);
}

TEST(Checkpoint, SaveLoadThroughFile) {
  const fs::path path = fs::temp_directory_path() / ("tpp_ckpt_" + std::to_string(::getpid()) + ".ckpt");
  const VisionTransformer m = adapted(2);
  const Checkpoint c = snapshot(m.registry(), "file");
  save_checkpoint(path, c);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(c));
  fs::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, FlippedPayloadBitIsReportedCorrupted) {
  const VisionTransformer m = adapted(2);
  const Checkpoint c = snapshot(m.registry(), "unit");
  std::string bytes = encode_checkpoint(c);
  // Last byte of the final record's data sits just before the hash table.
  bytes[bytes.size() - 8 * c.records.size() - 1] ^= 0x01;
  const Checkpoint d = decode_checkpoint(bytes);
  EXPECT_FALSE(d.records.back().hash_verified);
  for (std::size_t i = 0; i + 1 < d.records.size(); ++i) EXPECT_TRUE(d.records[i].hash_verified);
  const AuditReport r = audit_freeze(c, d, kAllGroups);
  EXPECT_FALSE(r.pass());
  ASSERT_EQ(r.corrupted.size(), 1u);
  EXPECT_EQ(r.corrupted[0], c.records.back().name);
}

TEST(Checkpoint, BadMagicAndTruncationThrow) {
  const Checkpoint c = snapshot(adapted(2).registry(), "unit");
  std::string bytes = encode_checkpoint(c);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 10)), IoError);
  EXPECT_THROW(decode_checkpoint(""), IoError);
}

TEST(Audit, IdenticalCheckpointsPass) {
  const Checkpoint c = snapshot(adapted(2).registry(), "a");
  const AuditReport r = audit_freeze(c, c, kAllGroups);
  EXPECT_TRUE(r.pass());
  EXPECT_EQ(r.checked, c.records.size());
}

TEST(Audit, SingleBitChangeIsNamed) {
  const VisionTransformer m = adapted(2);
  const Checkpoint before = snapshot(m.registry(), "before");
  Tensor w = m.registry().get("blocks.1.mlp.fc1.weight");
  std::uint64_t bits;
  std::memcpy(&bits, &w.mutable_data()[5], 8);
  bits ^= 1;
  std::memcpy(&w.mutable_data()[5], &bits, 8);
  const Checkpoint after = snapshot(m.registry(), "after");
  const ParamGroup backbone[] = {ParamGroup::Backbone};
  const AuditReport r = audit_freeze(before, after, backbone);
  ASSERT_EQ(r.changed.size(), 1u);
  EXPECT_EQ(r.changed[0], "blocks.1.mlp.fc1.weight");
  EXPECT_TRUE(r.corrupted.empty());
  EXPECT_FALSE(r.summary().empty());
}

TEST(Audit, MismatchedNameSetsThrow) {
  const Checkpoint a = snapshot(adapted(2).registry(), "a");
  Checkpoint b = a;
  b.records.erase(b.records.begin());
  EXPECT_THROW(audit_freeze(a, b, kAllGroups), StructuralError);
}

TEST(Apply, RestoresValues) {
  VisionTransformer src = adapted(4, 1);
  VisionTransformer dst = adapted(4, 7);
  const Checkpoint c = snapshot(src.registry(), "src");
  apply_checkpoint(dst.registry(), c, kAllGroups);
  for (const auto& p : src.registry().params())
    EXPECT_TRUE(same_bits(p.tensor.data(), dst.registry().get(p.name).data())) << p.name;
}

TEST(Apply, BottleneckMismatchIsStructural) {
  const Checkpoint c = snapshot(adapted(4).registry(), "r4");
  VisionTransformer dst = adapted(8);
  const ParamGroup target[] = {ParamGroup::Target};
  try {
    apply_checkpoint(dst.registry(), c, target);
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("adapter.blocks.0.down.weight"), std::string::npos) << e.what();
  }
}

TEST(Apply, MissingRecordIsStructural) {
  Checkpoint c = snapshot(adapted(4).registry(), "r4");
  c.records.pop_back();
  VisionTransformer dst = adapted(4);
  EXPECT_THROW(apply_checkpoint(dst.registry(), c, kAllGroups), StructuralError);
}

}  // namespace
}  // namespace tpp
