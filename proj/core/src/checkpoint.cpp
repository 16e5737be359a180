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

#include "tpp/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "tpp/error.hpp"

namespace fs = std::filesystem;

namespace tpp {

namespace {

constexpr char kMagic[4] = {'T', 'P', 'P', 'C'};
constexpr std::uint8_t kDtypeF64 = 1;

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_str(std::string& out, std::string_view s) {
  append_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  std::uint64_t uint(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str() {
    const auto n = static_cast<std::size_t>(uint(4));
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  double f64() {
    const std::uint64_t bits = uint(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) fail("offset past end of file");
    pos_ = pos;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const { throw IoError(context_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated (needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ")");
  }
  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

bool in_groups(ParamGroup g, std::span<const ParamGroup> groups) {
  return std::find(groups.begin(), groups.end(), g) != groups.end();
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::size_t Checkpoint::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.group == group) n += r.data.size();
  }
  return n;
}

std::uint64_t tensor_hash(std::span<const double> values) {
  std::string bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) detail::append_double(bytes, v);
  return fnv1a64(bytes);
}

Checkpoint snapshot(const ParamRegistry& params, std::string provenance, std::string config,
                    std::array<std::uint64_t, 4> rng_state, std::span<const ParamGroup> groups) {
  Checkpoint c;
  c.provenance = std::move(provenance);
  c.config = std::move(config);
  c.rng_state = rng_state;
  for (const Param& p : params.params()) {
    if (!in_groups(p.group, groups)) continue;
    TensorRecord r;
    r.name = p.name;
    r.group = p.group;
    r.shape = p.tensor.shape();
    r.data = p.tensor.values();
    r.hash = tensor_hash(r.data);
    c.records.push_back(std::move(r));
  }
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string manifest;
  append_str(manifest, ckpt.provenance);
  append_str(manifest, ckpt.config);
  for (auto w : ckpt.rng_state) detail::append_le64(manifest, w);
  detail::append_le64(manifest, ckpt.records.size());
  std::uint64_t offset = 0;
  for (const auto& r : ckpt.records) {
    append_str(manifest, r.name);
    manifest.push_back(static_cast<char>(r.group));
    manifest.push_back(static_cast<char>(kDtypeF64));
    append_u32(manifest, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::append_le64(manifest, d);
    detail::append_le64(manifest, offset);
    offset += r.data.size() * 8;
  }
  std::string out(kMagic, 4);
  append_u32(out, ckpt.format_version);
  detail::append_le64(out, manifest.size());
  out += manifest;
  for (const auto& r : ckpt.records)
    for (double v : r.data) detail::append_double(out, v);
  for (const auto& r : ckpt.records) detail::append_le64(out, tensor_hash(r.data));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& context) {
  Reader in(bytes, context);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) in.fail("missing TPPC magic");
  in.seek(4);
  Checkpoint c;
  c.format_version = static_cast<std::uint32_t>(in.uint(4));
  if (c.format_version != kCheckpointVersion) in.fail("unsupported format version " + std::to_string(c.format_version));
  const std::uint64_t manifest_len = in.uint(8);
  const std::size_t payload_start = in.pos() + manifest_len;
  c.provenance = in.str();
  c.config = in.str();
  for (auto& w : c.rng_state) w = in.uint(8);
  const std::uint64_t count = in.uint(8);
  std::vector<std::uint64_t> offsets;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    r.name = in.str();
    const auto group = static_cast<std::uint8_t>(in.uint(1));
    if (group > 2) in.fail("record '" + r.name + "' has unknown group " + std::to_string(group));
    r.group = static_cast<ParamGroup>(group);
    if (in.uint(1) != kDtypeF64) in.fail("record '" + r.name + "' has unsupported dtype");
    const auto rank = in.uint(4);
    for (std::uint64_t k = 0; k < rank; ++k) r.shape.push_back(in.uint(8));
    offsets.push_back(in.uint(8));
    c.records.push_back(std::move(r));
  }
  if (in.pos() != payload_start) in.fail("manifest length disagrees with its contents");
  std::size_t payload_bytes = 0;
  for (auto& r : c.records) payload_bytes += shape_numel(r.shape) * 8;
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    TensorRecord& r = c.records[i];
    in.seek(payload_start + offsets[i]);
    r.data.resize(shape_numel(r.shape));
    for (auto& v : r.data) v = in.f64();
    r.hash = tensor_hash(r.data);
  }
  in.seek(payload_start + payload_bytes);
  for (auto& r : c.records) r.hash_verified = in.uint(8) == r.hash;
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(tmp.string() + ": cannot open for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw IoError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": rename failed: " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

void apply_checkpoint(ParamRegistry& params, const Checkpoint& ckpt, std::span<const ParamGroup> groups) {
  std::vector<std::string> problems;
  std::set<std::string, std::less<>> wanted;
  for (const Param& p : params.params()) {
    if (!in_groups(p.group, groups)) continue;
    wanted.insert(p.name);
    const TensorRecord* r = ckpt.find(p.name);
    if (!r) {
      problems.push_back(p.name + " (missing from file)");
    } else if (r->group != p.group) {
      problems.push_back(p.name + " (group " + std::string(group_name(r->group)) + " in file, " +
                         std::string(group_name(p.group)) + " in model)");
    } else if (r->shape != p.tensor.shape()) {
      problems.push_back(p.name + " (shape " + shape_to_string(r->shape) + " in file, " +
                         shape_to_string(p.tensor.shape()) + " in model)");
    }
  }
  for (const auto& r : ckpt.records) {
    if (in_groups(r.group, groups) && !wanted.count(r.name)) problems.push_back(r.name + " (not in model)");
  }
  if (!problems.empty()) throw StructuralError("checkpoint does not match the model: " + join(problems));
  for (const Param& p : params.params()) {
    if (!in_groups(p.group, groups)) continue;
    const TensorRecord* r = ckpt.find(p.name);
    Tensor handle = p.tensor;
    std::copy(r->data.begin(), r->data.end(), handle.mutable_data().begin());
  }
}

std::string AuditReport::summary() const {
  if (pass()) return "PASS (" + std::to_string(checked) + " tensors unchanged)";
  std::string s = "FAIL";
  if (!changed.empty()) s += "; changed: " + join(changed);
  if (!corrupted.empty()) s += "; corrupted: " + join(corrupted);
  return s;
}

AuditReport audit_freeze(const Checkpoint& before, const Checkpoint& after, std::span<const ParamGroup> groups) {
  std::vector<std::string> problems;
  for (const auto& r : before.records) {
    if (!in_groups(r.group, groups)) continue;
    const TensorRecord* o = after.find(r.name);
    if (!o) problems.push_back(r.name + " (missing after)");
    else if (o->group != r.group) problems.push_back(r.name + " (group changed)");
    else if (o->shape != r.shape) problems.push_back(r.name + " (shape changed)");
  }
  for (const auto& r : after.records) {
    if (in_groups(r.group, groups) && !before.find(r.name)) problems.push_back(r.name + " (missing before)");
  }
  if (!problems.empty()) throw StructuralError("audit: checkpoints disagree structurally: " + join(problems));
  AuditReport report;
  for (const auto& r : before.records) {
    if (!in_groups(r.group, groups)) continue;
    const TensorRecord* o = after.find(r.name);
    ++report.checked;
    if (!r.hash_verified || !o->hash_verified) report.corrupted.push_back(r.name);
    if (r.hash != o->hash) report.changed.push_back(r.name);
  }
  return report;
}

}  // namespace tpp
