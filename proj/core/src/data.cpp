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

#include "tpp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "tpp/error.hpp"

namespace fs = std::filesystem;

namespace tpp {

namespace {

struct PnmImage {
  std::size_t channels = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::vector<std::uint16_t> pixels;  // interleaved
};

std::string next_token(std::istream& is, const fs::path& path) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw IoError(path.string() + ": truncated PNM header");
  return tok;
}

std::size_t header_number(std::istream& is, const fs::path& path) {
  const std::string tok = next_token(is, path);
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &pos);
  } catch (...) {
    pos = 0;
  }
  if (pos != tok.size() || v == 0) throw IoError(path.string() + ": bad PNM header value '" + tok + "'");
  return v;
}

PnmImage parse_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open");
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw IoError(path.string() + ": not a binary PGM/PPM (P5/P6) file");
  }
  PnmImage img;
  img.channels = magic[1] == '5' ? 1 : 3;
  img.width = header_number(is, path);
  img.height = header_number(is, path);
  img.maxval = header_number(is, path);
  if (img.maxval > 65535) throw IoError(path.string() + ": maxval above 65535");
  // header_number consumed exactly one whitespace byte after maxval.
  const std::size_t count = img.width * img.height * img.channels;
  const std::size_t bytes = img.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError(path.string() + ": pixel data shorter than " + std::to_string(img.width) + "x" +
                  std::to_string(img.height) + " header");
  }
  img.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    img.pixels[i] = bytes == 1 ? raw[i] : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  return img;
}

Tensor pnm_to_tensor(const PnmImage& img, double factor) {
  Tensor t({img.channels, img.height, img.width});
  auto d = t.mutable_data();
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        d[(c * img.height + y) * img.width + x] = img.pixels[(y * img.width + x) * img.channels + c] * factor;
  return t;
}

bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".pnm" || ext == ".tppt";
}

Tensor read_any(const fs::path& path, ImageFormat format, bool scale) {
  const bool tppt = format == ImageFormat::Tppt || (format == ImageFormat::Auto && path.extension() == ".tppt");
  if (tppt) return read_tppt(path);
  return scale ? read_pnm(path) : read_pnm_raw(path);
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor convert_channels(const Tensor& img, std::size_t channels, const fs::path& path) {
  const std::size_t c = img.dim(0);
  if (channels == 0 || channels == c) return img;
  const std::size_t h = img.dim(1);
  const std::size_t w = img.dim(2);
  Tensor out({channels, h, w});
  auto o = out.mutable_data();
  const auto& v = img.values();
  if (c == 1) {
    for (std::size_t ch = 0; ch < channels; ++ch) std::copy(v.begin(), v.end(), o.begin() + static_cast<std::ptrdiff_t>(ch * h * w));
  } else if (channels == 1) {
    for (std::size_t i = 0; i < h * w; ++i) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += v[ch * h * w + i];
      o[i] = s / static_cast<double>(c);
    }
  } else {
    throw DatasetError(path.string() + ": cannot convert " + std::to_string(c) + " channels to " + std::to_string(channels));
  }
  return out;
}

Tensor prepare_image(Tensor img, const LoadOptions& opt, const fs::path& path) {
  if (img.rank() == 2) img = Tensor({1, img.dim(0), img.dim(1)}, img.values());
  if (img.rank() != 3) throw DatasetError(path.string() + ": image tensor must be [C,H,W]");
  img = convert_channels(img, opt.channels, path);
  if (opt.image_size && (img.dim(1) != opt.image_size || img.dim(2) != opt.image_size)) {
    img = resize_bilinear(img, opt.image_size, opt.image_size);
  }
  return img;
}

void check_geometry(Dataset& ds, const Tensor& img, const fs::path& path) {
  if (ds.samples.empty()) {
    ds.channels = img.dim(0);
    ds.height = img.dim(1);
    ds.width = img.dim(2);
    return;
  }
  if (img.dim(0) != ds.channels || img.dim(1) != ds.height || img.dim(2) != ds.width) {
    throw DatasetError(path.string() + ": image is " + shape_to_string(img.shape()) + " but earlier images are [" +
                       std::to_string(ds.channels) + "," + std::to_string(ds.height) + "," + std::to_string(ds.width) + "]");
  }
}

std::size_t ceil_count(double ratio, std::size_t n) {
  // Tolerance absorbs products such as 0.3 * 100 = 30.000000000000004.
  const double raw = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(k, n ? 1 : 0, n);
}

std::vector<std::size_t> permutation(std::size_t n, SeededRng rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

std::vector<std::vector<std::size_t>> Dataset::strata() const {
  if (task == Task::Segmentation) {
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return {all};
  }
  std::vector<std::vector<std::size_t>> out(num_classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label >= num_classes) throw DatasetError("sample " + samples[i].id + " has label out of range");
    out[samples[i].label].push_back(i);
  }
  return out;
}

Dataset Dataset::with_samples(std::vector<Sample> picked) const {
  Dataset d;
  d.task = task;
  d.num_classes = num_classes;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.class_names = class_names;
  d.samples = std::move(picked);
  return d;
}

// ---- formats ----

Tensor read_pnm(const fs::path& path) {
  const PnmImage img = parse_pnm(path);
  return pnm_to_tensor(img, 1.0 / static_cast<double>(img.maxval));
}

Tensor read_pnm_raw(const fs::path& path) { return pnm_to_tensor(parse_pnm(path), 1.0); }

void write_pnm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ArgumentError("write_pnm: expected [1,H,W] or [3,H,W], got " + shape_to_string(image.shape()));
  }
  const std::size_t c = image.dim(0);
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << '\n' << 255 << '\n';
  const auto& v = image.values();
  std::vector<unsigned char> px(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double val = std::clamp(v[(ch * h + y) * w + x], 0.0, 1.0);
        px[(y * w + x) * c + ch] = static_cast<unsigned char>(std::lround(val * 255.0));
      }
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw IoError(path.string() + ": write failed");
}

Tensor read_tppt(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open");
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "TPPT") throw IoError(path.string() + ": missing TPPT magic");
  const std::string ctx = path.string();
  const auto rank = detail::get_le<std::uint32_t>(is, ctx);
  if (rank == 0 || rank > 8) throw IoError(ctx + ": unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_le<std::uint64_t>(is, ctx);
    if (d == 0 || d > (1u << 28)) throw IoError(ctx + ": bad dimension");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = detail::get_le<double>(is, ctx);
  return Tensor(std::move(shape), std::move(data));
}

void write_tppt(const fs::path& path, const Tensor& tensor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os.write("TPPT", 4);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) detail::put_le<std::uint64_t>(os, d);
  for (double v : tensor.values()) detail::put_le<double>(os, v);
  if (!os) throw IoError(path.string() + ": write failed");
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw DimensionError("resize_bilinear expects [C,H,W], got " + shape_to_string(image.shape()));
  const std::size_t c = image.dim(0);
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  Tensor out({c, out_h, out_w});
  auto o = out.mutable_data();
  const auto& v = image.values();
  auto src = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return 0.5 * static_cast<double>(in - 1);
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = src(y, h, out_h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = src(x, w, out_w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = v.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        o[(ch * out_h + y) * out_w + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

Tensor resize_nearest(const Tensor& mask, std::size_t out_h, std::size_t out_w) {
  if (mask.rank() != 2) throw DimensionError("resize_nearest expects [H,W], got " + shape_to_string(mask.shape()));
  const std::size_t h = mask.dim(0);
  const std::size_t w = mask.dim(1);
  Tensor out({out_h, out_w});
  auto o = out.mutable_data();
  auto src = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return (in - 1) / 2;
    return static_cast<std::size_t>(std::lround(static_cast<double>(i) * static_cast<double>(in - 1) /
                                                static_cast<double>(out - 1)));
  };
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) o[y * out_w + x] = mask.values()[src(y, h, out_h) * w + src(x, w, out_w)];
  return out;
}

Tensor crop_resize(const Tensor& image, double top, double left, double height, double width, std::size_t out) {
  if (image.rank() != 3) throw DimensionError("crop_resize expects [C,H,W], got " + shape_to_string(image.shape()));
  if (out == 0) return image;
  const std::size_t c = image.dim(0);
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  Tensor result({c, out, out});
  auto o = result.mutable_data();
  const auto& v = image.values();
  auto sample = [&](std::size_t ch, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const auto x0 = static_cast<std::size_t>(x);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    const double* p = v.data() + ch * h * w;
    return (p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx) * (1 - fy) +
           (p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx) * fy;
  };
  // Pixel centres of the output grid mapped into the crop window.
  for (std::size_t y = 0; y < out; ++y) {
    const double sy = top + (static_cast<double>(y) + 0.5) * height / static_cast<double>(out) - 0.5;
    for (std::size_t x = 0; x < out; ++x) {
      const double sx = left + (static_cast<double>(x) + 0.5) * width / static_cast<double>(out) - 0.5;
      for (std::size_t ch = 0; ch < c; ++ch) o[(ch * out + y) * out + x] = sample(ch, sy, sx);
    }
  }
  return result;
}

// ---- folders ----

Dataset load_folder(const fs::path& split_dir, const LoadOptions& opt) {
  if (!fs::is_directory(split_dir)) throw DatasetError(split_dir.string() + ": not a directory");
  Dataset ds;
  ds.task = opt.task;
  if (opt.task == Task::Classification) {
    const auto classes = sorted_entries(split_dir, true);
    if (classes.size() < 2) throw DatasetError(split_dir.string() + ": need at least two class directories");
    ds.num_classes = classes.size();
    for (std::size_t label = 0; label < classes.size(); ++label) {
      const std::string cname = classes[label].filename().string();
      ds.class_names.push_back(cname);
      const auto files = sorted_entries(classes[label], false);
      if (files.empty()) throw DatasetError(classes[label].string() + ": empty class");
      for (const auto& f : files) {
        Tensor img = prepare_image(read_any(f, opt.format, true), opt, f);
        check_geometry(ds, img, f);
        ds.samples.push_back(Sample{img, label, std::nullopt, cname + "/" + f.filename().string()});
      }
    }
  } else {
    const fs::path img_dir = split_dir / "images";
    const fs::path mask_dir = split_dir / "masks";
    if (!fs::is_directory(img_dir) || !fs::is_directory(mask_dir)) {
      throw DatasetError(split_dir.string() + ": segmentation splits need images/ and masks/");
    }
    std::map<std::string, fs::path> masks;
    for (const auto& m : sorted_entries(mask_dir, false)) masks[m.stem().string()] = m;
    std::size_t max_class = 0;
    for (const auto& f : sorted_entries(img_dir, false)) {
      auto it = masks.find(f.stem().string());
      if (it == masks.end()) throw DatasetError(f.string() + ": no matching mask");
      Tensor img = prepare_image(read_any(f, opt.format, true), opt, f);
      Tensor m = read_any(it->second, opt.format, false);
      if (m.rank() == 3 && m.dim(0) == 1) m = Tensor({m.dim(1), m.dim(2)}, m.values());
      if (m.rank() != 2) throw DatasetError(it->second.string() + ": mask must be single-channel");
      if (m.dim(0) != img.dim(1) || m.dim(1) != img.dim(2)) m = resize_nearest(m, img.dim(1), img.dim(2));
      for (double v : m.values()) {
        if (v < 0 || v != std::floor(v)) throw DatasetError(it->second.string() + ": mask values must be class indices");
        max_class = std::max(max_class, static_cast<std::size_t>(v));
      }
      check_geometry(ds, img, f);
      ds.samples.push_back(Sample{img, 0, m, f.filename().string()});
    }
    if (ds.samples.empty()) throw DatasetError(img_dir.string() + ": no images");
    ds.num_classes = opt.num_classes ? opt.num_classes : std::max<std::size_t>(2, max_class + 1);
    if (max_class >= ds.num_classes) throw DatasetError(split_dir.string() + ": mask class exceeds num_classes");
  }
  std::sort(ds.samples.begin(), ds.samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return ds;
}

// ---- synthetic ----

Tensor rasterize_disc(std::size_t height, std::size_t width, const Disc& disc) {
  Tensor m({height, width});
  auto d = m.mutable_data();
  const double r2 = disc.radius * disc.radius;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - disc.cy;
      const double dx = static_cast<double>(x) + 0.5 - disc.cx;
      if (dy * dy + dx * dx <= r2) d[y * width + x] = 1.0;
    }
  return m;
}

GeneratedSample generate_sample(const SyntheticTaskSpec& spec, std::size_t label, SeededRng& rng) {
  const std::size_t s = spec.image_size;
  const std::size_t c = spec.channels;
  const auto sd = static_cast<double>(s);
  GeneratedSample out;
  Tensor img({c, s, s});
  auto px = img.mutable_data();
  if (spec.kind == SyntheticTaskSpec::Kind::TexturedShapesCls) {
    // Class-specific oriented grating plus a class-independent distractor shape.
    const double theta = std::numbers::pi * static_cast<double>(label) / static_cast<double>(spec.num_classes);
    const double freq = 3.0;
    const double offset = rng.uniform(-0.05, 0.05);
    const bool square = rng.bernoulli(0.5);
    const double radius = rng.uniform(sd / 8.0, sd / 4.0);
    const double cy = rng.uniform(0.0, sd);
    const double cx = rng.uniform(0.0, sd);
    const double amp = spec.distractor * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double fy = static_cast<double>(y) + 0.5;
        const double fx = static_cast<double>(x) + 0.5;
        const double phase = 2.0 * std::numbers::pi * freq * (fx * std::cos(theta) + fy * std::sin(theta)) / sd;
        const bool inside = square ? (std::fabs(fy - cy) <= radius && std::fabs(fx - cx) <= radius)
                                   : ((fy - cy) * (fy - cy) + (fx - cx) * (fx - cx) <= radius * radius);
        const double base = 0.5 + offset + spec.separation * std::sin(phase) + (inside ? amp : 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) px[(ch * s + y) * s + x] = base;
      }
    out.sample.label = label;
  } else {
    Tensor mask({s, s});
    auto md = mask.mutable_data();
    const std::size_t blobs = 1 + rng.below(std::max<std::size_t>(spec.max_blobs, 1));
    for (std::size_t i = 0; i < blobs; ++i) {
      Disc d;
      d.radius = rng.uniform(sd / 8.0, sd / 4.0);
      d.cy = rng.uniform(d.radius, sd - d.radius);
      d.cx = rng.uniform(d.radius, sd - d.radius);
      const double cls = static_cast<double>(1 + i % (spec.num_classes - 1));
      const Tensor disc = rasterize_disc(s, s, d);
      for (std::size_t k = 0; k < s * s; ++k)
        if (disc[k] > 0) md[k] = cls;
      out.discs.push_back(d);
    }
    const double background = rng.uniform(0.3, 0.4);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < s * s; ++k) px[ch * s * s + k] = background + spec.separation * md[k] / static_cast<double>(spec.num_classes - 1);
    out.sample.mask = mask;
  }
  if (spec.noise > 0.0) {
    for (auto& v : px) v += spec.noise * rng.normal();
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  out.sample.image = img;
  return out;
}

DatasetSplits generate_synthetic(const SyntheticTaskSpec& spec, const SeededRng& rng) {
  if (spec.num_classes < 2) throw ArgumentError("synthetic tasks need at least two classes");
  const bool cls = spec.kind == SyntheticTaskSpec::Kind::TexturedShapesCls;
  auto make = [&](const char* split, std::size_t count) {
    Dataset ds;
    ds.task = cls ? Task::Classification : Task::Segmentation;
    ds.num_classes = spec.num_classes;
    ds.channels = spec.channels;
    ds.height = ds.width = spec.image_size;
    for (std::size_t k = 0; k < spec.num_classes; ++k) ds.class_names.push_back("class" + std::to_string(k));
    for (std::size_t i = 0; i < count; ++i) {
      SeededRng local = rng.derive(std::string("synthetic/") + split, i);
      const std::size_t label = cls ? i % spec.num_classes : 0;
      GeneratedSample g = generate_sample(spec, label, local);
      char id[32];
      std::snprintf(id, sizeof(id), "%s/%05zu", split, i);
      g.sample.id = id;
      ds.samples.push_back(std::move(g.sample));
    }
    return ds;
  };
  return DatasetSplits{make("train", spec.train_count), make("val", spec.val_count), make("test", spec.test_count)};
}

// ---- splits ----

DatasetSplits split_dataset(const Dataset& data, const SplitSpec& spec) {
  if (spec.val_fraction < 0 || spec.test_fraction < 0 || spec.val_fraction + spec.test_fraction >= 1.0) {
    throw ArgumentError("split fractions must be non-negative and sum below 1");
  }
  std::vector<std::size_t> train, val, test;
  const auto strata = data.strata();
  const SeededRng rng(spec.seed);
  for (std::size_t s = 0; s < strata.size(); ++s) {
    const auto& members = strata[s];
    const auto perm = permutation(members.size(), rng.derive("split", s));
    const auto n = static_cast<double>(members.size());
    const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * n));
    const auto n_test = std::min(members.size() - n_val, static_cast<std::size_t>(std::llround(spec.test_fraction * n)));
    for (std::size_t i = 0; i < members.size(); ++i) {
      const std::size_t idx = members[perm[i]];
      if (i < n_val) val.push_back(idx);
      else if (i < n_val + n_test) test.push_back(idx);
      else train.push_back(idx);
    }
  }
  auto pick = [&](std::vector<std::size_t>& ids) {
    std::sort(ids.begin(), ids.end());
    std::vector<Sample> s;
    for (auto i : ids) s.push_back(data.samples[i]);
    return data.with_samples(std::move(s));
  };
  return DatasetSplits{pick(train), pick(val), pick(test)};
}

Dataset subset(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ArgumentError("annotation ratio must be in (0, 1], got " + std::to_string(ratio));
  if (ratio == 1.0) return data;
  const SeededRng rng(seed);
  std::vector<std::size_t> picked;
  const auto strata = data.strata();
  for (std::size_t s = 0; s < strata.size(); ++s) {
    const auto& members = strata[s];
    const auto perm = permutation(members.size(), rng.derive("subset", s));
    const std::size_t k = ceil_count(ratio, members.size());
    for (std::size_t i = 0; i < k; ++i) picked.push_back(members[perm[i]]);
  }
  std::sort(picked.begin(), picked.end());
  std::vector<Sample> s;
  for (auto i : picked) s.push_back(data.samples[i]);
  return data.with_samples(std::move(s));
}

Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ArgumentError("stack_images: no images");
  const Shape& first = images.front().shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (const auto& im : images) {
    if (im.shape() != first) throw DimensionError("stack_images: mixed shapes " + shape_to_string(first) + " and " + shape_to_string(im.shape()));
    data.insert(data.end(), im.values().begin(), im.values().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace tpp
