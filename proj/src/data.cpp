#include "sapool/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sapool/errors.hpp"

namespace sapool {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError(path + ": cannot open file");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                        const std::string& path, const char* what) {
  if (off + 4 > b.size()) {
    throw FormatError(path + ": truncated at byte offset " + std::to_string(b.size()) +
                      " while reading " + what + " at offset " + std::to_string(off));
  }
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(bytes, 4);
}

void check_magic(std::uint32_t magic, std::uint32_t expected, const std::string& path) {
  if (magic != expected) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x at byte offset 0 (expected 0x%08x)", magic,
                  expected);
    throw FormatError(path + ": " + buf);
  }
}

void check_payload(const std::vector<unsigned char>& b, std::size_t header, std::size_t need,
                   const std::string& path) {
  if (b.size() < header + need) {
    throw FormatError(path + ": truncated at byte offset " + std::to_string(b.size()) +
                      " (payload needs " + std::to_string(header + need) + " bytes)");
  }
  if (b.size() > header + need) {
    throw FormatError(path + ": unexpected trailing data at byte offset " +
                      std::to_string(header + need));
  }
}

}  // namespace

Tensor<float> load_idx_images(const std::string& path) {
  const auto b = read_file(path);
  check_magic(read_be32(b, 0, path, "magic"), 0x00000803u, path);
  const std::size_t n = read_be32(b, 4, path, "dimension 0");
  const std::size_t h = read_be32(b, 8, path, "dimension 1");
  const std::size_t w = read_be32(b, 12, path, "dimension 2");
  check_payload(b, 16, n * h * w, path);
  Tensor<float> t(Shape{n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) t[i] = static_cast<float>(b[16 + i]) / 255.0f;
  return t;
}

std::vector<int> load_idx_labels(const std::string& path) {
  const auto b = read_file(path);
  check_magic(read_be32(b, 0, path, "magic"), 0x00000801u, path);
  const std::size_t n = read_be32(b, 4, path, "dimension 0");
  check_payload(b, 8, n, path);
  return std::vector<int>(b.begin() + 8, b.end());
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::string split) {
  Dataset d;
  d.images = load_idx_images(images_path);
  d.labels = load_idx_labels(labels_path);
  if (d.labels.size() != d.images.dim(0)) {
    throw FormatError(labels_path + ": " + std::to_string(d.labels.size()) + " labels for " +
                      std::to_string(d.images.dim(0)) + " images");
  }
  int mx = 0;
  for (int l : d.labels) mx = std::max(mx, l);
  d.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(mx) + 1);
  d.split = std::move(split);
  d.mean = {0.0f};
  d.stddev = {1.0f};
  return d;
}

Dataset load_cifar_binary(const std::string& path, std::string split) {
  constexpr std::size_t rec = 3073, plane = 1024;
  const auto b = read_file(path);
  if (b.size() % rec != 0) {
    const std::size_t last = b.size() / rec * rec;
    throw FormatError(path + ": truncated record at byte offset " + std::to_string(last) + " (" +
                      std::to_string(b.size() - last) + " of " + std::to_string(rec) + " bytes)");
  }
  const std::size_t n = b.size() / rec;
  Dataset d;
  d.images = Tensor<float>(Shape{n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * rec;
    if (b[off] > 9) {
      throw FormatError(path + ": label " + std::to_string(b[off]) + " out of range at byte offset " +
                        std::to_string(off));
    }
    d.labels[i] = b[off];
    for (std::size_t k = 0; k < 3 * plane; ++k) {
      d.images[i * 3 * plane + k] = static_cast<float>(b[off + 1 + k]) / 255.0f;
    }
  }
  d.num_classes = 10;
  d.split = std::move(split);
  d.mean = {0.0f, 0.0f, 0.0f};
  d.stddev = {1.0f, 1.0f, 1.0f};
  return d;
}

void write_idx_images(const std::string& path, const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw DimensionError("write_idx_images: expected [N,1,H,W], got " + shape_str(images.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  put_be32(out, 0x00000803u);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (float v : images.data()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
}

void write_idx_labels(const std::string& path, std::span<const int> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  put_be32(out, 0x00000801u);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.put(static_cast<char>(static_cast<unsigned char>(l)));
}

Dataset synth_nonlocal_dataset(std::size_t n, std::uint64_t seed) {
  constexpr std::size_t side = 32, half = 16;
  Dataset d;
  d.images = Tensor<float>(Shape{n, 1, side, side});
  d.labels.resize(n);
  d.num_classes = 2;
  d.split = "synthetic";
  d.mean = {0.0f};
  d.stddev = {1.0f};
  RngState rng{seed, 0};
  // Blob centers stay one pixel inside their quadrant so blobs never touch.
  auto center = [&](std::size_t q0) { return q0 + 1 + static_cast<std::size_t>(rng.below(half - 2)); };
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const bool main_diag = rng.below(2) == 0;
    const std::size_t r1q = 0, c1q = main_diag ? 0 : half;
    const std::size_t r2q = half, c2q = main_diag ? half : 0;
    const std::size_t r1 = center(r1q), c1 = center(c1q);
    const std::size_t p1 = (r1 + c1) % 2;
    std::size_t r2, c2;
    do {
      r2 = center(r2q);
      c2 = center(c2q);
    } while ((((r2 + c2) % 2) == p1) != (label == 1));
    float* img = d.images.ptr() + i * side * side;
    for (auto [r, c] : {std::pair{r1, c1}, std::pair{r2, c2}}) {
      for (std::size_t dr = 0; dr < 3; ++dr)
        for (std::size_t dc = 0; dc < 3; ++dc) img[(r - 1 + dr) * side + (c - 1 + dc)] = 1.0f;
    }
    d.labels[i] = label;
  }
  return d;
}

Dataset pad_images(const Dataset& d, std::size_t pad) {
  if (pad == 0) return d;
  Dataset out = d;
  const std::size_t n = d.size(), c = d.channels(), h = d.height(), w = d.width();
  const std::size_t oh = h + 2 * pad, ow = w + 2 * pad;
  out.images = Tensor<float>(Shape{n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(d.images.ptr() + (p * h + r) * w, w, out.images.ptr() + (p * oh + r + pad) * ow + pad);
  return out;
}

Dataset take(const Dataset& d, std::size_t n) {
  n = std::min(n, d.size());
  Dataset out = d;
  Shape s = d.images.shape();
  const std::size_t per = shape_numel(s) / std::max<std::size_t>(1, s[0]);
  s[0] = n;
  out.images = Tensor<float>(s, std::vector<float>(d.images.ptr(), d.images.ptr() + n * per));
  out.labels.resize(n);
  return out;
}

template <typename T>
Tensor<T> make_batch(const Dataset& d, std::span<const std::size_t> idx, const AugmentOptions& aug,
                     RngState* rng) {
  const std::size_t c = d.channels(), h = d.height(), w = d.width();
  Tensor<T> out(Shape{idx.size(), c, h, w});
  const bool augment = rng && (aug.flip || aug.crop_pad > 0);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= d.size()) {
      throw DimensionError("make_batch: sample index " + std::to_string(idx[b]) + " out of range");
    }
    bool flip = false;
    long dy = 0, dx = 0;
    if (augment) {
      if (aug.flip) flip = rng->below(2) == 1;
      if (aug.crop_pad > 0) {
        const long span = static_cast<long>(2 * aug.crop_pad + 1);
        dy = static_cast<long>(rng->below(span)) - static_cast<long>(aug.crop_pad);
        dx = static_cast<long>(rng->below(span)) - static_cast<long>(aug.crop_pad);
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float mu = ch < d.mean.size() ? d.mean[ch] : 0.0f;
      const float sd = ch < d.stddev.size() ? d.stddev[ch] : 1.0f;
      const float* src = d.images.ptr() + (idx[b] * c + ch) * h * w;
      T* dst = out.ptr() + (b * c + ch) * h * w;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) {
          const long sr = static_cast<long>(r) + dy;
          long sq = static_cast<long>(flip ? w - 1 - q : q) + dx;
          float v = 0.0f;
          if (sr >= 0 && sr < static_cast<long>(h) && sq >= 0 && sq < static_cast<long>(w))
            v = src[sr * static_cast<long>(w) + sq];
          dst[r * w + q] = static_cast<T>((v - mu) / sd);
        }
    }
  }
  return out;
}

std::vector<int> batch_labels(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(d.labels.at(i));
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, RngState& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

template Tensor<float> make_batch<float>(const Dataset&, std::span<const std::size_t>,
                                         const AugmentOptions&, RngState*);
template Tensor<double> make_batch<double>(const Dataset&, std::span<const std::size_t>,
                                           const AugmentOptions&, RngState*);

}  // namespace sapool
