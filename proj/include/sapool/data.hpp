#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sapool/rng.hpp"
#include "sapool/tensor.hpp"

namespace sapool {

struct Dataset {
  Tensor<float> images;  // [N,C,H,W], values in [0,1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;
  // Applied when batches are assembled: (x - mean[c]) / stddev[c].
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
};

// IDX (big-endian): images magic 0x00000803 with dims (N,H,W); labels magic
// 0x00000801 with dim (N). Errors report the byte offset of the problem.
Tensor<float> load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::string split = "train");

// CIFAR-10 binary: 3073-byte records, label byte then R,G,B 32×32 planes.
Dataset load_cifar_binary(const std::string& path, std::string split = "train");

// Writers used by tools and tests; byte layout mirrors the readers.
void write_idx_images(const std::string& path, const Tensor<float>& images);
void write_idx_labels(const std::string& path, std::span<const int> labels);

// 32×32 single-channel images with two bright 3×3 blobs in opposite
// quadrants; label 1 iff both blob centers share the parity of row+col.
Dataset synth_nonlocal_dataset(std::size_t n, std::uint64_t seed);

// Zero-pads every image symmetrically by `pad` pixels on each side.
Dataset pad_images(const Dataset& d, std::size_t pad);
// Keeps the first n samples.
Dataset take(const Dataset& d, std::size_t n);

struct AugmentOptions {
  bool flip = false;        // random horizontal flip
  std::size_t crop_pad = 0;  // random crop after zero padding (0 = off)
};

// Normalized batch for sample indices `idx`; augmentation draws from `rng`.
template <typename T>
Tensor<T> make_batch(const Dataset& d, std::span<const std::size_t> idx,
                     const AugmentOptions& aug = {}, RngState* rng = nullptr);
std::vector<int> batch_labels(const Dataset& d, std::span<const std::size_t> idx);

// Fisher-Yates permutation of [0,n) from `rng`.
std::vector<std::size_t> shuffled_indices(std::size_t n, RngState& rng);

}  // namespace sapool
