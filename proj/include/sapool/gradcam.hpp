#pragma once

#include <string>
#include <vector>

#include "sapool/backbone.hpp"

namespace sapool {

// Binary PNM input: P5 (grey) or P6 (RGB), maxval 1..255.
// Returns [C,H,W] with values in [0,1].
Tensor<float> read_pnm(const std::string& path);
Tensor<float> decode_pnm(const std::vector<unsigned char>& bytes, const std::string& source);

// P5, maxval 255, one byte per pixel: round(255·v) with v clamped to [0,1].
std::vector<unsigned char> encode_pgm(const Tensor<float>& map);
void write_pgm(const std::string& path, const Tensor<float>& map);

// Per-map min-max scaling to [0,1]; a constant map becomes all zeros.
Tensor<float> minmax_normalize(const Tensor<float>& map);

// Core combination: weights_c = spatial mean of grad[c], map = ReLU(Σ_c
// weights_c·act[c]) bilinearly resized to out_h×out_w, then min-max scaled.
// act and grad are [C,h,w].
template <typename T>
Tensor<float> gradcam_combine(const Tensor<T>& act, const Tensor<T>& grad, std::size_t out_h,
                              std::size_t out_w);

// Heatmap for `class_id` at the input of pooling site `layer_id` ("pool0",
// ...). `image` is one normalized input [1,C,H,W]. Runs in eval mode.
template <typename T>
Tensor<float> gradcam_heatmap(Backbone<T>& net, const Tensor<T>& image, std::size_t class_id,
                              const std::string& layer_id);

}  // namespace sapool
