#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stressvit/image.hpp"
#include "stressvit/tensor.hpp"
#include "stressvit/vit.hpp"

namespace stressvit {

struct AttentionMap {
  std::size_t layer_index = 0;
  Tensor grid;  // [g x g], values in [0, 1]
};

using OverlayImage = RgbImage;

// softmax(Q K^T / sqrt(d_k)) per head for one batch element: [heads x T x T].
Tensor compute_attention_scores(const AttentionRecord& record, std::size_t batch_index = 0);

// Mean over heads of the class-token row (columns 1..N) reshaped to [g x g].
Tensor class_token_map(const Tensor& scores);

// Min-max scaling to [0, 1]; a constant grid maps to all zeros.
AttentionMap normalize_map(const Tensor& grid, std::size_t layer_index = 0);

// Piecewise-linear "hot" colormap: black -> red -> yellow -> white.
std::array<double, 3> hot_colormap(double t);

// out = (1 - alpha) * image + alpha * hot(map), rounded half away from zero.
// map must already have the image's [height x width] dimensions.
OverlayImage render_overlay(const RgbImage& image, const Tensor& map, double alpha = 0.5);

// Full pipeline for every captured layer: scores, class-token map,
// normalization, resize to the image size, overlay.
std::vector<OverlayImage> attention_overlays(const std::vector<AttentionRecord>& records, const RgbImage& image,
                                             double alpha = 0.5, std::size_t batch_index = 0);

// "attn_layer_{i:02}.ppm"
std::string overlay_filename(std::size_t layer_index);

}  // namespace stressvit
