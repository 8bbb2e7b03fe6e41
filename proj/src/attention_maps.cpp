#include "stressvit/attention_maps.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace stressvit {

Tensor compute_attention_scores(const AttentionRecord& record, std::size_t batch_index) {
  const Tensor& q = record.query;
  const Tensor& k = record.key;
  if (q.rank() != 4 || q.shape() != k.shape()) {
    throw ShapeError("attention record query/key shapes inconsistent: " + shape_str(q.shape()) + " vs " +
                     shape_str(k.shape()));
  }
  const std::size_t batch = q.dim(0), heads = q.dim(1), t = q.dim(2), dk = q.dim(3);
  if (batch_index >= batch) throw std::out_of_range("batch index beyond captured batch");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor out({heads, t, t});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = (batch_index * heads + h) * t * dk;
    Tensor qh({t, dk}, std::vector<double>(q.data().begin() + static_cast<std::ptrdiff_t>(off),
                                           q.data().begin() + static_cast<std::ptrdiff_t>(off + t * dk)));
    Tensor kh({t, dk}, std::vector<double>(k.data().begin() + static_cast<std::ptrdiff_t>(off),
                                           k.data().begin() + static_cast<std::ptrdiff_t>(off + t * dk)));
    const Tensor a = kernels::softmax_rows(kernels::scale(kernels::matmul(qh, kernels::transpose(kh)), inv_sqrt_dk));
    std::copy(a.data().begin(), a.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(h * t * t));
  }
  return out;
}

Tensor class_token_map(const Tensor& scores) {
  if (scores.rank() != 3 || scores.dim(1) != scores.dim(2)) {
    throw ShapeError("class_token_map expects [heads x T x T], got " + shape_str(scores.shape()));
  }
  const std::size_t heads = scores.dim(0), t = scores.dim(1), n = t - 1;
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || g * g != n) throw ShapeError("patch token count " + std::to_string(n) + " is not a square");
  Tensor grid({g, g});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < n; ++j) grid[j] += scores[h * t * t + 1 + j];
  for (auto& v : grid.data()) v /= static_cast<double>(heads);
  return grid;
}

AttentionMap normalize_map(const Tensor& grid, std::size_t layer_index) {
  AttentionMap out{layer_index, grid};
  const auto [lo_it, hi_it] = std::minmax_element(grid.data().begin(), grid.data().end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  for (auto& v : out.grid.data()) v = range > 0.0 ? std::clamp((v - lo) / range, 0.0, 1.0) : 0.0;
  return out;
}

std::array<double, 3> hot_colormap(double t) {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0) * 255.0; };
  return {c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)};
}

OverlayImage render_overlay(const RgbImage& image, const Tensor& map, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("overlay alpha must lie in [0, 1]");
  if (map.rank() != 2 || map.dim(0) != image.height || map.dim(1) != image.width) {
    throw ShapeError("overlay map " + shape_str(map.shape()) + " does not match image " +
                     std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  OverlayImage out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto hot = hot_colormap(map.at(y, x));
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1.0 - alpha) * image.at(x, y, c) + alpha * hot[c];
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return out;
}

std::vector<OverlayImage> attention_overlays(const std::vector<AttentionRecord>& records, const RgbImage& image,
                                             double alpha, std::size_t batch_index) {
  std::vector<OverlayImage> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    const AttentionMap m = normalize_map(class_token_map(compute_attention_scores(rec, batch_index)), rec.layer_index);
    out.push_back(render_overlay(image, resize_bilinear(m.grid, image.height, image.width), alpha));
  }
  return out;
}

std::string overlay_filename(std::size_t layer_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "attn_layer_%02zu.ppm", layer_index);
  return buf;
}

}  // namespace stressvit
