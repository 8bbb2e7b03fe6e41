#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stressvit/image.hpp"
#include "stressvit/rng.hpp"
#include "stressvit/tensor.hpp"

namespace stressvit {

inline constexpr int kHealthy = 0;
inline constexpr int kStressed = 1;

// "healthy" / "stressed" (case-insensitive) to 0 / 1; throws otherwise.
int parse_label(std::string_view name);
std::string label_name(int label);

// Pixel box [x_min, x_max) x [y_min, y_max). Signed so that annotations
// reaching past the border survive parsing and get clamped at extraction.
struct BoundingBox {
  long x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int label = kHealthy;
  bool operator==(const BoundingBox&) const = default;
};

struct LabeledBox {
  std::string image;
  BoundingBox box;
};

struct AnnotatedImage {
  std::string id;
  RgbImage image;
  std::vector<BoundingBox> boxes;
};

struct Window {
  RgbImage patch;
  int label = kHealthy;
  std::string source_id;
  BoundingBox source_box;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthConfig {
  std::size_t width = 160;
  std::size_t height = 160;
  std::size_t healthy = 5;
  std::size_t stressed = 5;
  std::array<std::uint8_t, 3> canopy_green{55, 140, 50};
  int stress_yellow_shift = 110;
  double noise = 14.0;
  std::size_t min_radius = 8;
  std::size_t max_radius = 14;
  std::size_t max_retries = 2000;
  std::uint64_t seed = 1;
};

// Soil background with elliptical canopy blobs: healthy ones green-dominant,
// stressed ones shifted toward yellow. One labeled box per blob.
AnnotatedImage synthesize_field_image(const SynthConfig& config);

// Seed of the i-th image in a generated set.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

enum class AnnotationFormat { voc_xml, csv };

// VOC (LabelImg) XML or CSV lines "image,x_min,y_min,x_max,y_max,label"
// (an optional header line starting with "image" is skipped).
std::vector<LabeledBox> parse_annotations(const std::filesystem::path& path, AnnotationFormat format);
std::vector<LabeledBox> parse_voc_xml(const std::string& xml, const std::string& source = "<memory>");
std::vector<LabeledBox> parse_annotation_csv(const std::string& text, const std::string& source = "<memory>");

std::string to_voc_xml(const AnnotatedImage& image, const std::string& filename);

// One window per box; boxes are clamped to the image and rejected when the
// clamped area is under 4 px^2.
std::vector<Window> extract_windows(const AnnotatedImage& image);

// Bilinear resize to image_size x image_size, /255, channel-first [3 x S x S].
Tensor preprocess(const RgbImage& patch, std::size_t image_size);
inline Tensor preprocess(const Window& w, std::size_t image_size) { return preprocess(w.patch, image_size); }

// k disjoint folds over 0..n-1 after a seeded shuffle; sizes differ by <= 1.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

// Consecutive batches covering every index once; the last one may be partial.
std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                   bool shuffle, Rng* rng);

// Dataset directory: images/*.ppm plus annotations.csv or annotations/*.xml.
std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::vector<AnnotatedImage>& images, const std::filesystem::path& dir);

// Preprocessed windows ready for a model.
struct LabeledTensors {
  std::vector<Tensor> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  LabeledTensors subset(const std::vector<std::size_t>& indices) const;
};

LabeledTensors prepare_windows(const std::vector<Window>& windows, std::size_t image_size);
std::vector<Window> extract_all_windows(const std::vector<AnnotatedImage>& images);

}  // namespace stressvit
