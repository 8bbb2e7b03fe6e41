#include "stressvit/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

namespace stressvit {

namespace fs = std::filesystem;

int parse_label(std::string_view name) {
  std::string low(name);
  std::transform(low.begin(), low.end(), low.begin(), [](unsigned char c) { return std::tolower(c); });
  if (low == "healthy") return kHealthy;
  if (low == "stressed") return kStressed;
  throw DataError("unknown class label '" + std::string(name) + "' (expected healthy or stressed)");
}

std::string label_name(int label) { return label == kStressed ? "stressed" : "healthy"; }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)); }

bool overlaps(const BoundingBox& a, const BoundingBox& b, long margin) {
  return a.x_min < b.x_max + margin && b.x_min < a.x_max + margin && a.y_min < b.y_max + margin &&
         b.y_min < a.y_max + margin;
}

}  // namespace

AnnotatedImage synthesize_field_image(const SynthConfig& cfg) {
  if (cfg.min_radius < 2 || cfg.max_radius < cfg.min_radius) throw DataError("invalid blob radius range");
  if (cfg.width < 2 * cfg.max_radius + 2 || cfg.height < 2 * cfg.max_radius + 2) {
    throw DataError("canvas too small for the configured blob radius");
  }
  Rng rng(cfg.seed);
  AnnotatedImage out;
  out.id = "synth_" + std::to_string(cfg.seed);
  out.image = RgbImage(cfg.width, cfg.height);

  // Soil: brown base, row-wise furrow shading, per-pixel noise.
  const double furrow_period = 6.0 + 4.0 * rng.uniform();
  for (std::size_t y = 0; y < cfg.height; ++y) {
    const double furrow = 10.0 * std::sin(6.283185307179586 * static_cast<double>(y) / furrow_period);
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const double n = cfg.noise * (2.0 * rng.uniform() - 1.0);
      out.image.at(x, y, 0) = to_byte(125.0 + furrow + n);
      out.image.at(x, y, 1) = to_byte(95.0 + furrow + n);
      out.image.at(x, y, 2) = to_byte(65.0 + 0.5 * furrow + n);
    }
  }

  std::vector<int> labels(cfg.healthy, kHealthy);
  labels.insert(labels.end(), cfg.stressed, kStressed);
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);

  const auto [g_r, g_g, g_b] = cfg.canopy_green;
  const int shift = cfg.stress_yellow_shift;
  for (int label : labels) {
    BoundingBox box;
    double cx = 0, cy = 0, rx = 0, ry = 0;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const auto span = cfg.max_radius - cfg.min_radius + 1;
      rx = static_cast<double>(cfg.min_radius + rng.below(span));
      ry = static_cast<double>(cfg.min_radius + rng.below(span));
      cx = rx + static_cast<double>(rng.below(cfg.width - 2 * static_cast<std::size_t>(rx)));
      cy = ry + static_cast<double>(rng.below(cfg.height - 2 * static_cast<std::size_t>(ry)));
      box = {static_cast<long>(cx - rx), static_cast<long>(cy - ry), static_cast<long>(cx + rx),
             static_cast<long>(cy + ry), label};
      placed = std::none_of(out.boxes.begin(), out.boxes.end(), [&](const BoundingBox& b) { return overlaps(b, box, 1); });
    }
    if (!placed) {
      throw DataError("could not place " + std::to_string(labels.size()) + " canopy regions on a " +
                      std::to_string(cfg.width) + "x" + std::to_string(cfg.height) + " canvas");
    }
    out.boxes.push_back(box);

    const double jitter = 15.0 * (2.0 * rng.uniform() - 1.0);
    double base_r = g_r, base_g = g_g, base_b = g_b;
    if (label == kStressed) {
      base_r += shift;
      base_g += shift / 4.0;
      base_b -= shift / 4.0;
    }
    for (long y = box.y_min; y < box.y_max; ++y) {
      for (long x = box.x_min; x < box.x_max; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
        const double n = cfg.noise * (2.0 * rng.uniform() - 1.0);
        const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
        out.image.at(ux, uy, 0) = to_byte(base_r + jitter + n);
        out.image.at(ux, uy, 1) = to_byte(base_g + jitter + n);
        out.image.at(ux, uy, 2) = to_byte(base_b + 0.5 * jitter + n);
      }
    }
  }
  return out;
}

namespace {

long parse_coord(const std::string& raw, const std::string& where) {
  std::string s = raw;
  s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); }), s.end());
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError(where + ": bad coordinate '" + raw + "'");
  }
  return std::lround(v);
}

void check_box(const BoundingBox& b, const std::string& where) {
  if (b.x_max <= b.x_min || b.y_max <= b.y_min) {
    throw DataError(where + ": inverted or empty box (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) +
                    "," + std::to_string(b.x_max) + "," + std::to_string(b.y_max) + ")");
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<LabeledBox> parse_voc_xml(const std::string& xml, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(xml);
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw DataError(source + ":" + std::to_string(e.line()) + ": malformed XML: " + e.message());
  }
  const auto ann = tree.get_child_optional("annotation");
  if (!ann) throw DataError(source + ": missing <annotation> root");
  const std::string filename = ann->get<std::string>("filename", "");
  std::vector<LabeledBox> out;
  std::size_t index = 0;
  for (const auto& [key, node] : *ann) {
    if (key != "object") continue;
    const std::string where = source + ": object #" + std::to_string(++index);
    try {
      LabeledBox lb;
      lb.image = filename;
      lb.box.label = parse_label(node.get<std::string>("name"));
      lb.box.x_min = parse_coord(node.get<std::string>("bndbox.xmin"), where);
      lb.box.y_min = parse_coord(node.get<std::string>("bndbox.ymin"), where);
      lb.box.x_max = parse_coord(node.get<std::string>("bndbox.xmax"), where);
      lb.box.y_max = parse_coord(node.get<std::string>("bndbox.ymax"), where);
      check_box(lb.box, where);
      out.push_back(std::move(lb));
    } catch (const pt::ptree_error& e) {
      throw DataError(where + ": " + e.what());
    } catch (const DataError& e) {
      const std::string msg = e.what();
      throw DataError(msg.rfind(source, 0) == 0 ? msg : where + ": " + msg);
    }
  }
  return out;
}

std::vector<LabeledBox> parse_annotation_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<LabeledBox> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (lineno == 1 && !cells.empty() && cells[0] == "image") continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (cells.size() != 6) throw DataError(where + ": expected 6 fields, got " + std::to_string(cells.size()));
    LabeledBox lb;
    lb.image = cells[0];
    lb.box.x_min = parse_coord(cells[1], where);
    lb.box.y_min = parse_coord(cells[2], where);
    lb.box.x_max = parse_coord(cells[3], where);
    lb.box.y_max = parse_coord(cells[4], where);
    try {
      lb.box.label = parse_label(cells[5]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    check_box(lb.box, where);
    out.push_back(std::move(lb));
  }
  return out;
}

std::vector<LabeledBox> parse_annotations(const fs::path& path, AnnotationFormat format) {
  const std::string text = read_text(path);
  return format == AnnotationFormat::voc_xml ? parse_voc_xml(text, path.string())
                                             : parse_annotation_csv(text, path.string());
}

std::string to_voc_xml(const AnnotatedImage& image, const std::string& filename) {
  std::ostringstream os;
  os << "<annotation>\n"
     << "  <folder>images</folder>\n"
     << "  <filename>" << filename << "</filename>\n"
     << "  <size>\n    <width>" << image.image.width << "</width>\n    <height>" << image.image.height
     << "</height>\n    <depth>3</depth>\n  </size>\n";
  for (const auto& b : image.boxes) {
    os << "  <object>\n    <name>" << label_name(b.label) << "</name>\n    <pose>Unspecified</pose>\n"
       << "    <truncated>0</truncated>\n    <difficult>0</difficult>\n    <bndbox>\n"
       << "      <xmin>" << b.x_min << "</xmin>\n      <ymin>" << b.y_min << "</ymin>\n"
       << "      <xmax>" << b.x_max << "</xmax>\n      <ymax>" << b.y_max << "</ymax>\n"
       << "    </bndbox>\n  </object>\n";
  }
  os << "</annotation>\n";
  return os.str();
}

std::vector<Window> extract_windows(const AnnotatedImage& image) {
  std::vector<Window> out;
  const long w = static_cast<long>(image.image.width), h = static_cast<long>(image.image.height);
  for (const auto& b : image.boxes) {
    const long x0 = std::clamp(b.x_min, 0L, w), x1 = std::clamp(b.x_max, 0L, w);
    const long y0 = std::clamp(b.y_min, 0L, h), y1 = std::clamp(b.y_max, 0L, h);
    const long area = std::max(0L, x1 - x0) * std::max(0L, y1 - y0);
    if (area < 4) {
      throw DataError(image.id + ": box (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
                      std::to_string(b.x_max) + "," + std::to_string(b.y_max) + ") covers " + std::to_string(area) +
                      " px after clamping");
    }
    Window win;
    win.patch = crop(image.image, static_cast<std::size_t>(x0), static_cast<std::size_t>(y0),
                     static_cast<std::size_t>(x1), static_cast<std::size_t>(y1));
    win.label = b.label;
    win.source_id = image.id;
    win.source_box = b;
    out.push_back(std::move(win));
  }
  return out;
}

Tensor preprocess(const RgbImage& patch, std::size_t image_size) {
  if (patch.width == 0 || patch.height == 0) throw DataError("cannot preprocess an empty window");
  Tensor out({3, image_size, image_size});
  const std::size_t plane = image_size * image_size;
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor grid({patch.height, patch.width});
    for (std::size_t y = 0; y < patch.height; ++y)
      for (std::size_t x = 0; x < patch.width; ++x) grid.at(y, x) = patch.at(x, y, c);
    const Tensor resized = resize_bilinear(grid, image_size, image_size);
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = resized[i] / 255.0;
  }
  return out;
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > n) {
    throw std::invalid_argument("k-fold needs 2 <= k <= n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                   bool shuffle, Rng* rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (shuffle) {
    if (!rng) throw std::invalid_argument("shuffled batching needs a generator");
    for (std::size_t i = indices.size(); i > 1; --i) std::swap(indices[i - 1], indices[rng->below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < indices.size(); s += batch_size) {
    const std::size_t e = std::min(indices.size(), s + batch_size);
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(s), indices.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

std::vector<AnnotatedImage> load_dataset(const fs::path& dir) {
  const fs::path images_dir = dir / "images";
  if (!fs::is_directory(images_dir)) throw DataError("dataset has no images/ directory: " + dir.string());

  std::map<std::string, std::vector<BoundingBox>> boxes;  // keyed by image file name
  if (fs::exists(dir / "annotations.csv")) {
    for (auto& lb : parse_annotations(dir / "annotations.csv", AnnotationFormat::csv)) {
      boxes[fs::path(lb.image).filename().string()].push_back(lb.box);
    }
  } else if (fs::is_directory(dir / "annotations")) {
    std::vector<fs::path> xmls;
    for (const auto& e : fs::directory_iterator(dir / "annotations")) {
      if (e.path().extension() == ".xml") xmls.push_back(e.path());
    }
    std::sort(xmls.begin(), xmls.end());
    for (const auto& p : xmls) {
      auto parsed = parse_annotations(p, AnnotationFormat::voc_xml);
      for (auto& lb : parsed) {
        const std::string key = lb.image.empty() ? p.stem().string() + ".ppm" : fs::path(lb.image).filename().string();
        boxes[key].push_back(lb.box);
      }
    }
  } else {
    throw DataError("dataset has neither annotations.csv nor annotations/: " + dir.string());
  }

  std::vector<fs::path> ppms;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (e.path().extension() == ".ppm") ppms.push_back(e.path());
  }
  std::sort(ppms.begin(), ppms.end());
  std::vector<AnnotatedImage> out;
  for (const auto& p : ppms) {
    AnnotatedImage ai;
    ai.id = p.stem().string();
    ai.image = read_ppm(p);
    if (auto it = boxes.find(p.filename().string()); it != boxes.end()) ai.boxes = it->second;
    out.push_back(std::move(ai));
  }
  return out;
}

void save_dataset(const std::vector<AnnotatedImage>& images, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  for (const auto& ai : images) {
    const std::string file = ai.id + ".ppm";
    write_ppm(ai.image, dir / "images" / file);
    std::ofstream f(dir / "annotations" / (ai.id + ".xml"), std::ios::binary);
    if (!f) throw DataError("cannot write annotation for " + ai.id);
    f << to_voc_xml(ai, file);
  }
}

LabeledTensors LabeledTensors::subset(const std::vector<std::size_t>& indices) const {
  LabeledTensors out;
  for (auto i : indices) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

LabeledTensors prepare_windows(const std::vector<Window>& windows, std::size_t image_size) {
  LabeledTensors out;
  for (const auto& w : windows) {
    out.images.push_back(preprocess(w, image_size));
    out.labels.push_back(w.label);
  }
  return out;
}

std::vector<Window> extract_all_windows(const std::vector<AnnotatedImage>& images) {
  std::vector<Window> out;
  for (const auto& ai : images) {
    auto w = extract_windows(ai);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

}  // namespace stressvit
