#include "stressvit/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace stressvit {

std::string encode_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  return out;
}

void write_ppm(const RgbImage& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_ppm(image);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageIoError("failed writing " + path.string());
}

namespace {

// Reads one header token, skipping whitespace and '#' comments.
std::string next_token(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  return s.substr(start, pos - start);
}

std::size_t parse_dim(const std::string& tok, const char* what) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ImageIoError(std::string("PPM: bad ") + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace

RgbImage decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  if (next_token(bytes, pos) != "P6") throw ImageIoError("PPM: only binary P6 images are supported");
  const std::size_t w = parse_dim(next_token(bytes, pos), "width");
  const std::size_t h = parse_dim(next_token(bytes, pos), "height");
  const std::size_t maxval = parse_dim(next_token(bytes, pos), "maxval");
  if (w == 0 || h == 0) throw ImageIoError("PPM: empty image");
  if (maxval != 255) throw ImageIoError("PPM: maxval must be 255, got " + std::to_string(maxval));
  ++pos;  // single whitespace byte before the raster
  if (bytes.size() < pos + w * h * 3) throw ImageIoError("PPM: truncated raster");
  RgbImage img(w, h);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), w * h * 3, img.rgb.begin());
  return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_ppm(ss.str());
  } catch (const ImageIoError& e) {
    throw ImageIoError(path.string() + ": " + e.what());
  }
}

Tensor resize_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  if (grid.rank() != 2) throw ShapeError("resize_bilinear expects a 2-D grid, got " + shape_str(grid.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear output dimensions must be positive");
  const std::size_t in_h = grid.dim(0), in_w = grid.dim(1);
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);

  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t n_out, std::size_t n_in, double s) {
    std::vector<Tap> t(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * s - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      const std::size_t hi = std::min(lo + 1, n_in - 1);
      t[i] = {lo, hi, src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(out_h, in_h, sy);
  const auto tx = taps(out_w, in_w, sx);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const double a = grid.at(ty[y].lo, tx[x].lo), b = grid.at(ty[y].lo, tx[x].hi);
      const double c = grid.at(ty[y].hi, tx[x].lo), d = grid.at(ty[y].hi, tx[x].hi);
      const double fx = tx[x].frac, fy = ty[y].frac;
      const double top = fx == 0.0 ? a : a + (b - a) * fx;
      const double bot = fx == 0.0 ? c : c + (d - c) * fx;
      out.at(y, x) = fy == 0.0 ? top : top + (bot - top) * fy;
    }
  }
  return out;
}

RgbImage crop(const RgbImage& image, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
  if (x0 >= x1 || y0 >= y1 || x1 > image.width || y1 > image.height) {
    throw std::out_of_range("crop rectangle outside image");
  }
  RgbImage out(x1 - x0, y1 - y0);
  for (std::size_t y = y0; y < y1; ++y) {
    std::copy_n(image.rgb.begin() + static_cast<std::ptrdiff_t>((y * image.width + x0) * 3), (x1 - x0) * 3,
                out.rgb.begin() + static_cast<std::ptrdiff_t>((y - y0) * out.width * 3));
  }
  return out;
}

}  // namespace stressvit
