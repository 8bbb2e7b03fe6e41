#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "stressvit/autodiff.hpp"
#include "stressvit/rng.hpp"
#include "stressvit/tensor.hpp"
#include "stressvit/vit.hpp"

namespace testutil {

using namespace stressvit;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences over every entry of every listed parameter. `analytic`
// holds the gradients produced by backward for the same parameters, in order.
// The relative error denominator is floored at `floor` so that entries whose
// true gradient is zero are not judged by round-off alone.
inline GradCheck finite_difference_check(std::vector<NamedParameter> params, const std::vector<Tensor>& analytic,
                                         const std::function<double()>& loss, double h = 1e-5,
                                         double floor = 1e-6) {
  GradCheck out;
  auto fmt = [](double x) {
    std::ostringstream os;
    os << std::setprecision(6) << x;
    return os.str();
  };
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& v = params[p].param->value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = loss();
      v[i] = orig - h;
      const double down = loss();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[p].name + "[" + std::to_string(i) + "] analytic " + fmt(a) + " numeric " +
                    fmt(numeric);
      }
    }
  }
  return out;
}

// Reproduces the BCE of the forward pass without recording.
inline double bce_value(const Tensor& logits, const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = logits[i];
    s += std::max(z, 0.0) - labels[i] * z + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<double>(labels.size());
}

// Random weights with a spread wide enough that every path carries gradient.
inline ViTModel spread_model(const ViTConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  ViTModel m(cfg);
  for (auto& np : m.named_parameters()) {
    Tensor& v = np.param->value;
    const bool is_gamma = np.name.find("gamma") != std::string::npos;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (is_gamma ? 1.0 : 0.0) + scale * (2.0 * rng.uniform() - 1.0);
  }
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("stressvit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
