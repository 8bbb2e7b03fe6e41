#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stressvit/svm.hpp"

namespace stressvit {

struct FeatureSet {
  FeatureMatrix x;
  std::vector<int> y;
};

class FeatureParseError : public std::runtime_error {
 public:
  FeatureParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// CSV with header f0,...,f{d-1},label and values at 17 significant digits.
std::string format_features(const FeatureMatrix& x, std::span<const int> y);
FeatureSet parse_features(const std::string& text);

void write_features(const FeatureMatrix& x, std::span<const int> y, const std::filesystem::path& path);
FeatureSet read_features(const std::filesystem::path& path);

}  // namespace stressvit
