#include "stressvit/feature_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace stressvit {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

std::string format_features(const FeatureMatrix& x, std::span<const int> y) {
  if (x.size() != y.size()) throw std::invalid_argument("feature/label count mismatch");
  const std::size_t d = x.empty() ? 0 : x[0].size();
  std::string out;
  for (std::size_t j = 0; j < d; ++j) out += "f" + std::to_string(j) + ",";
  out += "label\n";
  char buf[40];
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != d) throw std::invalid_argument("ragged feature rows");
    for (double v : x[i]) {
      std::snprintf(buf, sizeof buf, "%.17g,", v);
      out += buf;
    }
    out += std::to_string(y[i]) + "\n";
  }
  return out;
}

FeatureSet parse_features(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw FeatureParseError(1, "missing header");
  const auto header = split_csv(line);
  if (header.empty() || header.back() != "label") throw FeatureParseError(1, "header must end with a label column");
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw FeatureParseError(1, "expected header cell f" + std::to_string(j) + ", got '" + header[j] + "'");
    }
  }
  FeatureSet set;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != d + 1) {
      throw FeatureParseError(lineno, "expected " + std::to_string(d + 1) + " cells, got " +
                                          std::to_string(cells.size()));
    }
    FeatureRow row(d);
    for (std::size_t j = 0; j < d; ++j) {
      const std::string& c = cells[j];
      auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), row[j]);
      if (ec != std::errc() || ptr != c.data() + c.size() || c.empty()) {
        throw FeatureParseError(lineno, "non-numeric cell '" + c + "' in column f" + std::to_string(j));
      }
    }
    const std::string& lab = cells[d];
    if (lab != "0" && lab != "1") throw FeatureParseError(lineno, "label must be 0 or 1, got '" + lab + "'");
    set.x.push_back(std::move(row));
    set.y.push_back(lab == "1" ? 1 : 0);
  }
  return set;
}

void write_features(const FeatureMatrix& x, std::span<const int> y, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << format_features(x, y);
}

FeatureSet read_features(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_features(ss.str());
}

}  // namespace stressvit
