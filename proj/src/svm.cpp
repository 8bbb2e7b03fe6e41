#include "stressvit/svm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace stressvit {

double kernel_eval(std::span<const double> x, std::span<const double> z, const KernelSpec& spec) {
  if (x.size() != z.size()) {
    throw std::invalid_argument("kernel dimension mismatch: " + std::to_string(x.size()) + " vs " +
                                std::to_string(z.size()));
  }
  if (spec.kind == KernelKind::linear) {
    double dot = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * z[i];
    return dot;
  }
  if (!spec.gamma || !(*spec.gamma > 0.0)) throw std::invalid_argument("rbf kernel needs a resolved gamma > 0");
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - z[i]) * (x[i] - z[i]);
  return std::exp(-*spec.gamma * d2);
}

double scale_gamma(const FeatureMatrix& x) {
  if (x.empty() || x[0].empty()) throw std::invalid_argument("scale_gamma on empty features");
  const double n = static_cast<double>(x.size() * x[0].size());
  double mean = 0.0;
  for (const auto& r : x)
    for (double v : r) mean += v;
  mean /= n;
  double var = 0.0;
  for (const auto& r : x)
    for (double v : r) var += (v - mean) * (v - mean);
  var /= n;
  return var > 0.0 ? 1.0 / (static_cast<double>(x[0].size()) * var) : 1.0;
}

void SvmTrainConfig::validate() const {
  if (!(C > 0.0)) throw std::invalid_argument("SVM C must be positive");
  if (!(tol > 0.0)) throw std::invalid_argument("SVM tol must be positive");
  if (kernel.kind == KernelKind::rbf && kernel.gamma && !(*kernel.gamma > 0.0)) {
    throw std::invalid_argument("rbf gamma must be positive");
  }
}

double dual_objective(const FeatureMatrix& x, std::span<const int> y, std::span<const double> alpha,
                      const KernelSpec& kernel) {
  double lin = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lin += alpha[i];
    if (alpha[i] == 0.0) continue;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (alpha[j] == 0.0) continue;
      quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel_eval(x[i], x[j], kernel);
    }
  }
  return lin - 0.5 * quad;
}

namespace {

SvmSolution assemble(const FeatureMatrix& x, const std::vector<int>& y, std::vector<double> alpha,
                     const std::vector<double>& grad, const KernelSpec& kernel, double c, std::size_t iters) {
  const std::size_t n = x.size();
  // Bias from free vectors; midpoint of the feasible interval otherwise.
  double sum_free = 0.0;
  std::size_t n_free = 0;
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double yg = -y[i] * grad[i];
    if (alpha[i] > 0.0 && alpha[i] < c) {
      sum_free += yg;
      ++n_free;
    } else {
      const bool at_upper = alpha[i] >= c;
      // Bounded vectors constrain b from one side.
      if ((y[i] == 1) != at_upper) {
        lb = std::max(lb, yg);
      } else {
        ub = std::min(ub, yg);
      }
    }
  }
  double bias = 0.0;
  if (n_free > 0) {
    bias = sum_free / static_cast<double>(n_free);
  } else if (std::isfinite(ub) && std::isfinite(lb)) {
    bias = 0.5 * (ub + lb);
  } else {
    bias = std::isfinite(ub) ? ub : (std::isfinite(lb) ? lb : 0.0);
  }

  SvmSolution sol;
  sol.y = y;
  SvmModel& m = sol.model;
  m.kernel = kernel;
  m.bias = bias;
  m.C = c;
  m.dims = x.empty() ? 0 : x[0].size();
  m.iterations = iters;
  double lin = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lin += alpha[i];
    quad += alpha[i] * (grad[i] + 1.0);
    if (alpha[i] > 0.0) {
      m.support_vectors.push_back(x[i]);
      m.dual_coef.push_back(alpha[i] * y[i]);
      m.support_indices.push_back(i);
    }
  }
  sol.objective = lin - 0.5 * quad;
  sol.alpha = std::move(alpha);
  return sol;
}

}  // namespace

SvmSolution train_svm_solution(const FeatureMatrix& x, std::span<const int> labels, const SvmTrainConfig& config) {
  config.validate();
  const std::size_t n = x.size();
  if (n < 2) throw SvmError("SVM training needs at least two samples");
  if (labels.size() != n) throw SvmError("feature/label count mismatch");
  const std::size_t d = x[0].size();
  if (d == 0) throw SvmError("SVM features must be non-empty");
  for (const auto& r : x) {
    if (r.size() != d) throw SvmError("ragged feature matrix");
  }
  std::vector<int> y(n);
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw SvmError("SVM labels must be 0 or 1");
    y[i] = labels[i] == 1 ? 1 : -1;
    (y[i] > 0 ? pos : neg) = true;
  }
  if (!pos || !neg) throw SvmError("SVM training needs both classes present");

  KernelSpec kernel = config.kernel;
  if (kernel.kind == KernelKind::rbf && !kernel.gamma) kernel.gamma = scale_gamma(x);

  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) k[i * n + j] = k[j * n + i] = kernel_eval(x[i], x[j], kernel);

  const double c = config.C;
  std::vector<double> alpha(n, 0.0);
  std::vector<double> grad(n, -1.0);  // Q alpha - 1
  constexpr double tau = 1e-12;

  auto in_up = [&](std::size_t t) { return y[t] == 1 ? alpha[t] < c : alpha[t] > 0.0; };
  auto in_low = [&](std::size_t t) { return y[t] == 1 ? alpha[t] > 0.0 : alpha[t] < c; };

  for (std::size_t iter = 0;; ++iter) {
    std::size_t i = n, j = n;
    double m_up = -std::numeric_limits<double>::infinity(), m_low = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -y[t] * grad[t];
      if (in_up(t) && v > m_up) {
        m_up = v;
        i = t;
      }
      if (in_low(t) && v < m_low) {
        m_low = v;
        j = t;
      }
    }
    if (i == n || j == n || m_up - m_low < config.tol) return assemble(x, y, alpha, grad, kernel, c, iter);
    if (iter >= config.max_iter) {
      throw SvmNotConverged("SMO did not converge within " + std::to_string(config.max_iter) +
                                " iterations (KKT gap " + std::to_string(m_up - m_low) + ")",
                            assemble(x, y, alpha, grad, kernel, c, iter));
    }

    double a = k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j];
    if (a <= 0.0) a = tau;
    double step = (m_up - m_low) / a;
    // Box limits along the direction (+y_i, -y_j).
    const double room_i = y[i] == 1 ? c - alpha[i] : alpha[i];
    const double room_j = y[j] == 1 ? alpha[j] : c - alpha[j];
    bool clip_i = false, clip_j = false;
    if (step >= room_i) {
      step = room_i;
      clip_i = true;
    }
    if (step >= room_j) {
      step = room_j;
      clip_j = true;
      clip_i = step >= room_i;
    }
    const double new_i = clip_i ? (y[i] == 1 ? c : 0.0) : alpha[i] + y[i] * step;
    const double new_j = clip_j ? (y[j] == 1 ? 0.0 : c) : alpha[j] - y[j] * step;
    const double di = new_i - alpha[i], dj = new_j - alpha[j];
    alpha[i] = new_i;
    alpha[j] = new_j;
    for (std::size_t t = 0; t < n; ++t) {
      grad[t] += y[t] * (y[i] * di * k[t * n + i] + y[j] * dj * k[t * n + j]);
    }
  }
}

SvmModel train_svm(const FeatureMatrix& x, std::span<const int> labels, const SvmTrainConfig& config) {
  return train_svm_solution(x, labels, config).model;
}

double decision_function(const SvmModel& model, std::span<const double> x) {
  if (x.size() != model.dims) {
    throw std::invalid_argument("decision_function: expected " + std::to_string(model.dims) + " features, got " +
                                std::to_string(x.size()));
  }
  double f = model.bias;
  for (std::size_t s = 0; s < model.support_vectors.size(); ++s) {
    f += model.dual_coef[s] * kernel_eval(model.support_vectors[s], x, model.kernel);
  }
  return f;
}

int predict(const SvmModel& model, std::span<const double> x) { return decision_function(model, x) > 0.0 ? 1 : 0; }

void save_svm_model(const SvmModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "stressvit-svm";
  j["version"] = 1;
  j["kernel"] = {{"kind", model.kernel.kind == KernelKind::linear ? "linear" : "rbf"}};
  if (model.kernel.kind == KernelKind::rbf) j["kernel"]["gamma"] = *model.kernel.gamma;
  j["C"] = model.C;
  j["dims"] = model.dims;
  j["bias"] = model.bias;
  j["dual_coef"] = model.dual_coef;
  j["support_vectors"] = model.support_vectors;
  std::ofstream f(path);
  if (!f) throw SvmError("cannot write " + path.string());
  f << j.dump(1) << '\n';
}

SvmModel load_svm_model(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw SvmError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(f);
    if (j.at("format") != "stressvit-svm" || j.at("version") != 1) throw SvmError("unsupported SVM model format");
    SvmModel m;
    const std::string kind = j.at("kernel").at("kind");
    if (kind == "linear") {
      m.kernel = KernelSpec::linear();
    } else if (kind == "rbf") {
      m.kernel = KernelSpec::rbf(j.at("kernel").at("gamma").get<double>());
    } else {
      throw SvmError("unknown kernel kind '" + kind + "'");
    }
    m.C = j.at("C");
    m.dims = j.at("dims");
    m.bias = j.at("bias");
    m.dual_coef = j.at("dual_coef").get<std::vector<double>>();
    m.support_vectors = j.at("support_vectors").get<FeatureMatrix>();
    if (m.dual_coef.size() != m.support_vectors.size()) throw SvmError("support vector / coefficient count mismatch");
    for (const auto& sv : m.support_vectors) {
      if (sv.size() != m.dims) throw SvmError("support vector dimension mismatch");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SvmError(path.string() + ": " + e.what());
  }
}

}  // namespace stressvit
