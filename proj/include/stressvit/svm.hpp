#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stressvit {

enum class KernelKind { linear, rbf };

struct KernelSpec {
  KernelKind kind = KernelKind::rbf;
  // Used for rbf only. Unset means "scale": 1 / (d * Var(X)), resolved at training time.
  std::optional<double> gamma;

  static KernelSpec linear() { return {KernelKind::linear, std::nullopt}; }
  static KernelSpec rbf(double g) { return {KernelKind::rbf, g}; }
  static KernelSpec rbf_scale() { return {KernelKind::rbf, std::nullopt}; }
};

using FeatureRow = std::vector<double>;
using FeatureMatrix = std::vector<FeatureRow>;

double kernel_eval(std::span<const double> x, std::span<const double> z, const KernelSpec& spec);

// sklearn's gamma="scale" for a feature matrix.
double scale_gamma(const FeatureMatrix& x);

struct SvmTrainConfig {
  double C = 1.0;
  double tol = 1e-3;
  std::size_t max_iter = 1'000'000;
  KernelSpec kernel = KernelSpec::rbf_scale();
  std::uint64_t seed = 0;

  void validate() const;
};

struct SvmModel {
  FeatureMatrix support_vectors;
  std::vector<double> dual_coef;  // alpha_i * y_i
  std::vector<std::size_t> support_indices;  // positions in the training set
  double bias = 0.0;
  KernelSpec kernel;  // gamma always resolved
  double C = 1.0;
  std::size_t dims = 0;
  std::size_t iterations = 0;

  std::size_t size() const { return support_vectors.size(); }
};

// Full dual solution kept alongside the model, indexed like the training set.
struct SvmSolution {
  SvmModel model;
  std::vector<double> alpha;
  std::vector<int> y;  // +1 / -1
  double objective = 0.0;
};

class SvmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SvmNotConverged : public SvmError {
 public:
  SvmNotConverged(const std::string& what, SvmSolution best) : SvmError(what), best_(std::move(best)) {}
  const SvmSolution& best() const { return best_; }

 private:
  SvmSolution best_;
};

// Soft-margin dual solved by SMO with maximal-violating-pair selection.
// Labels are {0,1}; 1 (stressed) maps to y = +1.
SvmSolution train_svm_solution(const FeatureMatrix& x, std::span<const int> labels, const SvmTrainConfig& config);
SvmModel train_svm(const FeatureMatrix& x, std::span<const int> labels, const SvmTrainConfig& config);

double decision_function(const SvmModel& model, std::span<const double> x);
// 1 iff decision_function > 0.
int predict(const SvmModel& model, std::span<const double> x);

// W(alpha) = sum alpha - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij.
double dual_objective(const FeatureMatrix& x, std::span<const int> y_pm, std::span<const double> alpha,
                      const KernelSpec& kernel);

void save_svm_model(const SvmModel& model, const std::filesystem::path& path);
SvmModel load_svm_model(const std::filesystem::path& path);

}  // namespace stressvit
