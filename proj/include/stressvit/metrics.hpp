#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stressvit/data.hpp"

namespace stressvit {

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  bool operator==(const Confusion&) const = default;
};

// Counts with `positive` as the positive class.
Confusion confusion_matrix(std::span<const int> predicted, std::span<const int> truth, int positive = kStressed);

// A zero denominator yields 0 and sets the matching flag.
struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  ClassMetrics stressed;  // TP as its true positives
  ClassMetrics healthy;   // TN as its true positives
};

ClassificationMetrics classification_metrics(const Confusion& c);

double sigmoid(double z);

struct Predictions {
  std::vector<double> scores;  // higher means more likely stressed
  std::vector<int> labels;     // predicted class
};

Predictions predictions_from_logits(std::span<const double> logits, double threshold = 0.5);

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
  double threshold = 0.0;  // +inf for the (0,0) origin
};

// One point per distinct score (descending), preceded by the origin.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> truth);

// Trapezoidal area under the curve.
double auc(std::span<const RocPoint> roc);

// TPR averaged vertically over `grid_points` evenly spaced FPR values in [0,1];
// each curve is linearly interpolated, pinned to 0 at FPR 0 and to 1 at FPR 1.
std::vector<RocPoint> mean_roc(const std::vector<std::vector<RocPoint>>& curves, std::size_t grid_points = 101);

struct FoldResult {
  std::size_t fold = 0;
  std::size_t samples = 0;
  Confusion confusion;
  double accuracy = 0.0;
  double auc = 0.0;
  std::vector<RocPoint> roc;
};

struct EvalReport {
  Confusion confusion;
  ClassificationMetrics metrics;
  std::vector<RocPoint> roc;
  double auc = 0.0;

  std::vector<FoldResult> folds;  // empty unless cross-validated
  double mean_accuracy = 0.0;
  double mean_auc = 0.0;
  double std_auc = 0.0;  // population standard deviation across folds
  std::vector<RocPoint> mean_roc;
};

// Single-split report. AUC and ROC are omitted (empty / 0) when only one class is present.
EvalReport evaluate_predictions(const Predictions& pred, std::span<const int> truth);

class FoldError : public std::runtime_error {
 public:
  FoldError(std::size_t fold, const std::string& what)
      : std::runtime_error("fold " + std::to_string(fold) + ": " + what), fold_(fold) {}
  std::size_t fold() const { return fold_; }

 private:
  std::size_t fold_;
};

// Fits on the training indices and scores the held-out ones, in order.
using FoldPipeline =
    std::function<Predictions(const std::vector<std::size_t>& train, const std::vector<std::size_t>& test)>;

// k fit/score cycles over kfold_split(n, k, seed). The pooled confusion, ROC and
// metrics cover every sample once; per-fold results and their means are attached.
EvalReport kfold_evaluate(std::span<const int> labels, std::size_t k, std::uint64_t seed, const FoldPipeline& pipeline);

std::string eval_report_json(const EvalReport& report);
std::string roc_csv(std::span<const RocPoint> roc);

}  // namespace stressvit
