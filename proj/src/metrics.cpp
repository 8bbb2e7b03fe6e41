#include "stressvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace stressvit {

Confusion confusion_matrix(std::span<const int> predicted, std::span<const int> truth, int positive) {
  if (predicted.empty()) throw std::invalid_argument("confusion matrix of an empty prediction set");
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("confusion matrix: " + std::to_string(predicted.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " labels");
  }
  Confusion c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] == positive, t = truth[i] == positive;
    if (p && t) ++c.tp;
    else if (!p && !t) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

namespace {

ClassMetrics class_metrics(std::size_t hit, std::size_t false_alarm, std::size_t miss) {
  ClassMetrics m;
  const auto ratio = [](std::size_t num, std::size_t den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(hit, hit + false_alarm, m.precision_undefined);
  m.recall = ratio(hit, hit + miss, m.recall_undefined);
  m.f1_undefined = m.precision + m.recall == 0.0;
  m.f1 = m.f1_undefined ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

}  // namespace

ClassificationMetrics classification_metrics(const Confusion& c) {
  if (c.total() == 0) throw std::invalid_argument("metrics of an empty confusion matrix");
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  m.stressed = class_metrics(c.tp, c.fp, c.fn);
  m.healthy = class_metrics(c.tn, c.fn, c.fp);
  return m;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Predictions predictions_from_logits(std::span<const double> logits, double threshold) {
  Predictions p;
  p.scores.reserve(logits.size());
  p.labels.reserve(logits.size());
  for (double z : logits) {
    const double s = sigmoid(z);
    p.scores.push_back(s);
    p.labels.push_back(s >= threshold ? 1 : 0);
  }
  return p;
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> truth) {
  if (scores.size() != truth.size()) throw std::invalid_argument("roc_curve: score/label count mismatch");
  std::size_t pos = 0;
  for (int t : truth) pos += t == 1;
  const std::size_t neg = truth.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("roc_curve needs both classes in the ground truth");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (truth[order[i]] == 1 ? tp : fp)++;
    out.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), s});
  }
  return out;
}

double auc(std::span<const RocPoint> roc) {
  double area = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  }
  return area;
}

namespace {

// Curve points are sorted by fpr; at a vertical run the highest tpr wins.
double interpolate_tpr(const std::vector<RocPoint>& roc, double f) {
  std::size_t hi = 0;
  while (hi < roc.size() && roc[hi].fpr <= f) ++hi;
  if (hi == 0) return roc.front().tpr;
  const RocPoint& a = roc[hi - 1];
  if (a.fpr == f || hi == roc.size()) return a.tpr;
  const RocPoint& b = roc[hi];
  return a.tpr + (b.tpr - a.tpr) * (f - a.fpr) / (b.fpr - a.fpr);
}

}  // namespace

std::vector<RocPoint> mean_roc(const std::vector<std::vector<RocPoint>>& curves, std::size_t grid_points) {
  if (curves.empty()) throw std::invalid_argument("mean_roc of no curves");
  if (grid_points < 2) throw std::invalid_argument("mean_roc needs at least two grid points");
  std::vector<RocPoint> out(grid_points);
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double f = static_cast<double>(g) / static_cast<double>(grid_points - 1);
    double sum = 0.0;
    for (const auto& c : curves) sum += interpolate_tpr(c, f);
    out[g] = {f, sum / static_cast<double>(curves.size()), std::numeric_limits<double>::quiet_NaN()};
  }
  out.front().tpr = 0.0;
  out.back().tpr = 1.0;
  return out;
}

namespace {

bool both_classes(std::span<const int> truth) {
  const auto pos = std::count(truth.begin(), truth.end(), 1);
  return pos > 0 && static_cast<std::size_t>(pos) < truth.size();
}

}  // namespace

EvalReport evaluate_predictions(const Predictions& pred, std::span<const int> truth) {
  if (pred.labels.size() != truth.size() || pred.scores.size() != truth.size()) {
    throw std::invalid_argument("evaluate: prediction/label count mismatch");
  }
  EvalReport r;
  r.confusion = confusion_matrix(pred.labels, truth);
  r.metrics = classification_metrics(r.confusion);
  if (both_classes(truth)) {
    r.roc = roc_curve(pred.scores, truth);
    r.auc = auc(r.roc);
  }
  return r;
}

EvalReport kfold_evaluate(std::span<const int> labels, std::size_t k, std::uint64_t seed, const FoldPipeline& pipeline) {
  const auto folds = kfold_split(labels.size(), k, seed);
  Predictions pooled;
  pooled.scores.assign(labels.size(), 0.0);
  pooled.labels.assign(labels.size(), 0);
  std::vector<FoldResult> results;
  std::vector<std::vector<RocPoint>> curves;

  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<std::size_t> train;
    for (std::size_t g = 0; g < folds.size(); ++g) {
      if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(train.begin(), train.end());
    const auto& test = folds[f];
    FoldResult fr;
    fr.fold = f;
    fr.samples = test.size();
    try {
      const Predictions p = pipeline(train, test);
      if (p.scores.size() != test.size() || p.labels.size() != test.size()) {
        throw std::runtime_error("pipeline returned " + std::to_string(p.labels.size()) + " predictions for " +
                                 std::to_string(test.size()) + " samples");
      }
      std::vector<int> truth;
      for (auto i : test) truth.push_back(labels[i]);
      for (std::size_t t = 0; t < test.size(); ++t) {
        pooled.scores[test[t]] = p.scores[t];
        pooled.labels[test[t]] = p.labels[t];
      }
      const EvalReport single = evaluate_predictions(p, truth);
      fr.confusion = single.confusion;
      fr.accuracy = single.metrics.accuracy;
      if (single.roc.empty()) throw std::runtime_error("held-out fold contains a single class; AUC undefined");
      fr.roc = single.roc;
      fr.auc = single.auc;
    } catch (const FoldError&) {
      throw;
    } catch (const std::exception& e) {
      throw FoldError(f, e.what());
    }
    curves.push_back(fr.roc);
    results.push_back(std::move(fr));
  }

  EvalReport r = evaluate_predictions(pooled, labels);
  const double kf = static_cast<double>(results.size());
  for (const auto& fr : results) {
    r.mean_accuracy += fr.accuracy / kf;
    r.mean_auc += fr.auc / kf;
  }
  for (const auto& fr : results) r.std_auc += (fr.auc - r.mean_auc) * (fr.auc - r.mean_auc) / kf;
  r.std_auc = std::sqrt(r.std_auc);
  r.mean_roc = mean_roc(curves);
  r.folds = std::move(results);
  return r;
}

namespace {

nlohmann::json confusion_json(const Confusion& c) {
  return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}};
}

nlohmann::json class_json(const ClassMetrics& m) {
  nlohmann::json j{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
  std::vector<std::string> undefined;
  if (m.precision_undefined) undefined.emplace_back("precision");
  if (m.recall_undefined) undefined.emplace_back("recall");
  if (m.f1_undefined) undefined.emplace_back("f1");
  if (!undefined.empty()) j["undefined"] = undefined;
  return j;
}

nlohmann::json roc_json(std::span<const RocPoint> roc) {
  auto arr = nlohmann::json::array();
  for (const auto& p : roc) arr.push_back({p.fpr, p.tpr});
  return arr;
}

}  // namespace

std::string eval_report_json(const EvalReport& r) {
  nlohmann::json j;
  j["samples"] = r.confusion.total();
  j["confusion"] = confusion_json(r.confusion);
  j["accuracy"] = r.metrics.accuracy;
  j["stressed"] = class_json(r.metrics.stressed);
  j["healthy"] = class_json(r.metrics.healthy);
  if (!r.roc.empty()) {
    j["auc"] = r.auc;
    j["roc"] = roc_json(r.roc);
  }
  if (!r.folds.empty()) {
    auto folds = nlohmann::json::array();
    for (const auto& f : r.folds) {
      folds.push_back({{"fold", f.fold},
                       {"samples", f.samples},
                       {"confusion", confusion_json(f.confusion)},
                       {"accuracy", f.accuracy},
                       {"auc", f.auc}});
    }
    j["folds"] = folds;
    j["mean_accuracy"] = r.mean_accuracy;
    j["mean_auc"] = r.mean_auc;
    j["std_auc"] = r.std_auc;
    j["mean_roc"] = roc_json(r.mean_roc);
  }
  return j.dump(2) + "\n";
}

std::string roc_csv(std::span<const RocPoint> roc) {
  std::string out = "fpr,tpr,threshold\n";
  char buf[96];
  for (const auto& p : roc) {
    if (std::isinf(p.threshold)) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,inf\n", p.fpr, p.tpr);
    } else if (std::isnan(p.threshold)) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,\n", p.fpr, p.tpr);
    } else {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.fpr, p.tpr, p.threshold);
    }
    out += buf;
  }
  return out;
}

}  // namespace stressvit
