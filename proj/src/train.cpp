#include "stressvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace stressvit {

OptimizerConfig ScenarioConfig::optimizer_config() const {
  OptimizerConfig c = optimizer == OptimizerKind::adam ? OptimizerConfig::adam(lr) : OptimizerConfig::adamw(lr);
  if (weight_decay) c.weight_decay = *weight_decay;
  return c;
}

ViTConfig ScenarioConfig::vit_config() const {
  ViTConfig c = ViTConfig::preset(model);
  c.attn_dropout = attn_dropout;
  c.mlp_dropout = mlp_dropout;
  return c;
}

void ScenarioConfig::validate() const {
  const ViTConfig c = vit_config();
  c.validate();
  if (trainable_blocks && *trainable_blocks > c.num_layers) {
    throw std::invalid_argument("trainable_blocks " + std::to_string(*trainable_blocks) + " exceeds the " +
                                std::to_string(c.num_layers) + " encoder blocks of " + model);
  }
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("factor must lie in (0, 1)");
  if (min_lr < 0.0) throw std::invalid_argument("min_lr must be non-negative");
  if (stop_patience() < 1) throw std::invalid_argument("early_stop_patience must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be at least 1");
  optimizer_config().validate();
}

ScenarioConfig parse_scenario(const std::string& json_text) {
  static const std::set<std::string> known{"model",        "trainable_blocks", "optimizer",   "lr",
                                           "patience",     "factor",           "batch_size",  "attn_dropout",
                                           "mlp_dropout",  "max_epochs",       "seed",        "min_lr",
                                           "early_stop_patience", "weight_decay", "name"};
  static const char* required[] = {"trainable_blocks", "optimizer",    "lr",          "patience",
                                   "factor",           "batch_size",   "attn_dropout", "mlp_dropout"};
  ScenarioConfig s;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (!j.is_object()) throw std::invalid_argument("scenario must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) throw std::invalid_argument("unknown scenario key '" + key + "'");
    }
    for (const char* key : required) {
      if (!j.contains(key)) throw std::invalid_argument(std::string("scenario is missing '") + key + "'");
    }
    if (j.contains("model")) s.model = j["model"].get<std::string>();
    const auto& tb = j["trainable_blocks"];
    if (tb.is_string()) {
      if (tb.get<std::string>() != "all") throw std::invalid_argument("trainable_blocks must be an integer or \"all\"");
    } else {
      if (!tb.is_number_unsigned()) throw std::invalid_argument("trainable_blocks must be a non-negative integer");
      s.trainable_blocks = tb.get<std::size_t>();
    }
    s.optimizer = parse_optimizer_kind(j["optimizer"].get<std::string>());
    s.lr = j["lr"];
    s.patience = j["patience"];
    s.factor = j["factor"];
    s.batch_size = j["batch_size"];
    s.attn_dropout = j["attn_dropout"];
    s.mlp_dropout = j["mlp_dropout"];
    if (j.contains("max_epochs")) s.max_epochs = j["max_epochs"];
    if (j.contains("seed")) s.seed = j["seed"];
    if (j.contains("min_lr")) s.min_lr = j["min_lr"];
    if (j.contains("early_stop_patience")) s.early_stop_patience = j["early_stop_patience"].get<std::size_t>();
    if (j.contains("weight_decay")) s.weight_decay = j["weight_decay"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad scenario: ") + e.what());
  }
  s.validate();
  return s;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scenario " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse_scenario(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string scenario_json(const ScenarioConfig& s) {
  nlohmann::json j;
  j["model"] = s.model;
  if (s.trainable_blocks) j["trainable_blocks"] = *s.trainable_blocks;
  else j["trainable_blocks"] = "all";
  j["optimizer"] = to_string(s.optimizer);
  j["lr"] = s.lr;
  j["weight_decay"] = s.optimizer_config().weight_decay;
  j["patience"] = s.patience;
  j["factor"] = s.factor;
  j["min_lr"] = s.min_lr;
  j["early_stop_patience"] = s.stop_patience();
  j["batch_size"] = s.batch_size;
  j["attn_dropout"] = s.attn_dropout;
  j["mlp_dropout"] = s.mlp_dropout;
  j["max_epochs"] = s.max_epochs;
  j["seed"] = s.seed;
  return j.dump(2) + "\n";
}

Var bce_loss(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[1] != 1 || s[0] != labels.size()) {
    throw ShapeError("bce_loss: logits " + shape_str(s) + " for " + std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("bce_loss: label " + std::to_string(y) + " is not 0 or 1");
  }
  return bce_with_logits(logits, labels);
}

PlateauMonitor::PlateauMonitor(double lr, std::size_t patience, double factor, double min_lr,
                               std::size_t stop_patience, double min_delta)
    : lr_(lr),
      patience_(patience),
      factor_(factor),
      min_lr_(min_lr),
      stop_patience_(stop_patience),
      min_delta_(min_delta),
      best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1 || stop_patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("factor must lie in (0, 1)");
}

PlateauMonitor::Step PlateauMonitor::observe(double val_loss) {
  Step step;
  if (val_loss < best_ - min_delta_) {
    best_ = val_loss;
    stale_ = 0;
    lr_stale_ = 0;
    step.improved = true;
  } else {
    ++stale_;
    ++lr_stale_;
    if (stale_ >= stop_patience_) {
      step.stop = true;
    } else if (lr_stale_ >= patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      lr_stale_ = 0;
      step.reduced = true;
    }
  }
  step.lr = lr_;
  return step;
}

std::string train_log_json(const TrainLog& log) {
  nlohmann::json j;
  j["initial_val_loss"] = log.initial_val_loss;
  auto epochs = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy},
                      {"lr", e.lr}});
  }
  j["epochs"] = epochs;
  j["stop_epoch"] = log.stop_epoch;
  j["stop_reason"] = log.stop_reason;
  j["best_epoch"] = log.best_epoch;
  j["best_val_loss"] = log.best_val_loss;
  return j.dump(2) + "\n";
}

namespace {

Tensor gather(const LabeledTensors& data, std::span<const std::size_t> idx, std::vector<int>& labels) {
  std::vector<Tensor> imgs;
  imgs.reserve(idx.size());
  labels.clear();
  for (auto i : idx) {
    imgs.push_back(data.images[i]);
    labels.push_back(data.labels[i]);
  }
  return stack_images(imgs);
}

void check_split(const LabeledTensors& d, const char* name) {
  if (d.size() == 0) throw TrainingError(std::string(name) + " split is empty");
  if (d.images.size() != d.labels.size()) throw TrainingError(std::string(name) + " split has mismatched labels");
}

}  // namespace

LossAccuracy evaluate_loss(const ViTModel& model, const LabeledTensors& data, std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_loss on an empty set");
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> labels;
  for (const auto& batch : make_batches(all, batch_size, false, nullptr)) {
    const Tensor x = gather(data, batch, labels);
    const Var logits = constant(vit_logits(model, x));
    loss += bce_loss(logits, labels).value().item() * static_cast<double>(batch.size());
    const auto pred = predictions_from_logits(logits.value().data());
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred.labels[i] == labels[i];
  }
  const double n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

Predictions predict_labels(const ViTModel& model, std::span<const Tensor> images, double threshold,
                           std::size_t batch_size) {
  Predictions out;
  for (std::size_t s = 0; s < images.size(); s += batch_size) {
    const std::size_t e = std::min(images.size(), s + batch_size);
    const Tensor logits = vit_logits(model, stack_images(images.subspan(s, e - s)));
    const auto p = predictions_from_logits(logits.data(), threshold);
    out.scores.insert(out.scores.end(), p.scores.begin(), p.scores.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

std::vector<std::vector<double>> extract_features(const ViTModel& model, std::span<const Tensor> images) {
  std::vector<std::vector<double>> rows;
  rows.reserve(images.size());
  for (const auto& im : images) rows.push_back(pooled_representation(model, im).values());
  return rows;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_val_split(std::size_t n, double val_fraction,
                                                                              std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("train/val split needs at least two samples");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  const auto n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction)),
                                             1, n - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

TrainResult run_training(const ScenarioConfig& scenario, const ViTModel& initial, const LabeledTensors& train,
                         const LabeledTensors& val, const TrainHooks& hooks) {
  scenario.validate();
  check_split(train, "training");
  check_split(val, "validation");
  if (std::find(train.labels.begin(), train.labels.end(), 0) == train.labels.end() ||
      std::find(train.labels.begin(), train.labels.end(), 1) == train.labels.end()) {
    throw TrainingError("training split must contain both classes");
  }
  const ViTConfig arch = scenario.vit_config();
  if (!arch.same_shape(initial.config)) throw TrainingError("initial weights do not match scenario model " + scenario.model);

  ViTModel model = initial;
  model.config = arch;
  set_trainable(model, scenario.trainable_blocks ? FreezeSpec::last(*scenario.trainable_blocks) : FreezeSpec::all());
  for (auto* p : model.parameters()) p->moments = {};
  const auto params = model.parameters();

  OptimizerConfig opt = scenario.optimizer_config();
  PlateauMonitor monitor(opt.lr, scenario.patience, scenario.factor, scenario.min_lr, scenario.stop_patience());
  Rng rng(scenario.seed);

  TrainResult result;
  double baseline = evaluate_loss(model, val).loss;
  if (hooks.val_loss_override) baseline = hooks.val_loss_override(0, baseline);
  monitor.set_baseline(baseline);
  result.log.initial_val_loss = baseline;
  result.log.best_val_loss = baseline;
  result.model = model;

  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> labels;
  result.log.stop_reason = "max_epochs";

  for (std::size_t epoch = 1; epoch <= scenario.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_no = 0;
    for (const auto& batch : make_batches(all, scenario.batch_size, true, &rng)) {
      ++batch_no;
      const Tensor x = gather(train, batch, labels);
      Tape tape;
      const ForwardResult fwd = vit_forward(model, x, {true, false}, &tape, &rng);
      const Var loss = bce_loss(fwd.logits, labels);
      const double l = loss.value().item();
      if (!std::isfinite(l)) {
        throw TrainingError("non-finite training loss " + std::to_string(l) + " at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(batch_no) + " (lr " + std::to_string(opt.lr) + ")");
      }
      backward(loss, tape, params);
      optimizer_step(params, opt);
      loss_sum += l * static_cast<double>(batch.size());
      const auto pred = predictions_from_logits(fwd.logits.value().data());
      for (std::size_t i = 0; i < labels.size(); ++i) correct += pred.labels[i] == labels[i];
    }
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    const LossAccuracy v = evaluate_loss(model, val);
    rec.val_loss = hooks.val_loss_override ? hooks.val_loss_override(epoch, v.loss) : v.loss;
    rec.val_accuracy = v.accuracy;
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.log.epochs.push_back(rec);
    result.log.stop_epoch = epoch;
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const auto step = monitor.observe(rec.val_loss);
    if (rec.val_loss < result.log.best_val_loss) {
      result.log.best_epoch = epoch;
      result.log.best_val_loss = rec.val_loss;
      result.model = model;
    }
    if (step.stop) {
      result.log.stop_reason = "early_stop";
      break;
    }
    opt.lr = step.lr;
  }
  for (auto* p : result.model.parameters()) {
    p->moments = {};
    p->zero_grad();
  }
  return result;
}

}  // namespace stressvit
