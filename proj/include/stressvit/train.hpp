#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stressvit/autodiff.hpp"
#include "stressvit/data.hpp"
#include "stressvit/metrics.hpp"
#include "stressvit/optim.hpp"
#include "stressvit/vit.hpp"

namespace stressvit {

struct ScenarioConfig {
  std::string model = "TINY";
  std::optional<std::size_t> trainable_blocks;  // nullopt = all encoder blocks
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  std::optional<double> weight_decay;  // optimizer default when unset
  std::size_t patience = 5;
  double factor = 0.2;
  double min_lr = 0.0;
  std::optional<std::size_t> early_stop_patience;  // 2 x patience when unset
  std::size_t batch_size = 128;
  double attn_dropout = 0.0;
  double mlp_dropout = 0.0;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;

  std::size_t stop_patience() const { return early_stop_patience.value_or(2 * patience); }
  OptimizerConfig optimizer_config() const;
  // Preset architecture with this scenario's dropout rates.
  ViTConfig vit_config() const;
  void validate() const;
};

// Keys: trainable_blocks (integer or "all"), optimizer ("adam" | "adamw"), lr,
// patience, factor, batch_size, attn_dropout, mlp_dropout; optional model,
// max_epochs, seed, min_lr, early_stop_patience, weight_decay. Unknown keys are
// rejected.
ScenarioConfig parse_scenario(const std::string& json_text);
ScenarioConfig load_scenario(const std::filesystem::path& path);
std::string scenario_json(const ScenarioConfig& s);

// Mean binary cross-entropy on [B x 1] logits.
Var bce_loss(const Var& logits, std::span<const int> labels);

// Reduce-on-plateau plus early stopping, both watching validation loss.
class PlateauMonitor {
 public:
  struct Step {
    bool improved = false;
    bool reduced = false;
    bool stop = false;
    double lr = 0.0;  // rate for the next epoch
  };

  PlateauMonitor(double lr, std::size_t patience, double factor, double min_lr, std::size_t stop_patience,
                 double min_delta = 1e-6);

  // Reference loss before the first epoch.
  void set_baseline(double loss) { best_ = loss; }
  Step observe(double val_loss);

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t stale_epochs() const { return stale_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double min_lr_;
  std::size_t stop_patience_;
  double min_delta_;
  double best_;
  std::size_t stale_ = 0;
  std::size_t lr_stale_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0, train_accuracy = 0.0;
  double val_loss = 0.0, val_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  double initial_val_loss = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::size_t best_epoch = 0;  // 0 = the starting weights
  double best_val_loss = 0.0;
  std::string stop_reason;  // "early_stop" | "max_epochs"
};

std::string train_log_json(const TrainLog& log);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  // Replaces the measured validation loss of an epoch; epoch 0 is the
  // baseline measured before training starts.
  std::function<double(std::size_t epoch, double measured)> val_loss_override;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ViTModel model;  // weights of the best validation epoch
  TrainLog log;
};

// Fine-tunes a copy of `initial` under the scenario's freeze spec, optimizer and
// callbacks. Deterministic for a given scenario seed.
TrainResult run_training(const ScenarioConfig& scenario, const ViTModel& initial, const LabeledTensors& train,
                         const LabeledTensors& val, const TrainHooks& hooks = {});

struct LossAccuracy {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Eval-mode mean loss and 0.5-threshold accuracy.
LossAccuracy evaluate_loss(const ViTModel& model, const LabeledTensors& data, std::size_t batch_size = 64);

// Eval-mode scores and labels (score >= threshold is stressed).
Predictions predict_labels(const ViTModel& model, std::span<const Tensor> images, double threshold = 0.5,
                           std::size_t batch_size = 64);

// Pooled (final-norm class token) features, one row per image.
std::vector<std::vector<double>> extract_features(const ViTModel& model, std::span<const Tensor> images);

// Seeded shuffle split: the first round(n * val_fraction) shuffled indices form
// the validation part (at least one, at most n - 1).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_val_split(std::size_t n, double val_fraction,
                                                                              std::uint64_t seed);

}  // namespace stressvit
