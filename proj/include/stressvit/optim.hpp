#pragma once

#include <span>
#include <string>
#include <string_view>

#include "stressvit/autodiff.hpp"

namespace stressvit {

enum class OptimizerKind { adam, adamw };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // AdamW: decoupled decay. Adam: classic L2 term folded into the gradient.
  double weight_decay = 0.01;

  static OptimizerConfig adam(double lr = 1e-3) { return {OptimizerKind::adam, lr, 0.9, 0.999, 1e-8, 0.0}; }
  static OptimizerConfig adamw(double lr = 1e-3) { return {OptimizerKind::adamw, lr, 0.9, 0.999, 1e-8, 0.01}; }

  void validate() const;
};

// One bias-corrected Adam/AdamW update of every trainable parameter using the
// gradient stored in Parameter::grad. Frozen parameters are not touched.
void optimizer_step(std::span<Parameter* const> params, const OptimizerConfig& config);

}  // namespace stressvit
