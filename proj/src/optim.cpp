#include "stressvit/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace stressvit {

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "adam" || name == "Adam") return OptimizerKind::adam;
  if (name == "adamw" || name == "AdamW") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected adam or adamw)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "adamw"; }

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("optimizer betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("optimizer eps must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
}

void optimizer_step(std::span<Parameter* const> params, const OptimizerConfig& config) {
  config.validate();
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (p->grad.shape() != p->value.shape()) {
      throw ShapeError("gradient shape " + shape_str(p->grad.shape()) + " does not match parameter " +
                       shape_str(p->value.shape()));
    }
    MomentState& st = p->moments;
    if (st.first.empty()) {
      st.first = Tensor(p->value.shape());
      st.second = Tensor(p->value.shape());
    }
    st.step += 1;
    const double t = static_cast<double>(st.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);

    auto theta = p->value.data();
    auto grad = p->grad.data();
    auto m = st.first.data();
    auto v = st.second.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad[i];
      if (config.kind == OptimizerKind::adamw) {
        theta[i] -= config.lr * config.weight_decay * theta[i];
      } else if (config.weight_decay > 0.0) {
        g += config.weight_decay * theta[i];
      }
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

}  // namespace stressvit
