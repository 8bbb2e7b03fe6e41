#include "stressvit/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace stressvit {

using detail::Node;

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(val().shape());
  return grad;
}

struct OpBuilder {
  static Var make(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    Tape* tape = nullptr;
    for (const Var* in : inputs) {
      if (!in->valid()) throw std::invalid_argument("operation on an empty Var");
      if (in->requires_grad()) {
        if (tape && tape != in->node_->tape) throw std::logic_error("operation mixes Vars from different tapes");
        tape = in->node_->tape;
      }
    }
    if (tape) {
      for (const Var* in : inputs) node->inputs.push_back(in->node_);
      node->tape = tape;
      node->backward = std::move(bw);
      tape->record(node);
    }
    return Var(std::move(node));
  }

  static Var make_many(Tensor value, std::span<const Var> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    Tape* tape = nullptr;
    for (const Var& in : inputs) {
      if (in.requires_grad()) {
        if (tape && tape != in.node_->tape) throw std::logic_error("operation mixes Vars from different tapes");
        tape = in.node_->tape;
      }
    }
    if (tape) {
      for (const Var& in : inputs) node->inputs.push_back(in.node_);
      node->tape = tape;
      node->backward = std::move(bw);
      tape->record(node);
    }
    return Var(std::move(node));
  }

  // A parameter has a single leaf per tape so that every use accumulates into it.
  static Var leaf(const Parameter& p, Tape* tape) {
    if (tape && p.trainable) {
      if (auto it = tape->params_.find(&p); it != tape->params_.end()) return Var(it->second);
    }
    auto node = std::make_shared<Node>();
    node->borrowed = &p.value;
    if (tape && p.trainable) {
      node->tape = tape;
      tape->params_[&p] = node;
    }
    return Var(std::move(node));
  }

  static std::shared_ptr<Node> node(const Var& v) { return v.node_; }
};

namespace {

// Adds `g` into the gradient of input `i` when that input requires one.
template <class F>
void accumulate(Node& self, std::size_t i, F&& fill) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad()) return;
  fill(in.grad_buffer());
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

}  // namespace

Var Tape::param(const Parameter& p) { return OpBuilder::leaf(p, this); }

void Tape::backward(const Var& loss) {
  if (!loss.valid() || loss.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     (loss.valid() ? shape_str(loss.shape()) : std::string("empty Var")));
  }
  auto root = OpBuilder::node(loss);
  if (root->tape != this) {
    if (root->tape == nullptr) return;  // nothing trainable contributed
    throw std::logic_error("loss was produced under a different tape");
  }
  for (auto& n : ops_) n->grad = Tensor();
  for (auto& [p, n] : params_) n->grad = Tensor();
  root->grad_buffer()[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

const Tensor* Tape::grad_of(const Parameter& p) const {
  auto it = params_.find(&p);
  if (it == params_.end() || it->second->grad.empty()) return nullptr;
  return &it->second->grad;
}

void Tape::clear() {
  ops_.clear();
  params_.clear();
}

Var leaf(const Parameter& p, Tape* tape) { return OpBuilder::leaf(p, tape); }

Var constant(Tensor t) { return OpBuilder::make(std::move(t), {}, nullptr); }

void backward(const Var& loss, Tape& tape, std::span<Parameter* const> params) {
  tape.backward(loss);
  for (Parameter* p : params) {
    const Tensor* g = p->trainable ? tape.grad_of(*p) : nullptr;
    p->grad = g ? *g : Tensor(p->value.shape());
  }
}

Var matmul(const Var& a, const Var& b) {
  return OpBuilder::make(kernels::matmul(a.value(), b.value()), {&a, &b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->val();
    const Tensor& bv = self.inputs[1]->val();
    accumulate(self, 0, [&](Tensor& g) { add_into(g, kernels::matmul(self.grad, kernels::transpose(bv))); });
    accumulate(self, 1, [&](Tensor& g) { add_into(g, kernels::matmul(kernels::transpose(av), self.grad)); });
  });
}

Var transpose(const Var& a) {
  return OpBuilder::make(kernels::transpose(a.value()), {&a}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { add_into(g, kernels::transpose(self.grad)); });
  });
}

Var add(const Var& a, const Var& b) {
  return OpBuilder::make(kernels::add(a.value(), b.value()), {&a, &b}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { add_into(g, self.grad); });
    accumulate(self, 1, [&](Tensor& g) { add_into(g, self.grad); });
  });
}

Var add_row(const Var& a, const Var& row) {
  return OpBuilder::make(kernels::add_row(a.value(), row.value()), {&a, &row}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { add_into(g, self.grad); });
    accumulate(self, 1, [&](Tensor& g) {
      const std::size_t n = self.grad.cols();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
    });
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return OpBuilder::make(std::move(out), {&a, &b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->val();
    const Tensor& bv = self.inputs[1]->val();
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    });
    accumulate(self, 1, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    });
  });
}

Var scale(const Var& a, double s) {
  return OpBuilder::make(kernels::scale(a.value(), s), {&a}, [s](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
  });
}

Var softmax_rows(const Var& x) {
  return OpBuilder::make(kernels::softmax_rows(x.value()), {&x}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const Tensor& y = self.value;
      const std::size_t n = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
      }
    });
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  auto res = std::make_shared<kernels::LayerNormResult>(
      kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps));
  Tensor out = res->out;
  return OpBuilder::make(std::move(out), {&x, &gamma, &beta}, [res](Node& self) {
    const Tensor& xh = res->normalized;
    const Tensor& gam = self.inputs[1]->val();
    const std::size_t d = xh.cols();
    accumulate(self, 0, [&](Tensor& g) {
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < xh.rows(); ++r) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dxh[j] = self.grad[r * d + j] * gam[j];
          sum_d += dxh[j];
          sum_dx += dxh[j] * xh[r * d + j];
        }
        const double k = res->inv_std[r] / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          g[r * d + j] += k * (static_cast<double>(d) * dxh[j] - sum_d - xh[r * d + j] * sum_dx);
        }
      }
    });
    accumulate(self, 1, [&](Tensor& g) {
      for (std::size_t r = 0; r < xh.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xh[r * d + j];
    });
    accumulate(self, 2, [&](Tensor& g) {
      for (std::size_t r = 0; r < xh.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    });
  });
}

Var gelu(const Var& x) {
  return OpBuilder::make(kernels::gelu(x.value()), {&x}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->val();
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * kernels::gelu_grad(xv[i]);
    });
  });
}

Var dropout(const Var& x, double p, bool training, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout in training mode needs a generator");
  auto mask = std::make_shared<Tensor>(x.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng->uniform() < p ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] *= m;
  }
  return OpBuilder::make(std::move(out), {&x}, [mask](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  return OpBuilder::make(kernels::slice_cols(x.value(), begin, end), {&x}, [begin](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const std::size_t w = self.grad.cols(), n = g.cols();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * n + begin + j] += self.grad[r * w + j];
    });
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin >= end || end > xv.dim(0)) {
    throw ShapeError("row slice out of range for " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.cols();
  Tensor out({end - begin, n});
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
            xv.data().begin() + static_cast<std::ptrdiff_t>(end * n), out.data().begin());
  return OpBuilder::make(std::move(out), {&x}, [begin](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const std::size_t off = begin * g.cols();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    });
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != m) throw ShapeError("concat_cols row mismatch");
    total += p.value().cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < v.cols(); ++j) out[r * total + off + j] = v[r * v.cols() + j];
    off += v.cols();
  }
  return OpBuilder::make_many(std::move(out), parts, [](Node& self) {
    const std::size_t total = self.grad.cols();
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      const std::size_t w = self.inputs[i]->val().cols();
      accumulate(self, i, [&](Tensor& g) {
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[r * total + off + j];
      });
      off += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().cols() != n) throw ShapeError("concat_rows column mismatch");
    rows += p.value().rows();
  }
  Tensor out({rows, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return OpBuilder::make_many(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      const std::size_t len = self.inputs[i]->val().size();
      accumulate(self, i, [&](Tensor& g) {
        for (std::size_t k = 0; k < len; ++k) g[k] += self.grad[off + k];
      });
      off += len;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  return OpBuilder::make(x.value().reshaped(std::move(shape)), {&x}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { add_into(g, self.grad); });
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return OpBuilder::make(Tensor::scalar(s), {&x}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      for (auto& v : g.data()) v += self.grad[0];
    });
  });
}

Var bce_with_logits(const Var& logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size()) {
    throw ShapeError("bce: " + std::to_string(labels.size()) + " labels for logits " + shape_str(z.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) throw std::invalid_argument("bce labels must be 0 or 1");
    // softplus(z) - y z, evaluated without overflow.
    total += std::max(z[i], 0.0) - y * z[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  const double n = static_cast<double>(z.size());
  std::vector<int> ys(labels.begin(), labels.end());
  return OpBuilder::make(Tensor::scalar(total / n), {&logits}, [ys = std::move(ys), n](Node& self) {
    const Tensor& zv = self.inputs[0]->val();
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-zv[i]));
        g[i] += self.grad[0] * (sig - ys[i]) / n;
      }
    });
  });
}

}  // namespace stressvit
