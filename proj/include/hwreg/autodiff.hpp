#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hwreg/error.hpp"
#include "hwreg/tensor.hpp"

namespace hwreg {

template <typename T>
class Tape;

/// One recorded operation. The adjoint reads the incoming cotangent, the
/// values of its parents, and whatever extra buffers the forward pass chose to
/// keep in `saved`; it accumulates into the parents' gradients.
template <typename T>
struct Node {
  std::shared_ptr<const Tensor<T>> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::shared_ptr<const Tensor<T>>> saved;
  std::function<void(Node&)> backward;
  std::string op = "leaf";
  bool requires_grad = false;

  const Tensor<T>& parent_value(std::size_t i) const { return *parents[i]->value; }
  bool parent_needs_grad(std::size_t i) const { return parents[i]->requires_grad; }

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros_like(*value);
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    if (grad.empty())
      grad = g;
    else
      grad += g;
  }
};

/// Trainable tensor plus its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros_like(value)) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Handle to a value that may be recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(std::shared_ptr<Node<T>> node, Tape<T>* tape) : node_(std::move(node)), tape_(tape) {}

  /// Untracked value (no tape).
  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::make_shared<const Tensor<T>>(std::move(v));
    return Var(std::move(n), nullptr);
  }

  const Tensor<T>& value() const { return *node_->value; }
  const Shape& shape() const { return node_->value->shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  bool requires_grad() const { return node_->requires_grad; }
  Tape<T>* tape() const noexcept { return tape_; }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Gradient accumulated by the last backward pass (zeros if none arrived).
  Tensor<T> grad() const {
    return node_->grad.empty() ? Tensor<T>::zeros_like(value()) : node_->grad;
  }

 private:
  std::shared_ptr<Node<T>> node_;
  Tape<T>* tape_ = nullptr;
};

/// Records operations in execution order for one reverse sweep. A tape has a
/// single owner; distinct tapes are independent.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::make_shared<const Tensor<T>>(std::move(v));
    return Var<T>(std::move(n), this);
  }

  /// Differentiable input whose gradient is read back through Var::grad().
  Var<T> leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::make_shared<const Tensor<T>>(std::move(v));
    n->requires_grad = true;
    return Var<T>(std::move(n), this);
  }

  /// Differentiable input bound to a Parameter; backward adds into p.grad.
  Var<T> param(Parameter<T>& p) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::make_shared<const Tensor<T>>(p.value);
    n->requires_grad = true;
    n->op = "param";
    Parameter<T>* target = &p;
    n->backward = [target](Node<T>& self) {
      if (target->grad.shape() != target->value.shape()) target->grad = Tensor<T>::zeros_like(target->value);
      target->grad += self.grad;
    };
    nodes_.push_back(n);
    return Var<T>(std::move(n), this);
  }

  void push(std::shared_ptr<Node<T>> n) { nodes_.push_back(std::move(n)); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node<T>>>& nodes() const noexcept { return nodes_; }

  /// Reverse sweep from a scalar loss. Consumes the tape.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1)
      throw DimensionError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    if (loss.tape() != this || !loss.requires_grad())
      throw ValidationError("backward: loss is not recorded on this tape");
    loss.node()->grad = Tensor<T>(loss.shape(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n);
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient in op " + n.op);
    }
    for (auto& n : nodes_) {
      if (n->op != "param" && !n->parents.empty()) n->grad = Tensor<T>();
    }
    nodes_.clear();
  }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Builds the result of an op. The node is recorded only when some input
/// needs a gradient and lives on a tape.
template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, const char* op,
                   std::function<void(Node<T>&)> backward,
                   std::vector<std::shared_ptr<const Tensor<T>>> saved = {}) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  Tape<T>* tape = nullptr;
  bool needs = false;
  for (const Var<T>& v : inputs) {
    if (v.tape()) {
      if (tape && tape != v.tape()) throw ValidationError(std::string(op) + ": inputs live on different tapes");
      tape = v.tape();
    }
    needs = needs || v.requires_grad();
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::make_shared<const Tensor<T>>(std::move(value));
  n->op = op;
  if (tape && needs) {
    n->requires_grad = true;
    for (const Var<T>& v : inputs) n->parents.push_back(v.node());
    n->saved = std::move(saved);
    n->backward = std::move(backward);
    tape->push(n);
  }
  return Var<T>(std::move(n), tape);
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  return make_result<T>(a.value() + b.value(), {a, b}, "add", [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (self.parent_needs_grad(i)) self.parents[i]->accumulate(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "sub");
  return make_result<T>(a.value() - b.value(), {a, b}, "sub", [](Node<T>& self) {
    if (self.parent_needs_grad(0)) self.parents[0]->accumulate(self.grad);
    if (self.parent_needs_grad(1)) self.parents[1]->accumulate(self.grad * T(-1));
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, "mul", [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      const Tensor<T>& other = self.parent_value(1 - p);
      Tensor<T>& g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(a.value() * s, {a}, "scale", [s](Node<T>& self) {
    self.parents[0]->accumulate(self.grad * s);
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  return make_result<T>(Tensor<T>({1}, static_cast<T>(a.value().sum())), {a}, "sum", [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    const T s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
  Tensor<T> out(a.shape());
  const Tensor<T>& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : slope * x[i];
  return make_result<T>(std::move(out), {a}, "leaky_relu", [slope](Node<T>& self) {
    const Tensor<T>& xin = self.parent_value(0);
    Tensor<T>& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (xin[i] > 0 ? T(1) : slope);
  });
}

/// gamma * tanh(x), with magnitudes kept strictly below gamma even where tanh
/// rounds to one.
template <typename T>
Var<T> tanh_clamp(const Var<T>& a, T gamma) {
  if (!(gamma > 0)) throw ValidationError("tanh_clamp: gamma must be positive");
  const T below = std::nextafter(gamma, T(0));
  Tensor<T> out(a.shape());
  const Tensor<T>& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = gamma * std::tanh(x[i]);
    out[i] = std::clamp(v, -below, below);
  }
  return make_result<T>(std::move(out), {a}, "tanh_clamp", [gamma](Node<T>& self) {
    const Tensor<T>& xin = self.parent_value(0);
    Tensor<T>& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T t = std::tanh(xin[i]);
      g[i] += self.grad[i] * gamma * (T(1) - t * t);
    }
  });
}

/// Concatenates along the leading (channel) axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw DimensionError("concat_channels: " + shape_string(sa) + " vs " + shape_string(sb));
  Shape so = sa;
  so[0] = sa[0] + sb[0];
  std::vector<T> data(a.value().storage());
  data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
  const std::size_t na = a.value().size();
  return make_result<T>(Tensor<T>(so, std::move(data)), {a, b}, "concat", [na](Node<T>& self) {
    if (self.parent_needs_grad(0)) {
      Tensor<T>& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      Tensor<T>& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Shape orig = a.shape();
  return make_result<T>(a.value().reshaped(std::move(shape)), {a}, "reshape", [orig](Node<T>& self) {
    self.parents[0]->accumulate(self.grad.reshaped(orig));
  });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace hwreg
