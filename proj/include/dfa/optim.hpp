#pragma once

// SGD with momentum and Adam, operating in place on named parameter lists.
// Optimizer state (velocity / moment buffers) is keyed by parameter identity
// and created lazily on the first step.

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfa/tensor.hpp"

namespace dfa {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

void zero_grads(std::span<NamedParam> params);

class Sgd {
 public:
  struct Config {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
  };

  explicit Sgd(Config cfg) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // v <- momentum*v + grad + wd*param;  param <- param - lr*v
  // Throws NumericError naming the parameter if its gradient is missing.
  void step(std::span<NamedParam> params);

 private:
  struct State {
    std::shared_ptr<TensorImpl> owner;  // pins identity of the keyed param
    Buffer velocity;
  };
  Config cfg_;
  std::unordered_map<TensorImpl*, State> state_;
};

class Adam {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
    // Coupled (L2-into-gradient) decay by default; decoupled available.
    bool decoupled_weight_decay = false;
  };

  explicit Adam(Config cfg) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t step_count() const { return t_; }

  void step(std::span<NamedParam> params);

 private:
  struct State {
    std::shared_ptr<TensorImpl> owner;
    Buffer m, v;
  };
  Config cfg_;
  std::unordered_map<TensorImpl*, State> state_;
  int64_t t_ = 0;  // completed steps; bias corrections use t_+1 during step()
};

}  // namespace dfa
