#include "dfa/optim.hpp"

#include <cmath>

#include "dfa/kernels.hpp"

namespace dfa {

namespace kn = dfa::kernels;

void zero_grads(std::span<NamedParam> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

static void require_grad_present(const NamedParam& p) {
  if (!p.tensor.has_grad())
    throw NumericError("optimizer: parameter '" + p.name + "' has no gradient");
}

void Sgd::step(std::span<NamedParam> params) {
  for (auto& p : params) {
    require_grad_present(p);
    auto* key = p.tensor.impl().get();
    auto it = state_.find(key);
    if (it == state_.end()) {
      State st;
      st.owner = p.tensor.impl();
      st.velocity = Buffer(p.tensor.numel(), p.tensor.dtype());
      it = state_.emplace(key, std::move(st)).first;
    }
    dispatch_dtype(p.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      kn::sgd_update(p.tensor.data<T>().data(), key->grad.data<T>(),
                     it->second.velocity.data<T>(), p.tensor.numel(),
                     static_cast<T>(cfg_.lr), static_cast<T>(cfg_.momentum),
                     static_cast<T>(cfg_.weight_decay));
    });
  }
}

void Adam::step(std::span<NamedParam> params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& p : params) {
    require_grad_present(p);
    auto* key = p.tensor.impl().get();
    auto it = state_.find(key);
    if (it == state_.end()) {
      State st;
      st.owner = p.tensor.impl();
      st.m = Buffer(p.tensor.numel(), p.tensor.dtype());
      st.v = Buffer(p.tensor.numel(), p.tensor.dtype());
      it = state_.emplace(key, std::move(st)).first;
    }
    dispatch_dtype(p.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      kn::adam_update(p.tensor.data<T>().data(), key->grad.data<T>(),
                      it->second.m.data<T>(), it->second.v.data<T>(), p.tensor.numel(),
                      static_cast<T>(cfg_.lr), static_cast<T>(cfg_.beta1),
                      static_cast<T>(cfg_.beta2), static_cast<T>(cfg_.eps),
                      static_cast<T>(cfg_.weight_decay), cfg_.decoupled_weight_decay,
                      static_cast<T>(bc1), static_cast<T>(bc2));
    });
  }
}

}  // namespace dfa
