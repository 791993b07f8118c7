#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tinyhd/autograd.hpp"

namespace tinyhd {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

/// Momentum SGD: v <- momentum * v + g ; p <- p - lr * v.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<NamedParam<T>> params, double momentum)
      : params_(std::move(params)), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.var.shape());
  }

  /// Applies one update and zeroes the gradients.
  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.var.has_grad()) {
        throw ParameterError("parameter '" + p.name + "' has no gradient");
      }
    }
    const T mu = static_cast<T>(momentum_);
    const T rate = static_cast<T>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var<T> var = params_[k].var;
      auto& value = var.mutable_value();
      const auto& g = var.grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < value.numel(); ++i) {
        v[i] = mu * v[i] + g[i];
        value[i] -= rate * v[i];
      }
      var.zero_grad();
    }
  }

  const std::vector<NamedParam<T>>& params() const { return params_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_;
};

}  // namespace tinyhd
