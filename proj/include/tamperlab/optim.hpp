#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tamperlab/tensor.hpp"

namespace tamperlab {

/// Step-decayed learning rate with heavy-ball momentum.
struct SgdConfig {
  double learning_rate = 0.001;
  long decay_step = 40000;
  double decayed_rate = 0.0001;
  double momentum = 0.9;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("sgd: learning_rate must be positive");
    if (decay_step <= 0) throw std::invalid_argument("sgd: decay_step must be positive");
    if (!(decayed_rate > 0)) throw std::invalid_argument("sgd: decayed_rate must be positive");
    if (!(decayed_rate < learning_rate))
      throw std::invalid_argument("sgd: decayed_rate must be below learning_rate");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("sgd: momentum must lie in [0,1)");
  }

  double rate_at(long step) const { return step < decay_step ? learning_rate : decayed_rate; }
};

template <typename T>
class Sgd {
 public:
  /// `lr_scale`, when given, holds one learning-rate multiplier per parameter.
  Sgd(std::vector<TensorPtr<T>> params, SgdConfig config, std::vector<double> lr_scale = {})
      : params_(std::move(params)), lr_scale_(std::move(lr_scale)), config_(config) {
    config_.validate();
    if (lr_scale_.empty()) lr_scale_.assign(params_.size(), 1.0);
    if (lr_scale_.size() != params_.size())
      throw std::invalid_argument("sgd: " + std::to_string(lr_scale_.size()) + " lr multipliers for " +
                                  std::to_string(params_.size()) + " parameters");
    for (double s : lr_scale_)
      if (!(s > 0)) throw std::invalid_argument("sgd: lr multipliers must be positive");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p->size(), T{0});
  }

  /// p <- p - lr(step) * v with v <- momentum * v + grad; gradients are released afterwards.
  void step(long step_index) {
    for (const auto& p : params_)
      if (!p->has_grad())
        throw std::logic_error("sgd_step: parameter of shape " + shape_string(p->shape()) +
                               " has no gradient");
    const T mu = static_cast<T>(config_.momentum);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const T lr = static_cast<T>(config_.rate_at(step_index) * lr_scale_[i]);
      auto& p = *params_[i];
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        p[j] -= lr * v[j];
      }
      p.clear_grad();
    }
  }

  const SgdConfig& config() const noexcept { return config_; }
  const std::vector<TensorPtr<T>>& params() const noexcept { return params_; }

 private:
  std::vector<TensorPtr<T>> params_;
  std::vector<double> lr_scale_;
  std::vector<AlignedVector<T>> velocity_;
  SgdConfig config_;
};

/// Single momentum-free update, for callers that keep no optimizer state.
template <typename T>
void sgd_step(std::span<const TensorPtr<T>> params, const SgdConfig& config, long step) {
  SgdConfig plain = config;
  plain.momentum = 0;
  Sgd<T> opt(std::vector<TensorPtr<T>>(params.begin(), params.end()), plain);
  opt.step(step);
}

}  // namespace tamperlab
