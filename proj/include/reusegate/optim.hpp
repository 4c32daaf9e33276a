#pragma once

#include "reusegate/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace reusegate {

/// Named trainable tensor plus its Adam moment buffers.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  typename Tensor<S>::Array first_moment;
  typename Tensor<S>::Array second_moment;
  long step = 0;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<S> tensor);

  void reset_optimizer_state();
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update per parameter, then zeroes the grads.
/// Throws invalid_state if a parameter does not track gradients.
template <typename S>
void adam_step(std::span<Parameter<S>* const> params, const AdamConfig& cfg);

template <typename S>
void zero_grads(std::span<Parameter<S>* const> params) {
  for (Parameter<S>* p : params) p->value.zero_grad();
}

}  // namespace reusegate
