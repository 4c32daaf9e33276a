#include "reusegate/optim.hpp"

#include <cmath>

namespace reusegate {

template <typename S>
Parameter<S>::Parameter(std::string param_name, Tensor<S> tensor) : name(std::move(param_name)), value(std::move(tensor)) {
  if (!value.requires_grad()) value.set_requires_grad(true);
  reset_optimizer_state();
}

template <typename S>
void Parameter<S>::reset_optimizer_state() {
  first_moment = Tensor<S>::Array::Zero(value.numel());
  second_moment = Tensor<S>::Array::Zero(value.numel());
  step = 0;
}

template <typename S>
void adam_step(std::span<Parameter<S>* const> params, const AdamConfig& cfg) {
  for (Parameter<S>* p : params) {
    if (!p->value.requires_grad()) throw invalid_state("adam_step: parameter '" + p->name + "' has no gradient");
  }
  for (Parameter<S>* p : params) {
    const auto& g = p->value.grad();
    ++p->step;
    p->first_moment = S(cfg.beta1) * p->first_moment + S(1 - cfg.beta1) * g;
    p->second_moment = S(cfg.beta2) * p->second_moment + S(1 - cfg.beta2) * g.square();
    const double c1 = 1.0 - std::pow(cfg.beta1, double(p->step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(p->step));
    p->value.data() -= S(cfg.lr) * (p->first_moment / S(c1)) / ((p->second_moment / S(c2)).sqrt() + S(cfg.eps));
    p->value.zero_grad();
  }
}

template struct Parameter<float>;
template struct Parameter<double>;
template void adam_step(std::span<Parameter<float>* const>, const AdamConfig&);
template void adam_step(std::span<Parameter<double>* const>, const AdamConfig&);

}  // namespace reusegate
