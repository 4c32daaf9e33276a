#include "reusegate/tensor.hpp"

#include <sstream>

namespace reusegate {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_flops = 0;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::uint64_t instrumented_flops() { return g_flops; }
void reset_instrumented_flops() { g_flops = 0; }
void add_instrumented_flops(std::uint64_t count) { g_flops += count; }

template <typename S>
Tensor<S>::Tensor(const Shape& shape, bool requires_grad) : node_(std::make_shared<Node<S>>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw std::invalid_argument("negative tensor extent " + shape.str());
  }
  node_->shape = shape;
  node_->data = Array::Zero(shape.numel());
  set_requires_grad(requires_grad);
}

template <typename S>
Tensor<S>::Tensor(const Shape& shape, Array values, bool requires_grad) : Tensor(shape, requires_grad) {
  if (values.size() != shape.numel()) {
    throw std::invalid_argument("value count does not match shape " + shape.str());
  }
  node_->data = std::move(values);
}

template <typename S>
Tensor<S> Tensor<S>::full(const Shape& shape, S value) {
  Tensor t(shape);
  t.data().setConstant(value);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  Tensor t({1, 1, 1, 1}, requires_grad);
  t.data()(0) = value;
  return t;
}

template <typename S>
typename Tensor<S>::Array& Tensor<S>::grad() {
  if (!requires_grad()) throw invalid_state("tensor does not track gradients");
  return node_->grad;
}

template <typename S>
const typename Tensor<S>::Array& Tensor<S>::grad() const {
  if (!requires_grad()) throw invalid_state("tensor does not track gradients");
  return node_->grad;
}

template <typename S>
void Tensor<S>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw invalid_state("cannot toggle gradient tracking on a non-leaf tensor");
  node_->requires_grad = on;
  if (on) {
    node_->grad = Array::Zero(node_->data.size());
  } else {
    node_->grad.resize(0);
  }
}

template <typename S>
void Tensor<S>::zero_grad() {
  if (node_->requires_grad) node_->grad.setZero();
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape().str());
  return node_->data(0);
}

template <typename S>
S Tensor<S>::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->data(((Eigen::Index(n) * s.c + c) * s.h + h) * s.w + w);
}

template <typename S>
S& Tensor<S>::at(int n, int c, int h, int w) {
  const Shape& s = node_->shape;
  return node_->data(((Eigen::Index(n) * s.c + c) * s.h + h) * s.w + w);
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename S>
Tape<S>& Tape<S>::current() {
  thread_local Tape tape;
  return tape;
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  for (Entry& e : entries_) {
    e.output->reached = false;
    e.output->grad.setZero();
    for (auto& in : e.inputs) in->reached = false;
  }
  loss.node()->reached = true;
  loss.node()->grad(0) += S(1);

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->reached) continue;
    it->backward();
    for (auto& in : it->inputs) {
      if (in->requires_grad) in->reached = true;
    }
  }
}

template <typename S>
Tensor<S> make_op_result(const Shape& shape, const std::vector<Tensor<S>>& inputs) {
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  Tensor<S> out(shape);
  if (track) {
    out.node()->requires_grad = true;
    out.node()->is_leaf = false;
    out.node()->grad = Node<S>::Array::Zero(shape.numel());
  }
  return out;
}

template <typename S>
void record_op(const Tensor<S>& out, const std::vector<Tensor<S>>& inputs, std::function<void()> fn) {
  if (!out.requires_grad()) return;
  typename Tape<S>::Entry e;
  e.output = out.node();
  e.inputs.reserve(inputs.size());
  for (const auto& t : inputs) e.inputs.push_back(t.node());
  e.backward = std::move(fn);
  Tape<S>::current().record(std::move(e));
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_op_result(const Shape&, const std::vector<Tensor<float>>&);
template Tensor<double> make_op_result(const Shape&, const std::vector<Tensor<double>>&);
template void record_op(const Tensor<float>&, const std::vector<Tensor<float>>&, std::function<void()>);
template void record_op(const Tensor<double>&, const std::vector<Tensor<double>>&, std::function<void()>);

}  // namespace reusegate
