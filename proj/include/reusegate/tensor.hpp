#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace reusegate {

/// Raised when an operation is invoked on an object that is not in a usable
/// state (missing gradient, uninitialized tracker, absent pyramid level).
class invalid_state : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  Eigen::Index numel() const { return Eigen::Index(n) * c * h * w; }
  Eigen::Index plane() const { return Eigen::Index(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename S>
struct Node {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;
  Array grad;  // empty unless requires_grad
  bool requires_grad = false;
  bool is_leaf = true;
  bool reached = false;
};

/// Dense (n, c, h, w) array with shared ownership of its storage. Copies of
/// a Tensor alias the same node, so a parameter held by a layer and by the
/// parameter registry is one object.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(const Shape& shape, bool requires_grad = false);
  Tensor(const Shape& shape, Array values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor full(const Shape& shape, S value);
  static Tensor scalar(S value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Eigen::Index numel() const { return node_->shape.numel(); }

  Array& data() { return node_->data; }
  const Array& data() const { return node_->data; }
  Array& grad();
  const Array& grad() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Only leaves may toggle gradient tracking; allocates or drops the buffer.
  void set_requires_grad(bool on);
  void zero_grad();

  S item() const;
  S at(int n, int c, int h, int w) const;
  S& at(int n, int c, int h, int w);

  /// Same values, fresh leaf with no gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Ordered record of executed differentiable operations. One tape per scalar
/// type per thread; ops record onto Tape<S>::current().
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::shared_ptr<Node<S>> output;
    std::vector<std::shared_ptr<Node<S>>> inputs;
    BackwardFn backward;
  };

  static Tape& current();

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf grads
  /// accumulate across calls; intermediate grads are recomputed each call.
  void backward(const Tensor<S>& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>::current().backward(loss);
}

bool grad_enabled();

/// Disables taping for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Allocates an op output that tracks gradients iff taping is enabled and
/// any input tracks gradients.
template <typename S>
Tensor<S> make_op_result(const Shape& shape, const std::vector<Tensor<S>>& inputs);

/// Records `fn` on the current tape when `out` tracks gradients.
template <typename S>
void record_op(const Tensor<S>& out, const std::vector<Tensor<S>>& inputs, std::function<void()> fn);

// Instrumented operation counter. Every forward primitive adds its
// arithmetic count (2 per multiply-add for convolutions, one per output
// element for pooling/resampling, one per input element for averaging).
std::uint64_t instrumented_flops();
void reset_instrumented_flops();
void add_instrumented_flops(std::uint64_t count);

}  // namespace reusegate
