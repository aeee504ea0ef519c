#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msda {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a computation produces or receives a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

// One value in the computation graph. Non-leaf nodes keep their inputs alive
// and a closure that pushes `grad` into the inputs' grad buffers.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool grad_allocated = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of doubles with optional gradient tracking.
///
/// A Tensor is a cheap handle: copies share the same underlying node, so a
/// parameter stored in a layer and in a registry is one value. Use `detach()`
/// or `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  // Spans view storage owned by the node; a temporary handle may be the last
  // owner, so these are unavailable on rvalues.
  std::span<const double> data() const&;
  std::span<const double> data() const&& = delete;
  std::span<double> data_mut() &;
  std::span<double> data_mut() && = delete;
  double item() const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  /// Untracked copy of the current value.
  Tensor detach() const;
  /// Independent leaf with the same value and tracking flag.
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Engine internals.
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  const detail::NodePtr& node() const { return node_; }

 private:
  detail::Node& checked() const;
  detail::NodePtr node_;
};

/// Process-wide (per thread) switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Creates an op result. Records inputs and the backward closure only when
// recording is enabled and at least one input is tracked.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, const char* op,
                   BackwardFn backward);

}  // namespace detail

}  // namespace msda
