#pragma once

#include <functional>
#include <span>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

/// Topologically ordered record of every tracked node reachable from a loss.
/// Inputs precede outputs; replaying in reverse visits each node once.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::span<detail::Node* const> nodes() const { return nodes_; }

  /// Seeds the loss adjoint with 1 and propagates in reverse order.
  void replay_adjoints();

 private:
  std::vector<detail::Node*> nodes_;
  detail::NodePtr root_;
};

/// Fills grad buffers with d(loss)/d(leaf). Leaf gradients accumulate across
/// calls; intermediate adjoints are reset on every call.
void backward(const Tensor& loss);

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
/// `f` must rebuild its graph from the current values of `params`.
double finite_difference_check(const std::function<Tensor()>& f,
                               std::span<Tensor> params, double eps);

}  // namespace msda
