#include "msda/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace msda {

ComputationTape ComputationTape::record(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError(
        "backward on an untracked value: the loss does not depend on any "
        "tensor with requires_grad");
  }

  ComputationTape tape;
  tape.root_ = loss.node();
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS; graphs from deep conv stacks are shallow but
  // loss graphs over many minibatch terms can be wide.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void ComputationTape::replay_adjoints() {
  for (auto* node : nodes_) {
    if (!node->is_leaf()) {
      node->grad.assign(node->value.size(), 0.0);
      node->grad_allocated = true;
    } else {
      node->ensure_grad();
    }
  }
  detail::Node* root = nodes_.back();
  if (root->is_leaf()) {
    root->grad[0] += 1.0;
  } else {
    root->grad[0] = 1.0;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->is_leaf() && node->backward) node->backward(*node);
  }
}

void backward(const Tensor& loss) {
  auto tape = ComputationTape::record(loss);
  tape.replay_adjoints();
}

double finite_difference_check(const std::function<Tensor()>& f,
                               std::span<Tensor> params, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw ContractError("finite_difference_check needs eps > 0, got " +
                        std::to_string(eps));
  }
  for (auto& p : params) p.zero_grad();
  backward(f());

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    // A parameter the loss never reached has a zero gradient.
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace msda
