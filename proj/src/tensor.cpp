#include "msda/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace msda {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void Node::ensure_grad() {
  if (!grad_allocated) {
    grad.assign(value.size(), 0.0);
    grad_allocated = true;
  }
}

Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, const char* op,
                   BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool tracked = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  }
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

namespace {

thread_local bool grad_mode_enabled = true;

}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) {
  GradMode::set_enabled(false);
}
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().value.size(); }

std::span<const double> Tensor::data() const& { return checked().value; }
std::span<double> Tensor::data_mut() & { return checked().value; }

double Tensor::item() const {
  const auto& n = checked();
  if (n.value.size() != 1) {
    throw ContractError("item() needs a single-element tensor, got shape " +
                        shape_str(n.shape));
  }
  return n.value[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& n = checked();
  if (n.shape.size() != 2 || i >= n.shape[0] || j >= n.shape[1]) {
    throw DimensionError("index (" + std::to_string(i) + "," +
                         std::to_string(j) + ") invalid for shape " +
                         shape_str(n.shape));
  }
  return n.value[i * n.shape[1] + j];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }
bool Tensor::has_grad() const { return checked().grad_allocated; }

std::span<const double> Tensor::grad() const {
  const auto& n = checked();
  if (!n.grad_allocated) {
    throw ContractError("tensor has no gradient buffer; run backward first");
  }
  return n.grad;
}

std::span<double> Tensor::grad_mut() {
  auto& n = checked();
  n.ensure_grad();
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = checked();
  if (n.grad_allocated) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = checked();
  return from_data(n.shape, n.value, false);
}

Tensor Tensor::clone() const {
  const auto& n = checked();
  return from_data(n.shape, n.value, n.requires_grad);
}

}  // namespace msda
