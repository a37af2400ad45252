#include "cal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace cal {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::TensorNode> make_node(Shape shape, std::vector<double> values,
                                              bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("Tensor: zero dimension in shape " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_to_string(shape) + " expects " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(make_node(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->values.size() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("Tensor: axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(s));
  }
  return s[axis];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::tracks_grad() const { return node_ && node_->needs_grad(); }

std::span<const double> Tensor::values() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->values;
}

double Tensor::scalar_value() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor: scalar_value on shape " + shape_to_string(shape()));
  }
  return node_->values[0];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("Tensor: no gradient recorded");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  return Tensor(node_->shape, node_->values, /*requires_grad=*/false);
}

Tensor Tensor::from_node(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ComputationRecord ComputationRecord::trace(const Tensor& root) {
  ComputationRecord record;
  if (!root.defined() || !root.node()->producer) return record;

  // Iterative post-order walk; an op is appended after every op that produced
  // one of its inputs, so ops_ is in topological (execution) order.
  std::unordered_set<const detail::OpNode*> visited;
  struct Frame {
    std::shared_ptr<detail::OpNode> op;
    std::size_t next_input = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node()->producer});
  visited.insert(root.node()->producer.get());
  while (!stack.empty()) {
    Frame& frame = stack.back();
    if (frame.next_input < frame.op->inputs.size()) {
      auto& input = frame.op->inputs[frame.next_input++];
      auto& parent = input->producer;
      if (parent && !visited.count(parent.get())) {
        visited.insert(parent.get());
        stack.push_back({parent});
      }
    } else {
      record.ops_.push_back(frame.op);
      stack.pop_back();
    }
  }
  return record;
}

std::vector<ComputationRecord::Step> ComputationRecord::describe() const {
  std::vector<Step> steps;
  steps.reserve(ops_.size());
  for (const auto& op : ops_) {
    Step s;
    s.name = op->name;
    for (const auto& in : op->inputs) s.inputs.push_back(in.get());
    s.output = op->output.lock().get();
    steps.push_back(std::move(s));
  }
  return steps;
}

void ComputationRecord::run_backward(const Tensor& root) const {
  auto root_node = root.node();
  // Scratch gradients for intermediate tensors; leaf parameters accumulate
  // into their persistent grad buffers.
  std::unordered_map<const detail::TensorNode*, std::vector<double>> scratch;

  auto grad_buffer = [&](detail::TensorNode* node) -> std::vector<double>& {
    if (node->is_leaf_param()) {
      if (node->grad.empty()) node->grad.assign(node->values.size(), 0.0);
      return node->grad;
    }
    auto [it, inserted] = scratch.try_emplace(node);
    if (inserted) it->second.assign(node->values.size(), 0.0);
    return it->second;
  };

  grad_buffer(root_node.get())[0] += 1.0;

  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    const detail::OpNode& op = **it;
    auto out = op.output.lock();
    if (!out) throw std::logic_error("backward: op output expired: " + op.name);
    auto found = scratch.find(out.get());
    const std::vector<double>* out_grad = nullptr;
    if (out->is_leaf_param()) {
      out_grad = &out->grad;
    } else if (found != scratch.end()) {
      out_grad = &found->second;
    } else {
      // Not reachable from the root; contributes nothing.
      continue;
    }
    std::vector<std::vector<double>> input_grads = op.backward(*out_grad);
    if (input_grads.size() != op.inputs.size()) {
      throw std::logic_error("backward: op " + op.name + " returned " +
                             std::to_string(input_grads.size()) + " gradients for " +
                             std::to_string(op.inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < op.inputs.size(); ++i) {
      auto& input = op.inputs[i];
      if (!input->needs_grad()) continue;
      if (input_grads[i].empty()) continue;
      if (input_grads[i].size() != input->values.size()) {
        throw std::logic_error("backward: op " + op.name + " produced a gradient of length " +
                               std::to_string(input_grads[i].size()) + " for an input of length " +
                               std::to_string(input->values.size()));
      }
      std::vector<double>& buf = grad_buffer(input.get());
      const std::vector<double>& g = input_grads[i];
      for (std::size_t j = 0; j < g.size(); ++j) buf[j] += g[j];
    }
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  if (!loss.tracks_grad()) {
    throw std::invalid_argument("backward: loss was not produced through recorded primitives");
  }
  ComputationRecord::trace(loss).run_backward(loss);
}

Tensor make_op(std::string name, Shape out_shape, std::vector<double> out_values,
               const std::vector<Tensor>& inputs,
               const std::function<detail::BackwardFn()>& make_backward) {
  bool traced = grad_enabled();
  if (traced) {
    traced = false;
    for (const auto& in : inputs) {
      if (in.tracks_grad()) {
        traced = true;
        break;
      }
    }
  }
  Tensor out(std::move(out_shape), std::move(out_values), /*requires_grad=*/false);
  if (!traced) return out;

  auto op = std::make_shared<detail::OpNode>();
  op->name = std::move(name);
  for (const auto& in : inputs) op->inputs.push_back(in.node());
  op->output = out.node();
  op->backward = make_backward();
  out.node()->producer = std::move(op);
  return out;
}

}  // namespace cal
