#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cal {

// Dimension sizes, outermost first. Data is row-major, double precision.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct OpNode;

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;  // leaf parameter flag
  std::vector<double> grad;    // allocated lazily; same length as values
  std::shared_ptr<OpNode> producer;  // null for leaves

  bool is_leaf_param() const { return requires_grad && !producer; }
  bool needs_grad() const { return requires_grad || producer != nullptr; }
};

// Given d(loss)/d(output), return d(loss)/d(input_i) for every input.
// An empty vector means "no gradient for this input".
using BackwardFn =
    std::function<std::vector<std::vector<double>>(const std::vector<double>& out_grad)>;

struct OpNode {
  std::string name;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::weak_ptr<TensorNode> output;
  BackwardFn backward;
};

}  // namespace detail

// Dense n-d array of doubles. Values are immutable after construction except
// through mutable_values(), which requires exclusive access (optimizer step).
// The grad buffer belongs to leaf parameters and accumulates across backward
// calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;

  bool requires_grad() const;
  // True when the tensor participates in the current computation record,
  // either as a parameter leaf or as the output of a recorded operation.
  bool tracks_grad() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double scalar_value() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, no producer link, requires_grad off. Gradients never flow
  // through a detached tensor.
  Tensor detach() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::TensorNode> node);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Records whether newly executed operations are traced. Evaluation code
// switches tracing off; see NoGradGuard.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Ordered list of the primitive operations that produced a tensor, each entry
// after the entries that produced its inputs. Replaying it in reverse visits
// every entry exactly once.
class ComputationRecord {
 public:
  struct Step {
    std::string name;
    std::vector<const void*> inputs;  // node identities, for structure checks
    const void* output;
  };

  static ComputationRecord trace(const Tensor& root);

  std::size_t num_steps() const { return ops_.size(); }
  std::vector<Step> describe() const;

  // Accumulates d(root)/d(leaf) into every reachable leaf parameter's grad.
  void run_backward(const Tensor& root) const;

 private:
  std::vector<std::shared_ptr<detail::OpNode>> ops_;  // topological order
};

// Reverse-mode differentiation of a scalar produced through recorded
// primitives. Repeated calls accumulate into leaf grads.
void backward(const Tensor& loss);

// Extension point for modules that define their own differentiable
// primitives: runs the forward result through the recording machinery.
// When grad is disabled or no input tracks grad, no record entry is made
// and `make_backward` is never invoked.
Tensor make_op(std::string name, Shape out_shape, std::vector<double> out_values,
               const std::vector<Tensor>& inputs,
               const std::function<detail::BackwardFn()>& make_backward);

}  // namespace cal
