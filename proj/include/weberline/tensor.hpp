#pragma once

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace weberline::tn {

using Shape = std::vector<int>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 array participating in reverse-mode differentiation.
/// Copies share the underlying node; use detach() for a value copy without history.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v) { return constant({1}, {v}); }
  /// Leaf that accumulates gradients.
  static Tensor leaf(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Accumulated gradient; empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  Tensor detach() const;

  /// Reverse-mode sweep from this scalar.
  void backward() const;

  // For op implementations.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            const std::vector<Tensor>& inputs,
                            std::function<void(const std::vector<double>&)> backward);
  detail::Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Cross-correlation. x: N×C×H×W, w: O×C×k×k, b: O. Output size is
/// floor((H + 2 pad - k) / stride) + 1 per spatial axis.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

enum class BatchNormMode {
  Train,           // batch statistics, running statistics updated
  BatchStatsOnly,  // batch statistics, running statistics untouched
  Eval,            // running statistics
};

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  explicit BatchNormStats(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), 0.0),
        running_var(static_cast<std::size_t>(channels), 1.0) {}
};

/// Per-channel normalization of N×C×H×W (or N×C) input.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                 BatchNormMode mode);

/// N×C×H×W -> N×C spatial mean.
Tensor global_avg_pool(const Tensor& x);

/// x: N×D, w: O×D, b: O -> N×O.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// x: N×C×H×W scaled per (n, c) by s: N×C.
Tensor channel_scale(const Tensor& x, const Tensor& s);

/// x: N×K rows multiplied by w: N.
Tensor scale_rows(const Tensor& x, const Tensor& w);

/// Concatenation along axis 0 or 1 of tensors that agree on all other axes.
Tensor concat(const std::vector<Tensor>& parts, int axis);

/// Rows of x (axis 0) in the given order.
Tensor index_rows(const Tensor& x, std::span<const int> rows);

/// Mean over the batch of -sum(target * log softmax(logits)). targets rows must sum to 1.
Tensor softmax_ce(const Tensor& logits, const Tensor& targets);

/// Biased squared MMD with k(a,b) = exp(-|a-b|^2 / (2 sigma^2)). x: n×d, y: m×d.
Tensor mmd_rbf(const Tensor& x, const Tensor& y, double sigma);

/// Row-wise softmax on raw values (no graph).
std::vector<double> softmax_rows(std::span<const double> logits, int cols);

Tensor one_hot(std::span<const int> labels, int classes);

}  // namespace weberline::tn
