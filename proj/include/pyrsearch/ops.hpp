#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pyrsearch/tensor.hpp"

namespace pyrsearch {

/// Per-channel running statistics for one batch-norm site.
struct BnStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Reverse-mode tape over Tensor4 ops. Each op pushes a variable holding its
/// value and a closure that scatters the upstream gradient to its parents.
/// The forward counter counts MAC-equivalent units; backward is uncounted.
class Tape {
 public:
  explicit Tape(OpCounter* counter = nullptr) : counter_(counter) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Tensor4 value, bool needs_grad = false);

  const Tensor4& value(int id) const { return vars_[static_cast<std::size_t>(id)].value; }
  const Tensor4& grad(int id) const;
  bool needs_grad(int id) const { return vars_[static_cast<std::size_t>(id)].needs_grad; }
  std::size_t size() const { return vars_.size(); }

  // Convolutions: stride 1, zero "same" padding, no bias. Weight layouts:
  // conv3x3 [Cout,Cin,3,3], conv1x1 [Cout,Cin,1,1], depthwise3x3 [C,1,3,3].
  int conv3x3(int x, int w);
  int conv1x1(int x, int w);
  int depthwise3x3(int x, int w);
  /// Adds a per-channel bias stored as [1,C,1,1].
  int bias_add(int x, int b);

  int batchnorm(int x, int gamma, int beta, BnStats& stats, bool train,
                double eps = 1e-3, double momentum = 0.99);

  int relu(int x);
  int add(int a, int b);
  /// n-ary elementwise sum; counts (k-1) adds per element.
  int accumulate(const std::vector<int>& xs);
  /// Multiplies by a constant; bookkeeping op for loss averaging (uncounted).
  int scale(int x, double s);

  int nearest_upsample(int x, int factor);
  int maxpool_down(int x, int factor);

  /// a + b * sigmoid(per-channel global max of a), the parameter-free
  /// attention merge. Gradient routes through the per-channel argmax
  /// (first-wins tie break).
  int global_pool_attention(int a, int b);

  /// Mean focal loss over all elements of a 0/1 target map; returns a scalar
  /// variable. Stable in logit space.
  int focal_loss(int logits, Tensor4 targets, double alpha, double gamma);

  /// sum(x * weights) as a scalar; loss-side reduction (uncounted).
  int weighted_sum(int x, Tensor4 weights);

  /// Seeds d(root)/d(root) = 1 and runs all closures in reverse order.
  /// root must be scalar. Throws Error("no-forward-pass") on an empty tape.
  void backward(int root);

 private:
  using BackFn = std::function<void(Tape&, int self)>;

  struct Var {
    Tensor4 value;
    Tensor4 grad;
    bool needs_grad = false;
    BackFn backprop;  // null for leaves
  };

  int push(Tensor4 value, bool needs_grad, BackFn backprop);
  Tensor4& grad_buf(int id);
  bool has_grad(int id) const { return !vars_[static_cast<std::size_t>(id)].grad.data.empty(); }
  void count(std::uint64_t units) {
    if (counter_) counter_->units += units;
  }

  std::vector<Var> vars_;
  OpCounter* counter_;
};

}  // namespace pyrsearch
