#pragma once

// Minimal reverse-mode differentiation over dense row-major double tensors.
//
// Every operation builds a node holding its forward value and a closure that
// scatters the output gradient into its inputs. Graphs are rebuilt per
// training step; leaves (parameters) persist and accumulate gradients until
// zero_grad() is called.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptdet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Node;
}

class DiffTensor {
 public:
  /// Gradient scatter callback: receives the gradient of the node's output.
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  DiffTensor() = default;

  static DiffTensor zeros(Shape shape, bool requires_grad = false);
  static DiffTensor full(Shape shape, double value, bool requires_grad = false);
  static DiffTensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static DiffTensor scalar(double value, bool requires_grad = false);
  /// Gaussian N(0, stddev^2) entries from a dedicated stream for `seed`.
  static DiffTensor random_normal(Shape shape, double stddev, std::uint64_t seed, bool requires_grad = false);

  /// Creates a graph node. `backward` is only kept when some input requires a gradient.
  static DiffTensor make_result(Shape shape, std::vector<double> values,
                                std::vector<DiffTensor> inputs, BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  /// Accumulated gradient; zeros if nothing has been accumulated.
  std::vector<double> grad() const;
  /// Gradient buffer, allocated (zeroed) on first access.
  std::span<double> grad_buffer() const;
  void zero_grad();

  std::uint64_t id() const;

  /// Same values in a fresh leaf with no history.
  DiffTensor detached(bool requires_grad = false) const;

 private:
  explicit DiffTensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend void backward(const DiffTensor& loss);
  std::shared_ptr<detail::Node> node_;
};

/// Accumulates dloss/dleaf into every reachable leaf with requires_grad.
/// Intermediate gradients are reset per call; leaf gradients accumulate.
void backward(const DiffTensor& loss);

// ---------------------------------------------------------------------------
// Operations. Shapes are checked eagerly; a mismatch throws ShapeError naming
// both shapes.

/// out = x W + b with x [N x Cin], W [Cin x Cout], b [Cout].
DiffTensor linear(const DiffTensor& x, const DiffTensor& weight, const DiffTensor& bias);

enum class Activation { kRelu };
DiffTensor activation(const DiffTensor& x, Activation kind = Activation::kRelu);
inline DiffTensor relu(const DiffTensor& x) { return activation(x, Activation::kRelu); }

/// Cross-correlation of x [N x C x H x W] with kernel [Cout x C x k x k].
/// `bias` may be undefined. Output spatial size floor((H + 2 pad - k) / stride) + 1.
DiffTensor conv2d(const DiffTensor& x, const DiffTensor& kernel, const DiffTensor& bias,
                  std::size_t stride, std::size_t pad);

/// Per-group channel-wise max over rows of x [P x C]. Ties go to the first row.
DiffTensor group_max_pool(const DiffTensor& x, const std::vector<std::vector<std::size_t>>& groups);

/// Mean over rows of -log softmax(logits)[label]. Optional per-row weights
/// replace the mean with sum(w * nll) / normalizer.
DiffTensor softmax_cross_entropy(const DiffTensor& logits, std::span<const int> labels);
DiffTensor softmax_cross_entropy(const DiffTensor& logits, std::span<const int> labels,
                                 std::span<const double> row_weights, double normalizer);

/// sum(w * bce(sigmoid(logit), target)) / normalizer, targets may be soft.
DiffTensor sigmoid_bce_with_logits(const DiffTensor& logits, std::span<const double> targets,
                                   std::span<const double> weights, double normalizer);

/// sum(w * smooth_l1(pred - target; beta)) / normalizer.
DiffTensor smooth_l1(const DiffTensor& pred, std::span<const double> targets,
                     std::span<const double> weights, double beta, double normalizer);

/// Forward identity; contributes no gradient to x.
DiffTensor stop_gradient(const DiffTensor& x);

/// Finite-difference support. While alive, stop_gradient records its outputs;
/// after replay() the k-th call returns the k-th recorded value instead of its
/// live input, so a perturbed forward treats stopped values as the constants
/// the analytic gradient assumes. One per thread.
class StopGradientFreeze {
 public:
  StopGradientFreeze();
  ~StopGradientFreeze();
  StopGradientFreeze(const StopGradientFreeze&) = delete;
  StopGradientFreeze& operator=(const StopGradientFreeze&) = delete;
  /// Rewinds to the first recorded value; call before every replayed forward.
  void replay();
};

DiffTensor add(const DiffTensor& a, const DiffTensor& b);
DiffTensor mul(const DiffTensor& a, const DiffTensor& b);
DiffTensor scale(const DiffTensor& x, double factor);
DiffTensor sum(const DiffTensor& x);
DiffTensor mean(const DiffTensor& x);
DiffTensor reshape(const DiffTensor& x, Shape shape);

/// Concatenates [N x C1 x H x W] and [N x C2 x H x W] along channels.
DiffTensor concat_channels(const DiffTensor& a, const DiffTensor& b);
/// Stacks equally shaped tensors along a new leading axis.
DiffTensor stack(const std::vector<DiffTensor>& parts);
/// [N x C x H x W] -> [N*H*W x C], rows ordered (n, h, w).
DiffTensor nchw_to_rows(const DiffTensor& x);
/// Columns [begin, end) of a matrix.
DiffTensor slice_columns(const DiffTensor& x, std::size_t begin, std::size_t end);
/// Selected rows of a matrix, in the given order (repeats allowed).
DiffTensor gather_rows(const DiffTensor& x, std::span<const std::size_t> rows);

/// Standard training-mode batch normalization over rows of x [N x C]
/// with biased variance, followed by gamma/beta. Writes the batch statistics
/// to `batch_mean` / `batch_var` when given.
DiffTensor batch_norm(const DiffTensor& x, const DiffTensor& gamma, const DiffTensor& beta,
                      double epsilon, std::vector<double>* batch_mean = nullptr,
                      std::vector<double>* batch_var = nullptr);
/// Inference-mode batch normalization with fixed statistics.
DiffTensor batch_norm_inference(const DiffTensor& x, const DiffTensor& gamma,
                                const DiffTensor& beta, std::span<const double> mean,
                                std::span<const double> var, double epsilon);

}  // namespace promptdet
