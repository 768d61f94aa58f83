#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dgp/linalg.hpp"

namespace dgp {

using TaskId = int;

enum class LayerKind { linear, conv };
enum class Activation { relu, none };
enum class Pooling { none, avg2x2 };

struct Shape3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  [[nodiscard]] std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// One block: linear or conv layer (no bias), optional tracked-statistics BN,
/// activation, optional 2x2 average pooling.
///
/// Weight layout is input-features x output-units for both kinds. For conv
/// layers each column is a flattened kernel ordered channel, kernel row,
/// kernel column; feature maps are flattened channel-major as (c, h, w).
struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::size_t in_features = 0;   // linear
  std::size_t out_features = 0;  // linear
  Shape3 in_shape;               // conv
  std::size_t out_channels = 0;  // conv
  std::size_t kernel = 1;        // conv
  std::size_t stride = 1;        // conv
  std::size_t padding = 0;       // conv, zero padding
  Activation activation = Activation::relu;
  bool has_bn = false;           // conv only
  Pooling pool = Pooling::none;  // conv only

  static LayerSpec linear(std::size_t in, std::size_t out, Activation act = Activation::relu);
  static LayerSpec conv(Shape3 in, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0, bool bn = false, Pooling pool = Pooling::none,
                        Activation act = Activation::relu);

  /// Conv output before pooling.
  [[nodiscard]] Shape3 conv_shape() const;
  /// Block output shape (after pooling); linear layers report (out, 1, 1).
  [[nodiscard]] Shape3 out_shape() const;
  [[nodiscard]] std::size_t input_size() const;
  /// Pre-pooling output size (what the activation mask covers).
  [[nodiscard]] std::size_t preact_size() const;
  [[nodiscard]] std::size_t output_size() const;
  [[nodiscard]] std::size_t weight_rows() const;
  [[nodiscard]] std::size_t weight_cols() const;
  /// Number of sliding-window positions (conv), 1 for linear.
  [[nodiscard]] std::size_t positions() const;

  /// Throws ShapeError on inconsistent dimensions.
  void validate() const;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Tracked per-channel statistics and affine parameters.
struct BatchNormState {
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState fresh(std::size_t channels);
  [[nodiscard]] double scale(std::size_t c) const;
};

struct LayerParams {
  DenseMatrix weight;
  std::optional<BatchNormState> bn;
};

/// Per-layer cache from one forward pass.
struct LayerTrace {
  DenseMatrix input;       // n x input_size
  DenseMatrix mask;        // n x preact_size, activation derivative
  DenseMatrix normalized;  // n x preact_size, (z - mu) / sqrt(var + eps); BN layers only
};

struct ForwardTrace {
  TaskId task = 0;
  std::vector<LayerTrace> layers;
  DenseMatrix logits;
};

struct LayerGradient {
  DenseMatrix weight;
  std::vector<double> gamma;  // empty when the layer has no BN
  std::vector<double> beta;
  bool trainable = true;
  bool bn_trainable = true;  // false once shared BN is frozen
};

struct Gradients {
  std::vector<LayerGradient> layers;

  Gradients& operator+=(const Gradients& o);
  Gradients& operator*=(double s);
};

/// Feed-forward network whose first layer is owned per task. The head is
/// per task too unless `shared_head` is set; every other layer is shared.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<LayerSpec> layers, bool shared_head = false);

  [[nodiscard]] const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::size_t depth() const noexcept { return layers_.size(); }
  [[nodiscard]] std::size_t input_size() const { return layers_.front().input_size(); }
  [[nodiscard]] std::size_t num_classes() const { return layers_.back().output_size(); }

  /// Per-task layers are never constrained by projection.
  [[nodiscard]] bool is_per_task(std::size_t layer) const noexcept {
    return layer == 0 || (!shared_head_ && layer + 1 == layers_.size());
  }
  [[nodiscard]] bool shared_head() const noexcept { return shared_head_; }

  [[nodiscard]] bool has_task(TaskId task) const { return first_.count(task) > 0; }
  [[nodiscard]] std::vector<TaskId> tasks() const;
  /// Registers a task with freshly initialised first layer and head.
  /// The first registration also initialises the shared layers.
  void add_task(TaskId task, std::mt19937_64& rng);
  /// Registers a task with explicit per-task parameters. With a shared head
  /// `head` must be left empty.
  void set_task_params(TaskId task, LayerParams first, LayerParams head);

  [[nodiscard]] const LayerParams& params(std::size_t layer, TaskId task) const;
  LayerParams& params(std::size_t layer, TaskId task);

  /// Shared BN affine parameters and tracked statistics stop updating once
  /// the first task finishes.
  void freeze_shared_bn() noexcept { shared_bn_frozen_ = true; }
  [[nodiscard]] bool shared_bn_frozen() const noexcept { return shared_bn_frozen_; }
  [[nodiscard]] bool bn_trainable(std::size_t layer) const noexcept {
    return is_per_task(layer) || !shared_bn_frozen_;
  }

  /// Per-step W <- W - lr * grad for every trainable parameter of `task`.
  void apply_update(TaskId task, const Gradients& grads, double lr);

  /// Zero gradient structure matching the task's parameters.
  [[nodiscard]] Gradients zero_gradients(TaskId task) const;

  friend bool operator==(const Network&, const Network&);

 private:
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> shared_;  // indexed by layer; per-task slots unused
  std::map<TaskId, LayerParams> first_;
  std::map<TaskId, LayerParams> head_;
  bool shared_bn_frozen_ = false;
  bool shared_head_ = false;
};

LayerParams init_layer_params(const LayerSpec& spec, std::mt19937_64& rng);

// ---- block primitives ----

/// im2col: (n * positions) x (c * k * k), one row per sliding window.
DenseMatrix extract_patches(const LayerSpec& spec, const DenseMatrix& x);
/// Adjoint of extract_patches: scatter-adds patch rows back to (n x c*h*w).
DenseMatrix fold_patches(const LayerSpec& spec, const DenseMatrix& patches, std::size_t n);
/// Linear part of the block (convolution or matrix product), n x preact_size.
DenseMatrix apply_weights(const LayerSpec& spec, const DenseMatrix& weight, const DenseMatrix& x);
/// Adjoint of apply_weights with respect to the input.
DenseMatrix apply_weights_transposed(const LayerSpec& spec, const DenseMatrix& weight, const DenseMatrix& g);
/// Gradient of <g, apply_weights(W, x)> with respect to W.
DenseMatrix weight_gradient(const LayerSpec& spec, const DenseMatrix& x, const DenseMatrix& g);
DenseMatrix avg_pool(const LayerSpec& spec, const DenseMatrix& a);
DenseMatrix avg_pool_transposed(const LayerSpec& spec, const DenseMatrix& g);

/// Evaluation-mode forward pass; BN uses tracked statistics.
ForwardTrace forward(const Network& net, TaskId task, const DenseMatrix& x);

/// Training-mode forward: identical outputs to forward(), but trainable BN
/// layers first fold the batch statistics into their tracked estimates.
ForwardTrace forward_train(Network& net, TaskId task, const DenseMatrix& x);

/// Reverse-mode pass returning weight gradients of <dlogits, logits>.
Gradients backward_weights(const Network& net, const ForwardTrace& trace, const DenseMatrix& dlogits);

/// Gradient of <dlogits, logits> with respect to the network input.
DenseMatrix backward_input(const Network& net, const ForwardTrace& trace, const DenseMatrix& dlogits);

/// Input Jacobian of one block at the traced operating point, applied to row
/// vectors: v -> v * d(out)/d(in). The conv case runs the convolution on the
/// reshaped vector instead of building the unrolled weight matrix.
class LayerJacobian {
 public:
  /// Keeps references to its arguments.
  LayerJacobian(const LayerSpec& spec, const LayerParams& params, const LayerTrace& trace);
  LayerJacobian(const LayerSpec&, const LayerParams&, LayerTrace&&) = delete;

  /// Row i of v uses sample i's activation pattern; v.rows() must equal the
  /// traced batch size.
  [[nodiscard]] DenseMatrix apply(const DenseMatrix& v) const;
  /// Every row of v uses the activation pattern of a single traced sample.
  [[nodiscard]] DenseMatrix apply_for_sample(const DenseMatrix& v, std::size_t sample) const;
  /// Transposed map, g -> g * (d(out)/d(in))^T, per-sample masks.
  [[nodiscard]] DenseMatrix apply_transposed(const DenseMatrix& g) const;

 private:
  [[nodiscard]] DenseMatrix apply_rows(const DenseMatrix& v, const DenseMatrix& mask) const;

  const LayerSpec* spec_;
  const LayerParams* params_;
  const LayerTrace* trace_;
};

/// Explicit unrolled weight matrix W~ with flatten(conv(x)) = flatten(x) * W~.
/// Test oracle only; throws when the matrix would exceed 2^16 entries.
DenseMatrix conv_as_matrix(const LayerSpec& spec, const DenseMatrix& weight);

/// Column sums of the first block's input Jacobian, one row per sample.
DenseMatrix weak_gradient_seed(const Network& net, const ForwardTrace& trace);

/// v^{l+1} = v^l * J^l.
DenseMatrix propagate_weak_gradient(const DenseMatrix& v, const LayerJacobian& jacobian);

/// Weak-guarantee vectors at every block input: entry l is n x input_size(l);
/// entry 0 is all ones and entry depth() holds the per-class output sums.
std::vector<DenseMatrix> weak_gradients(const Network& net, const ForwardTrace& trace);

/// d(logits)/d(x) for one sample, shape input_size x classes.
DenseMatrix full_input_jacobian(const Network& net, TaskId task, std::span<const double> x);

// ---- checkpoint ----

/// Binary container: "DGPW", u32 version, layer table, little-endian f64 payloads.
void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

}  // namespace dgp
