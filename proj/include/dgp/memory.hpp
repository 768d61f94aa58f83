#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dgp/network.hpp"

namespace dgp {

enum class Provenance : std::uint8_t { activation, gradient, compressed };

const char* provenance_name(Provenance p);

/// Basis of one constrained layer with per-vector bookkeeping. Weights are
/// the singular values (relative to the source matrix norm) each vector was
/// admitted with; compression ranks directions by them.
struct LayerPool {
  std::size_t layer = 0;
  OrthonormalBasis basis;
  std::vector<Provenance> tags;
  std::vector<TaskId> origin;
  std::vector<double> weights;

  [[nodiscard]] std::size_t dim() const noexcept { return basis.dim(); }
  [[nodiscard]] std::size_t count() const noexcept { return basis.count(); }
  [[nodiscard]] std::size_t count_of(Provenance p) const;

  friend bool operator==(const LayerPool&, const LayerPool&);
};

/// One LayerPool per shared (constrained) layer of a network.
class BasisPool {
 public:
  BasisPool() = default;
  explicit BasisPool(const Network& net);

  [[nodiscard]] const std::vector<LayerPool>& layers() const noexcept { return layers_; }
  std::vector<LayerPool>& layers() noexcept { return layers_; }
  [[nodiscard]] bool constrains(std::size_t layer) const noexcept;
  [[nodiscard]] const LayerPool& at(std::size_t layer) const;
  LayerPool& at(std::size_t layer);
  [[nodiscard]] std::size_t total_count() const;

  /// Throws NumericalError when a layer is not orthonormal within tol or
  /// holds more vectors than its dimension.
  void check(double tol = 1e-8) const;

  friend bool operator==(const BasisPool&, const BasisPool&) = default;

 private:
  std::vector<LayerPool> layers_;
};

enum class MemoryMode { dgp, gpm, none };

const char* memory_mode_name(MemoryMode m);
MemoryMode parse_memory_mode(const std::string& s);

struct MemoryConfig {
  /// Activation thresholds indexed by network layer; the last entry repeats.
  std::vector<double> alpha1 = {0.99};
  /// Added per task id to alpha1 (capped at 1).
  double alpha1_task_step = 0.0;
  double alpha2 = 0.999;
  double alpha3 = 0.996;
  std::size_t memory_size = 300;
  MemoryMode mode = MemoryMode::dgp;
  /// Compress once count >= dim - headroom.
  std::size_t headroom = 1;

  [[nodiscard]] double alpha1_for(std::size_t layer, TaskId task) const;
  void validate() const;
};

/// Block inputs of every constrained layer, im2col patches for conv layers.
/// Entry l is empty for unconstrained layers.
std::vector<DenseMatrix> sample_activation_matrices(const Network& net, TaskId task, const DenseMatrix& samples);

/// Weak-guarantee gradient vectors at every constrained layer's input; conv
/// layers are reshaped into receptive-field patches in kernel order.
std::vector<DenseMatrix> sample_gradient_matrices(const Network& net, TaskId task, const DenseMatrix& samples);

/// Residualises m (rows are samples) against the pool, takes the SVD of the
/// residual and appends the top right singular vectors chosen by
/// rank_select(alpha). Returns the number of vectors added.
std::size_t extend_pool(LayerPool& pool, const DenseMatrix& m, double alpha, Provenance tag, TaskId task);

/// G <- G - P (P^T G) for every constrained layer.
void project_weight_gradients(Gradients& grads, const BasisPool& pool);

/// Rank reduction of a weighted basis: left singular vectors of
/// vectors * diag(weights), truncated by rank_select(alpha). The weights of
/// the result are the kept singular values.
LayerPool compress_layer(const LayerPool& pool, double alpha, TaskId task);

/// Compresses every layer that reached dim - headroom vectors. Returns the
/// number of layers compressed.
std::size_t compress_pool(BasisPool& pool, const MemoryConfig& cfg, TaskId task);

struct PoolUpdateReport {
  std::vector<std::size_t> activation_added;  // per pool layer
  std::vector<std::size_t> gradient_added;
  std::size_t compressions = 0;
};

/// Draws memory_size samples without replacement and extends the pool:
/// activation pass under alpha1, then (dgp mode) gradient pass under alpha2.
PoolUpdateReport end_of_task_update(BasisPool& pool, const Network& net, TaskId task, const DenseMatrix& data,
                                    const MemoryConfig& cfg, std::mt19937_64& rng);

/// Row indices of a uniform draw without replacement, ascending.
std::vector<std::size_t> draw_memory_indices(std::size_t available, std::size_t count, std::mt19937_64& rng);

/// Binary container: "DGPP", u32 version, per-layer basis, tags, origins, weights.
void save_pool(const BasisPool& pool, const std::filesystem::path& path);
BasisPool load_pool(const std::filesystem::path& path);

}  // namespace dgp
