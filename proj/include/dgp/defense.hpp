#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "dgp/network.hpp"

namespace dgp {

using Labels = std::vector<int>;

enum class DefenseKind { none, igr, at };

struct DefenseConfig {
  DefenseKind kind = DefenseKind::none;
  /// Input-gradient penalty strength.
  double lambda = 0.0;
  /// Penalise ||grad_X H||^2 (default) or the unsquared norm.
  bool squared_norm = true;
  /// Fraction of every batch replaced by FGSM examples (adversarial training).
  double at_mix = 0.5;
  double at_epsilon = 25.0 / 255.0;

  void validate() const;
};

enum class AttackKind { fgsm, pgd };

struct AttackConfig {
  std::string name;
  AttackKind kind = AttackKind::fgsm;
  double step = 0.0;    // FGSM budget, or per-step size for PGD
  double budget = 0.0;  // total l-inf radius (PGD)
  int steps = 1;
  int restarts = 1;
  bool random_start = true;
  double pixel_min = 0.0;
  double pixel_max = 1.0;

  void validate() const;
};

/// PGD step count used when none is given: 2 * ceil(budget / step).
int default_pgd_steps(double step, double budget);

/// Named presets: pmnist-fgsm, pmnist-pgd, strong-pgd, split-fgsm, split-pgd,
/// split-strong-pgd, zero-fgsm and zero-pgd (zero budget, returns the input).
AttackConfig attack_preset(const std::string& name);
std::vector<std::string> attack_preset_names();

struct CrossEntropy {
  double loss = 0.0;              // batch mean
  std::vector<double> per_sample;
  DenseMatrix dlogits;            // (softmax - onehot) / n
};

CrossEntropy cross_entropy(const DenseMatrix& logits, std::span<const int> labels);

struct Objective {
  double total = 0.0;
  double cross_entropy = 0.0;
  double regularizer = 0.0;  // penalty before lambda
  Gradients grads;
};

/// H + lambda * ||grad_X H||_F^2 (or the unsquared norm), where H is the
/// batch-mean cross-entropy and X the whole input batch, so each sample's
/// input gradient carries a 1/n factor. Weight gradients include the penalty
/// through a second reverse pass over the input-gradient graph; ReLU masks
/// are treated as locally constant. lambda == 0 takes the plain
/// cross-entropy path.
Objective igr_objective(const Network& net, const ForwardTrace& trace, std::span<const int> labels, double lambda,
                        bool squared_norm = true);
Objective igr_objective(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                        double lambda, bool squared_norm = true);

/// Per-sample gradient of each sample's own cross-entropy w.r.t. its input.
DenseMatrix loss_input_gradient(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels);

DenseMatrix fgsm(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels, double step,
                 double pixel_min = 0.0, double pixel_max = 1.0);

/// Projected gradient ascent on the cross-entropy inside the l-inf ball;
/// across restarts each sample keeps the iterate with the highest loss.
DenseMatrix pgd(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                const AttackConfig& cfg, std::mt19937_64& rng);

/// Dispatches on cfg.kind.
DenseMatrix run_attack(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                       const AttackConfig& cfg, std::mt19937_64& rng);

/// Replaces floor(at_mix * n) samples, chosen by a seeded shuffle of the
/// batch positions, with their FGSM perturbations. Labels are unchanged.
DenseMatrix adversarial_training_batch(const Network& net, TaskId task, const DenseMatrix& x,
                                       std::span<const int> labels, const DefenseConfig& cfg, std::mt19937_64& rng);

}  // namespace dgp
