#include "dgp/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dgp {

void DefenseConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("defense.lambda must be >= 0");
  if (at_mix < 0.0 || at_mix > 1.0) throw ConfigError("defense.at_mix must lie in [0, 1]");
  if (at_epsilon < 0.0) throw ConfigError("defense.at_epsilon must be >= 0");
}

void AttackConfig::validate() const {
  if (step < 0.0 || budget < 0.0) throw ConfigError("attack " + name + ": budgets must be >= 0");
  if (kind == AttackKind::pgd) {
    if (step > budget) throw ConfigError("attack " + name + ": PGD step exceeds total budget");
    if (steps < 1 || restarts < 1) throw ConfigError("attack " + name + ": steps and restarts must be >= 1");
  }
  if (pixel_min > pixel_max) throw ConfigError("attack " + name + ": pixel range is empty");
}

int default_pgd_steps(double step, double budget) {
  if (step <= 0.0) return 1;
  // round before ceil so 40/255 over 2/255 counts as exactly 20
  const double ratio = std::round(budget / step * 1e9) / 1e9;
  return std::max(1, 2 * int(std::ceil(ratio)));
}

namespace {

AttackConfig make_pgd(std::string name, double step, double budget, int restarts) {
  AttackConfig a;
  a.name = std::move(name);
  a.kind = AttackKind::pgd;
  a.step = step;
  a.budget = budget;
  a.steps = default_pgd_steps(step, budget);
  a.restarts = restarts;
  return a;
}

AttackConfig make_fgsm(std::string name, double step) {
  AttackConfig a;
  a.name = std::move(name);
  a.kind = AttackKind::fgsm;
  a.step = step;
  a.budget = step;
  return a;
}

}  // namespace

std::vector<std::string> attack_preset_names() {
  return {"pmnist-fgsm", "pmnist-pgd", "strong-pgd", "split-fgsm", "split-pgd", "split-strong-pgd",
          "zero-fgsm",   "zero-pgd"};
}

AttackConfig attack_preset(const std::string& name) {
  constexpr double px = 1.0 / 255.0;
  if (name == "pmnist-fgsm") return make_fgsm(name, 25 * px);
  if (name == "pmnist-pgd") return make_pgd(name, 2 * px, 40 * px, 1);
  // Stand-in for the AutoAttack evaluation at eps = 20/255.
  if (name == "strong-pgd") return make_pgd(name, 2 * px, 20 * px, 5);
  if (name == "split-fgsm") return make_fgsm(name, 4 * px);
  if (name == "split-pgd") return make_pgd(name, 1 * px, 4 * px, 1);
  if (name == "split-strong-pgd") return make_pgd(name, 0.5 * px, 2 * px, 5);
  if (name == "zero-fgsm") return make_fgsm(name, 0.0);
  if (name == "zero-pgd") return make_pgd(name, 0.0, 0.0, 1);
  std::string known;
  for (const auto& n : attack_preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown attack preset '" + name + "'; available: " + known);
}

namespace {

DenseMatrix softmax_rows(const DenseMatrix& logits) {
  DenseMatrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) sum += (p(i, j) = std::exp(z[j] - zmax));
    for (std::size_t j = 0; j < z.size(); ++j) p(i, j) /= sum;
  }
  return p;
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n)
    throw ShapeError("labels: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " samples");
  for (int y : labels)
    if (y < 0 || std::size_t(y) >= classes)
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
}

// softmax - onehot, unscaled
DenseMatrix loss_logit_gradient(const DenseMatrix& logits, std::span<const int> labels) {
  DenseMatrix g = softmax_rows(logits);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, std::size_t(labels[i])) -= 1.0;
  return g;
}

}  // namespace

CrossEntropy cross_entropy(const DenseMatrix& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  check_labels(labels, n, logits.cols());
  CrossEntropy out;
  out.per_sample.resize(n);
  out.dlogits = DenseMatrix(n, logits.cols());
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    out.per_sample[i] = lse - z[std::size_t(labels[i])];
    out.loss += out.per_sample[i];
    for (std::size_t j = 0; j < z.size(); ++j) out.dlogits(i, j) = std::exp(z[j] - lse) / double(n);
    out.dlogits(i, std::size_t(labels[i])) -= 1.0 / double(n);
  }
  out.loss /= double(n);
  return out;
}

Objective igr_objective(const Network& net, const ForwardTrace& trace, std::span<const int> labels, double lambda,
                        bool squared_norm) {
  if (lambda < 0.0) throw std::invalid_argument("igr_objective: lambda must be >= 0");
  const CrossEntropy ce = cross_entropy(trace.logits, labels);
  Objective out;
  out.cross_entropy = ce.loss;
  out.total = ce.loss;
  if (lambda == 0.0) {
    out.grads = backward_weights(net, trace, ce.dlogits);
    return out;
  }
  for (const auto& spec : net.layers())
    if (spec.activation != Activation::relu && spec.activation != Activation::none)
      throw UnsupportedError("igr_objective: only piecewise-linear activations are supported");

  const std::size_t n = trace.logits.rows();
  const std::size_t depth = net.depth();
  const DenseMatrix probs = softmax_rows(trace.logits);
  DenseMatrix gy = probs;
  for (std::size_t i = 0; i < n; ++i) gy(i, std::size_t(labels[i])) -= 1.0;

  // Input-gradient pass, keeping each block's post-mask gradient (gated) and
  // its BN-scaled version (pre_weight).
  std::vector<DenseMatrix> gated(depth);
  std::vector<DenseMatrix> pre_weight(depth);
  DenseMatrix g = gy;
  for (std::size_t l = depth; l-- > 0;) {
    const auto& spec = net.layers()[l];
    const auto& p = net.params(l, trace.task);
    const auto& lt = trace.layers[l];
    DenseMatrix gp = avg_pool_transposed(spec, g);
    for (std::size_t i = 0; i < gp.size(); ++i) gp.values()[i] *= lt.mask.values()[i];
    DenseMatrix u = gp;
    if (p.bn) {
      const std::size_t positions = spec.positions();
      for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t j = 0; j < u.cols(); ++j) u(i, j) *= p.bn->scale(j / positions);
    }
    g = apply_weights_transposed(spec, p.weight, u);
    gated[l] = std::move(gp);
    pre_weight[l] = std::move(u);
  }
  const DenseMatrix& gx = g;

  // gx / n is the gradient of the batch-mean loss with respect to the batch.
  // Penalty and its adjoint with respect to gx.
  const double inv_n = 1.0 / double(n);
  double sq = 0.0;
  for (double v : gx.values()) sq += v * v;
  DenseMatrix adj = gx;
  if (squared_norm) {
    out.regularizer = sq * inv_n * inv_n;
    adj *= 2.0 * inv_n * inv_n;
  } else {
    const double nrm = std::sqrt(sq);
    out.regularizer = nrm * inv_n;
    adj *= nrm > 0.0 ? inv_n / nrm : 0.0;
  }
  out.total = ce.loss + lambda * out.regularizer;

  // Reverse the input-gradient pass in forward order.
  Gradients second = net.zero_gradients(trace.task);
  for (std::size_t l = 0; l < depth; ++l) {
    const auto& spec = net.layers()[l];
    const auto& p = net.params(l, trace.task);
    const auto& lt = trace.layers[l];
    second.layers[l].weight = weight_gradient(spec, adj, pre_weight[l]);
    DenseMatrix z = apply_weights(spec, p.weight, adj);
    if (p.bn) {
      const std::size_t positions = spec.positions();
      auto& lg = second.layers[l];
      for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) {
          const std::size_t c = j / positions;
          lg.gamma[c] += z(i, j) * gated[l](i, j) / std::sqrt(p.bn->var[c] + p.bn->eps);
          z(i, j) *= p.bn->scale(c);
        }
    }
    for (std::size_t i = 0; i < z.size(); ++i) z.values()[i] *= lt.mask.values()[i];
    adj = avg_pool(spec, z);
  }

  // adj now holds d(penalty)/d(gy); chain through gy = softmax(y) - onehot.
  DenseMatrix dlogits(n, gy.cols());
  for (std::size_t i = 0; i < n; ++i) {
    double dotp = 0.0;
    for (std::size_t j = 0; j < gy.cols(); ++j) dotp += probs(i, j) * adj(i, j);
    for (std::size_t j = 0; j < gy.cols(); ++j) {
      const double dy = probs(i, j) * (adj(i, j) - dotp);
      dlogits(i, j) = gy(i, j) * inv_n + lambda * dy;
    }
  }
  out.grads = backward_weights(net, trace, dlogits);
  second *= lambda;
  out.grads += second;
  return out;
}

Objective igr_objective(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                        double lambda, bool squared_norm) {
  return igr_objective(net, forward(net, task, x), labels, lambda, squared_norm);
}

DenseMatrix loss_input_gradient(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels) {
  const ForwardTrace trace = forward(net, task, x);
  check_labels(labels, x.rows(), net.num_classes());
  return backward_input(net, trace, loss_logit_gradient(trace.logits, labels));
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

DenseMatrix fgsm(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels, double step,
                 double pixel_min, double pixel_max) {
  if (step < 0.0) throw std::invalid_argument("fgsm: step must be >= 0");
  if (step == 0.0) return x;
  const DenseMatrix g = loss_input_gradient(net, task, x, labels);
  DenseMatrix adv = x;
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv.values()[i] = std::clamp(x.values()[i] + step * sign(g.values()[i]), pixel_min, pixel_max);
  return adv;
}

DenseMatrix pgd(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                const AttackConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.kind != AttackKind::pgd) throw std::invalid_argument("pgd: attack config is not PGD");
  if (cfg.budget == 0.0) return x;
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  auto clip_ball = [&](double v, double origin) {
    return std::clamp(v, origin - cfg.budget, origin + cfg.budget);
  };

  DenseMatrix best = x;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> noise(-cfg.budget, cfg.budget);
  for (int r = 0; r < cfg.restarts; ++r) {
    DenseMatrix cur = x;
    if (cfg.random_start)
      for (std::size_t i = 0; i < cur.size(); ++i)
        cur.values()[i] = std::clamp(x.values()[i] + noise(rng), cfg.pixel_min, cfg.pixel_max);
    for (int s = 0; s < cfg.steps; ++s) {
      const DenseMatrix g = loss_input_gradient(net, task, cur, labels);
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const double stepped =
            std::clamp(cur.values()[i] + cfg.step * sign(g.values()[i]), cfg.pixel_min, cfg.pixel_max);
        cur.values()[i] = clip_ball(stepped, x.values()[i]);
      }
    }
    const CrossEntropy ce = cross_entropy(forward(net, task, cur).logits, labels);
    for (std::size_t i = 0; i < n; ++i) {
      if (ce.per_sample[i] > best_loss[i]) {
        best_loss[i] = ce.per_sample[i];
        std::copy_n(cur.row(i).begin(), m, best.row(i).begin());
      }
    }
  }
  return best;
}

DenseMatrix run_attack(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                       const AttackConfig& cfg, std::mt19937_64& rng) {
  if (cfg.kind == AttackKind::fgsm) return fgsm(net, task, x, labels, cfg.step, cfg.pixel_min, cfg.pixel_max);
  return pgd(net, task, x, labels, cfg, rng);
}

DenseMatrix adversarial_training_batch(const Network& net, TaskId task, const DenseMatrix& x,
                                       std::span<const int> labels, const DefenseConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t n = x.rows();
  const auto count = std::size_t(std::floor(cfg.at_mix * double(n)));
  if (count == 0) return x;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());

  DenseMatrix subset(count, x.cols());
  std::vector<int> sub_labels(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::copy_n(x.row(order[k]).begin(), x.cols(), subset.row(k).begin());
    sub_labels[k] = labels[order[k]];
  }
  const DenseMatrix adv = fgsm(net, task, subset, sub_labels, cfg.at_epsilon);
  DenseMatrix out = x;
  for (std::size_t k = 0; k < count; ++k) std::copy_n(adv.row(k).begin(), x.cols(), out.row(order[k]).begin());
  return out;
}

}  // namespace dgp
