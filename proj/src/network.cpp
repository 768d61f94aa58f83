#include "dgp/network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace dgp {

namespace {

std::string dims(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

void require_rows(const DenseMatrix& m, std::size_t cols, const char* what) {
  if (m.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(cols) + " columns, got " +
                     dims(m.rows(), m.cols()));
  }
}

}  // namespace

// ---- LayerSpec ----

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out, Activation act) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.in_features = in;
  s.out_features = out;
  s.activation = act;
  s.validate();
  return s;
}

LayerSpec LayerSpec::conv(Shape3 in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t padding, bool bn, Pooling pool, Activation act) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.in_shape = in;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  s.has_bn = bn;
  s.pool = pool;
  s.activation = act;
  s.validate();
  return s;
}

Shape3 LayerSpec::conv_shape() const {
  if (kind == LayerKind::linear) return {out_features, 1, 1};
  const std::size_t h = (in_shape.height + 2 * padding - kernel) / stride + 1;
  const std::size_t w = (in_shape.width + 2 * padding - kernel) / stride + 1;
  return {out_channels, h, w};
}

Shape3 LayerSpec::out_shape() const {
  Shape3 s = conv_shape();
  if (pool == Pooling::avg2x2) {
    s.height /= 2;
    s.width /= 2;
  }
  return s;
}

std::size_t LayerSpec::input_size() const { return kind == LayerKind::linear ? in_features : in_shape.size(); }
std::size_t LayerSpec::preact_size() const { return conv_shape().size(); }
std::size_t LayerSpec::output_size() const { return out_shape().size(); }
std::size_t LayerSpec::weight_rows() const {
  return kind == LayerKind::linear ? in_features : in_shape.channels * kernel * kernel;
}
std::size_t LayerSpec::weight_cols() const { return kind == LayerKind::linear ? out_features : out_channels; }
std::size_t LayerSpec::positions() const {
  if (kind == LayerKind::linear) return 1;
  const Shape3 s = conv_shape();
  return s.height * s.width;
}

void LayerSpec::validate() const {
  if (kind == LayerKind::linear) {
    if (in_features == 0 || out_features == 0) throw ShapeError("linear layer needs nonzero in/out features");
    if (has_bn || pool != Pooling::none) throw ShapeError("BN and pooling are only supported on conv blocks");
    return;
  }
  if (in_shape.size() == 0 || out_channels == 0 || kernel == 0 || stride == 0)
    throw ShapeError("conv layer needs nonzero shape, channels, kernel and stride");
  if (in_shape.height + 2 * padding < kernel || in_shape.width + 2 * padding < kernel)
    throw ShapeError("conv kernel larger than padded input");
  const Shape3 c = conv_shape();
  if (pool == Pooling::avg2x2 && (c.height < 2 || c.width < 2)) throw ShapeError("pooling on a map smaller than 2x2");
}

// ---- BatchNormState ----

BatchNormState BatchNormState::fresh(std::size_t channels) {
  BatchNormState s;
  s.mean.assign(channels, 0.0);
  s.var.assign(channels, 1.0);
  s.gamma.assign(channels, 1.0);
  s.beta.assign(channels, 0.0);
  return s;
}

double BatchNormState::scale(std::size_t c) const { return gamma[c] / std::sqrt(var[c] + eps); }

// ---- Gradients ----

Gradients& Gradients::operator+=(const Gradients& o) {
  if (o.layers.size() != layers.size()) throw ShapeError("Gradients: layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += o.layers[l].weight;
    for (std::size_t c = 0; c < layers[l].gamma.size(); ++c) {
      layers[l].gamma[c] += o.layers[l].gamma[c];
      layers[l].beta[c] += o.layers[l].beta[c];
    }
  }
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (auto& g : layers) {
    g.weight *= s;
    for (auto& x : g.gamma) x *= s;
    for (auto& x : g.beta) x *= s;
  }
  return *this;
}

// ---- Network ----

Network::Network(std::vector<LayerSpec> layers, bool shared_head)
    : layers_(std::move(layers)), shared_head_(shared_head) {
  if (layers_.empty()) throw ShapeError("Network: at least one layer required");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].validate();
    if (l > 0 && layers_[l].input_size() != layers_[l - 1].output_size()) {
      throw ShapeError("Network: layer " + std::to_string(l) + " expects " + std::to_string(layers_[l].input_size()) +
                       " inputs but layer " + std::to_string(l - 1) + " produces " +
                       std::to_string(layers_[l - 1].output_size()));
    }
  }
  shared_.resize(layers_.size());
}

std::vector<TaskId> Network::tasks() const {
  std::vector<TaskId> out;
  for (const auto& [id, _] : first_) out.push_back(id);
  return out;
}

LayerParams init_layer_params(const LayerSpec& spec, std::mt19937_64& rng) {
  LayerParams p;
  const double fan = double(spec.weight_rows() + spec.weight_cols());
  const double bound = std::sqrt(6.0 / fan);
  std::uniform_real_distribution<double> dist(-bound, bound);
  p.weight = DenseMatrix(spec.weight_rows(), spec.weight_cols());
  for (auto& x : p.weight.values()) x = dist(rng);
  if (spec.has_bn) p.bn = BatchNormState::fresh(spec.out_channels);
  return p;
}

void Network::add_task(TaskId task, std::mt19937_64& rng) {
  if (has_task(task)) throw std::invalid_argument("Network::add_task: task " + std::to_string(task) + " exists");
  if (first_.empty()) {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (!is_per_task(l)) shared_[l] = init_layer_params(layers_[l], rng);
  }
  LayerParams first = init_layer_params(layers_.front(), rng);
  LayerParams head = is_per_task(layers_.size() - 1) && layers_.size() > 1 ? init_layer_params(layers_.back(), rng)
                                                                          : LayerParams{};
  set_task_params(task, std::move(first), std::move(head));
}

void Network::set_task_params(TaskId task, LayerParams first, LayerParams head) {
  auto check = [](const LayerSpec& s, const LayerParams& p) {
    if (p.weight.rows() != s.weight_rows() || p.weight.cols() != s.weight_cols())
      throw ShapeError("set_task_params: weight " + dims(p.weight.rows(), p.weight.cols()) + " does not match layer " +
                       dims(s.weight_rows(), s.weight_cols()));
    if (s.has_bn != p.bn.has_value()) throw ShapeError("set_task_params: BN state presence mismatch");
  };
  check(layers_.front(), first);
  if (layers_.size() > 1 && shared_head_) {
    if (!head.weight.empty() || head.bn) throw ShapeError("set_task_params: the head is shared across tasks");
  } else if (layers_.size() > 1) {
    check(layers_.back(), head);
  }
  first_[task] = std::move(first);
  if (layers_.size() > 1 && !shared_head_) head_[task] = std::move(head);
}

const LayerParams& Network::params(std::size_t layer, TaskId task) const {
  if (layer >= layers_.size()) throw std::out_of_range("Network::params: layer index");
  if (is_per_task(layer)) {
    const auto& table = layer == 0 ? first_ : head_;
    auto it = table.find(task);
    if (it == table.end()) throw std::out_of_range("unknown task id " + std::to_string(task));
    return it->second;
  }
  return shared_[layer];
}

LayerParams& Network::params(std::size_t layer, TaskId task) {
  return const_cast<LayerParams&>(std::as_const(*this).params(layer, task));
}

Gradients Network::zero_gradients(TaskId task) const {
  Gradients g;
  g.layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    g.layers[l].weight = DenseMatrix(spec.weight_rows(), spec.weight_cols());
    if (params(l, task).bn) {
      g.layers[l].gamma.assign(spec.out_channels, 0.0);
      g.layers[l].beta.assign(spec.out_channels, 0.0);
    }
    g.layers[l].trainable = true;
    g.layers[l].bn_trainable = params(l, task).bn.has_value() && bn_trainable(l);
  }
  return g;
}

void Network::apply_update(TaskId task, const Gradients& grads, double lr) {
  if (grads.layers.size() != layers_.size()) throw ShapeError("apply_update: gradient layer count mismatch");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& p = params(l, task);
    const auto& g = grads.layers[l];
    if (g.trainable) {
      auto& w = p.weight.values();
      const auto& d = g.weight.values();
      if (w.size() != d.size()) throw ShapeError("apply_update: weight gradient shape mismatch");
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * d[i];
    }
    if (p.bn && bn_trainable(l) && g.bn_trainable && !g.gamma.empty()) {
      for (std::size_t c = 0; c < p.bn->gamma.size(); ++c) {
        p.bn->gamma[c] -= lr * g.gamma[c];
        p.bn->beta[c] -= lr * g.beta[c];
      }
    }
  }
}

namespace {

bool params_equal(const LayerParams& a, const LayerParams& b) {
  if (!(a.weight == b.weight) || a.bn.has_value() != b.bn.has_value()) return false;
  if (!a.bn) return true;
  return a.bn->mean == b.bn->mean && a.bn->var == b.bn->var && a.bn->gamma == b.bn->gamma &&
         a.bn->beta == b.bn->beta && a.bn->eps == b.bn->eps && a.bn->momentum == b.bn->momentum;
}

}  // namespace

bool operator==(const Network& a, const Network& b) {
  if (!(a.layers_ == b.layers_) || a.shared_bn_frozen_ != b.shared_bn_frozen_ || a.shared_head_ != b.shared_head_)
    return false;
  if (a.first_.size() != b.first_.size() || a.head_.size() != b.head_.size()) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l)
    if (!a.is_per_task(l) && !params_equal(a.shared_[l], b.shared_[l])) return false;
  for (const auto& [id, p] : a.first_) {
    auto it = b.first_.find(id);
    if (it == b.first_.end() || !params_equal(p, it->second)) return false;
  }
  for (const auto& [id, p] : a.head_) {
    auto it = b.head_.find(id);
    if (it == b.head_.end() || !params_equal(p, it->second)) return false;
  }
  return true;
}

// ---- block primitives ----

DenseMatrix extract_patches(const LayerSpec& spec, const DenseMatrix& x) {
  require_rows(x, spec.input_size(), "extract_patches");
  if (spec.kind == LayerKind::linear) return x;
  const Shape3 in = spec.in_shape;
  const Shape3 out = spec.conv_shape();
  const std::size_t k = spec.kernel;
  const std::size_t n = x.rows();
  const std::size_t positions = out.height * out.width;
  DenseMatrix p(n * positions, in.channels * k * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    for (std::size_t oy = 0; oy < out.height; ++oy)
      for (std::size_t ox = 0; ox < out.width; ++ox) {
        auto prow = p.row(i * positions + oy * out.width + ox);
        for (std::size_t c = 0; c < in.channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = long(oy * spec.stride + ky) - long(spec.padding);
            if (iy < 0 || iy >= long(in.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = long(ox * spec.stride + kx) - long(spec.padding);
              if (ix < 0 || ix >= long(in.width)) continue;
              prow[c * k * k + ky * k + kx] = xi[c * in.height * in.width + std::size_t(iy) * in.width + std::size_t(ix)];
            }
          }
      }
  }
  return p;
}

DenseMatrix fold_patches(const LayerSpec& spec, const DenseMatrix& patches, std::size_t n) {
  if (spec.kind == LayerKind::linear) return patches;
  const Shape3 in = spec.in_shape;
  const Shape3 out = spec.conv_shape();
  const std::size_t k = spec.kernel;
  const std::size_t positions = out.height * out.width;
  if (patches.rows() != n * positions || patches.cols() != in.channels * k * k)
    throw ShapeError("fold_patches: patch matrix " + dims(patches.rows(), patches.cols()) + " does not match layer");
  DenseMatrix x(n, in.size());
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    for (std::size_t oy = 0; oy < out.height; ++oy)
      for (std::size_t ox = 0; ox < out.width; ++ox) {
        const auto prow = patches.row(i * positions + oy * out.width + ox);
        for (std::size_t c = 0; c < in.channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = long(oy * spec.stride + ky) - long(spec.padding);
            if (iy < 0 || iy >= long(in.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = long(ox * spec.stride + kx) - long(spec.padding);
              if (ix < 0 || ix >= long(in.width)) continue;
              xi[c * in.height * in.width + std::size_t(iy) * in.width + std::size_t(ix)] += prow[c * k * k + ky * k + kx];
            }
          }
      }
  }
  return x;
}

namespace {

// (n * positions) x channels  <->  n x (channels * positions)
DenseMatrix rows_to_maps(const DenseMatrix& rows, std::size_t n, std::size_t positions) {
  const std::size_t ch = rows.cols();
  DenseMatrix out(n, ch * positions);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t c = 0; c < ch; ++c) out(i, c * positions + p) = rows(i * positions + p, c);
  return out;
}

DenseMatrix maps_to_rows(const DenseMatrix& maps, std::size_t positions) {
  const std::size_t n = maps.rows();
  const std::size_t ch = maps.cols() / positions;
  DenseMatrix out(n * positions, ch);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t c = 0; c < ch; ++c) out(i * positions + p, c) = maps(i, c * positions + p);
  return out;
}

}  // namespace

DenseMatrix apply_weights(const LayerSpec& spec, const DenseMatrix& weight, const DenseMatrix& x) {
  require_rows(x, spec.input_size(), "apply_weights");
  if (spec.kind == LayerKind::linear) return matmul(x, weight);
  const std::size_t positions = spec.positions();
  return rows_to_maps(matmul(extract_patches(spec, x), weight), x.rows(), positions);
}

DenseMatrix apply_weights_transposed(const LayerSpec& spec, const DenseMatrix& weight, const DenseMatrix& g) {
  require_rows(g, spec.preact_size(), "apply_weights_transposed");
  if (spec.kind == LayerKind::linear) return matmul_nt(g, weight);
  const std::size_t positions = spec.positions();
  return fold_patches(spec, matmul_nt(maps_to_rows(g, positions), weight), g.rows());
}

DenseMatrix weight_gradient(const LayerSpec& spec, const DenseMatrix& x, const DenseMatrix& g) {
  require_rows(g, spec.preact_size(), "weight_gradient");
  if (spec.kind == LayerKind::linear) return matmul_tn(x, g);
  return matmul_tn(extract_patches(spec, x), maps_to_rows(g, spec.positions()));
}

DenseMatrix avg_pool(const LayerSpec& spec, const DenseMatrix& a) {
  if (spec.pool == Pooling::none) return a;
  const Shape3 in = spec.conv_shape();
  const Shape3 out = spec.out_shape();
  DenseMatrix o(a.rows(), out.size());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    auto oi = o.row(i);
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) {
          const std::size_t base = c * in.height * in.width + 2 * y * in.width + 2 * x;
          oi[c * out.height * out.width + y * out.width + x] =
              0.25 * (ai[base] + ai[base + 1] + ai[base + in.width] + ai[base + in.width + 1]);
        }
  }
  return o;
}

DenseMatrix avg_pool_transposed(const LayerSpec& spec, const DenseMatrix& g) {
  if (spec.pool == Pooling::none) return g;
  const Shape3 in = spec.conv_shape();
  const Shape3 out = spec.out_shape();
  DenseMatrix o(g.rows(), in.size());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const auto gi = g.row(i);
    auto oi = o.row(i);
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) {
          const double v = 0.25 * gi[c * out.height * out.width + y * out.width + x];
          const std::size_t base = c * in.height * in.width + 2 * y * in.width + 2 * x;
          oi[base] += v;
          oi[base + 1] += v;
          oi[base + in.width] += v;
          oi[base + in.width + 1] += v;
        }
  }
  return o;
}

namespace {

std::size_t channel_of(const LayerSpec& spec, std::size_t col) { return col / spec.positions(); }

// Runs one block, filling `lt` and returning the block output.
DenseMatrix block_forward(const LayerSpec& spec, const LayerParams& p, const DenseMatrix& x, LayerTrace& lt) {
  lt.input = x;
  DenseMatrix z = apply_weights(spec, p.weight, x);
  if (p.bn) {
    const auto& bn = *p.bn;
    lt.normalized = DenseMatrix(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) {
        const std::size_t c = channel_of(spec, j);
        const double zhat = (z(i, j) - bn.mean[c]) / std::sqrt(bn.var[c] + bn.eps);
        lt.normalized(i, j) = zhat;
        z(i, j) = zhat * bn.gamma[c] + bn.beta[c];
      }
  }
  lt.mask = DenseMatrix(z.rows(), z.cols(), 1.0);
  if (spec.activation == Activation::relu) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      // derivative at exactly zero is zero
      if (z.values()[i] > 0.0) continue;
      z.values()[i] = 0.0;
      lt.mask.values()[i] = 0.0;
    }
  }
  return avg_pool(spec, z);
}

ForwardTrace run_forward(const Network& net, TaskId task, const DenseMatrix& x) {
  if (!net.has_task(task)) throw std::out_of_range("forward: unknown task id " + std::to_string(task));
  require_rows(x, net.input_size(), "forward");
  ForwardTrace trace;
  trace.task = task;
  trace.layers.resize(net.depth());
  DenseMatrix h = x;
  for (std::size_t l = 0; l < net.depth(); ++l) h = block_forward(net.layers()[l], net.params(l, task), h, trace.layers[l]);
  trace.logits = std::move(h);
  return trace;
}

void check_trace(const Network& net, const ForwardTrace& trace) {
  if (trace.layers.size() != net.depth()) throw ShapeError("trace depth does not match network");
  if (!net.has_task(trace.task)) throw std::out_of_range("trace refers to unknown task " + std::to_string(trace.task));
}

// Backpropagates g (block output gradient) to the pre-weight gradient u;
// BN gradients go into lg when requested.
DenseMatrix block_pre_weight_grad(const LayerSpec& spec, const LayerParams& p, const LayerTrace& lt,
                                  const DenseMatrix& g, LayerGradient* lg) {
  DenseMatrix u = avg_pool_transposed(spec, g);
  for (std::size_t i = 0; i < u.size(); ++i) u.values()[i] *= lt.mask.values()[i];
  if (p.bn) {
    const auto& bn = *p.bn;
    for (std::size_t i = 0; i < u.rows(); ++i)
      for (std::size_t j = 0; j < u.cols(); ++j) {
        const std::size_t c = channel_of(spec, j);
        if (lg) {
          lg->gamma[c] += u(i, j) * lt.normalized(i, j);
          lg->beta[c] += u(i, j);
        }
        u(i, j) *= bn.scale(c);
      }
  }
  return u;
}

}  // namespace

ForwardTrace forward(const Network& net, TaskId task, const DenseMatrix& x) { return run_forward(net, task, x); }

ForwardTrace forward_train(Network& net, TaskId task, const DenseMatrix& x) {
  if (!net.has_task(task)) throw std::out_of_range("forward: unknown task id " + std::to_string(task));
  require_rows(x, net.input_size(), "forward");
  ForwardTrace trace;
  trace.task = task;
  trace.layers.resize(net.depth());
  DenseMatrix h = x;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    const auto& spec = net.layers()[l];
    auto& p = net.params(l, task);
    if (p.bn && net.bn_trainable(l) && x.rows() > 1) {
      const DenseMatrix z = apply_weights(spec, p.weight, h);
      const std::size_t positions = spec.positions();
      const double count = double(z.rows() * positions);
      auto& bn = *p.bn;
      for (std::size_t c = 0; c < spec.out_channels; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < z.rows(); ++i)
          for (std::size_t q = 0; q < positions; ++q) mean += z(i, c * positions + q);
        mean /= count;
        double var = 0.0;
        for (std::size_t i = 0; i < z.rows(); ++i)
          for (std::size_t q = 0; q < positions; ++q) {
            const double d = z(i, c * positions + q) - mean;
            var += d * d;
          }
        var /= (count - 1.0);
        bn.mean[c] = (1.0 - bn.momentum) * bn.mean[c] + bn.momentum * mean;
        bn.var[c] = (1.0 - bn.momentum) * bn.var[c] + bn.momentum * var;
      }
    }
    h = block_forward(spec, p, h, trace.layers[l]);
  }
  trace.logits = std::move(h);
  return trace;
}

Gradients backward_weights(const Network& net, const ForwardTrace& trace, const DenseMatrix& dlogits) {
  check_trace(net, trace);
  if (dlogits.rows() != trace.logits.rows() || dlogits.cols() != trace.logits.cols())
    throw ShapeError("backward_weights: dlogits " + dims(dlogits.rows(), dlogits.cols()) + " vs logits " +
                     dims(trace.logits.rows(), trace.logits.cols()));
  Gradients grads = net.zero_gradients(trace.task);
  DenseMatrix g = dlogits;
  for (std::size_t l = net.depth(); l-- > 0;) {
    const auto& spec = net.layers()[l];
    const auto& p = net.params(l, trace.task);
    auto& lg = grads.layers[l];
    const DenseMatrix u = block_pre_weight_grad(spec, p, trace.layers[l], g, &lg);
    lg.weight = weight_gradient(spec, trace.layers[l].input, u);
    lg.bn_trainable = p.bn.has_value() && net.bn_trainable(l);
    if (l > 0) g = apply_weights_transposed(spec, p.weight, u);
  }
  return grads;
}

DenseMatrix backward_input(const Network& net, const ForwardTrace& trace, const DenseMatrix& dlogits) {
  check_trace(net, trace);
  DenseMatrix g = dlogits;
  for (std::size_t l = net.depth(); l-- > 0;) {
    LayerJacobian jac(net.layers()[l], net.params(l, trace.task), trace.layers[l]);
    g = jac.apply_transposed(g);
  }
  return g;
}

// ---- Jacobians ----

LayerJacobian::LayerJacobian(const LayerSpec& spec, const LayerParams& params, const LayerTrace& trace)
    : spec_(&spec), params_(&params), trace_(&trace) {
  if (trace.mask.cols() != spec.preact_size()) throw ShapeError("LayerJacobian: trace does not belong to this layer");
  if (spec.has_bn && !params.bn) throw UnsupportedError("LayerJacobian: BN layer without tracked statistics");
}

DenseMatrix LayerJacobian::apply_rows(const DenseMatrix& v, const DenseMatrix& mask) const {
  DenseMatrix z = apply_weights(*spec_, params_->weight, v);
  const bool broadcast = mask.rows() == 1;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto mrow = mask.row(broadcast ? 0 : i);
    auto zrow = z.row(i);
    for (std::size_t j = 0; j < z.cols(); ++j) {
      double s = mrow[j];
      if (params_->bn) s *= params_->bn->scale(channel_of(*spec_, j));
      zrow[j] *= s;
    }
  }
  return avg_pool(*spec_, z);
}

DenseMatrix LayerJacobian::apply(const DenseMatrix& v) const {
  if (v.rows() != trace_->mask.rows())
    throw ShapeError("LayerJacobian::apply: " + std::to_string(v.rows()) + " rows for a trace of " +
                     std::to_string(trace_->mask.rows()) + " samples");
  return apply_rows(v, trace_->mask);
}

DenseMatrix LayerJacobian::apply_for_sample(const DenseMatrix& v, std::size_t sample) const {
  if (sample >= trace_->mask.rows()) throw std::out_of_range("LayerJacobian::apply_for_sample");
  return apply_rows(v, trace_->mask.row_block(sample, 1));
}

DenseMatrix LayerJacobian::apply_transposed(const DenseMatrix& g) const {
  if (g.rows() != trace_->mask.rows()) throw ShapeError("LayerJacobian::apply_transposed: sample count mismatch");
  const DenseMatrix u = block_pre_weight_grad(*spec_, *params_, *trace_, g, nullptr);
  return apply_weights_transposed(*spec_, params_->weight, u);
}

DenseMatrix conv_as_matrix(const LayerSpec& spec, const DenseMatrix& weight) {
  if (spec.kind != LayerKind::conv) throw std::invalid_argument("conv_as_matrix: not a conv layer");
  const Shape3 in = spec.in_shape;
  const Shape3 out = spec.conv_shape();
  if (in.size() * out.size() > (1u << 16))
    throw std::length_error("conv_as_matrix: " + dims(in.size(), out.size()) + " exceeds the 2^16 entry cap");
  if (weight.rows() != spec.weight_rows() || weight.cols() != spec.weight_cols())
    throw ShapeError("conv_as_matrix: weight shape mismatch");
  const std::size_t k = spec.kernel;
  const std::size_t positions = out.height * out.width;
  DenseMatrix wt(in.size(), out.size());
  for (std::size_t co = 0; co < out.channels; ++co)
    for (std::size_t oy = 0; oy < out.height; ++oy)
      for (std::size_t ox = 0; ox < out.width; ++ox) {
        const std::size_t col = co * positions + oy * out.width + ox;
        for (std::size_t c = 0; c < in.channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(oy * spec.stride + ky) - long(spec.padding);
              const long ix = long(ox * spec.stride + kx) - long(spec.padding);
              if (iy < 0 || ix < 0 || iy >= long(in.height) || ix >= long(in.width)) continue;
              wt(c * in.height * in.width + std::size_t(iy) * in.width + std::size_t(ix), col) =
                  weight(c * k * k + ky * k + kx, co);
            }
      }
  return wt;
}

DenseMatrix weak_gradient_seed(const Network& net, const ForwardTrace& trace) {
  check_trace(net, trace);
  const std::size_t n = trace.logits.rows();
  LayerJacobian jac(net.layers()[0], net.params(0, trace.task), trace.layers[0]);
  return jac.apply(DenseMatrix(n, net.input_size(), 1.0));
}

DenseMatrix propagate_weak_gradient(const DenseMatrix& v, const LayerJacobian& jacobian) { return jacobian.apply(v); }

std::vector<DenseMatrix> weak_gradients(const Network& net, const ForwardTrace& trace) {
  check_trace(net, trace);
  std::vector<DenseMatrix> out;
  out.reserve(net.depth() + 1);
  out.emplace_back(trace.logits.rows(), net.input_size(), 1.0);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    LayerJacobian jac(net.layers()[l], net.params(l, trace.task), trace.layers[l]);
    out.push_back(propagate_weak_gradient(out.back(), jac));
  }
  return out;
}

DenseMatrix full_input_jacobian(const Network& net, TaskId task, std::span<const double> x) {
  const std::size_t m = net.input_size();
  if (x.size() != m) throw ShapeError("full_input_jacobian: sample length mismatch");
  if (m * net.num_classes() > (1u << 20)) throw std::length_error("full_input_jacobian: exceeds 2^20 entry cap");
  const ForwardTrace trace = forward(net, task, DenseMatrix(1, m, std::vector<double>(x.begin(), x.end())));
  DenseMatrix j = DenseMatrix::identity(m);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    LayerJacobian jac(net.layers()[l], net.params(l, task), trace.layers[l]);
    j = jac.apply_for_sample(j, 0);
  }
  return j;
}

// ---- checkpoint ----

namespace {

constexpr char kNetMagic[5] = "DGPW";
constexpr std::uint32_t kNetVersion = 2;

void put_spec(std::ostream& os, const LayerSpec& s) {
  io::put_u32(os, std::uint32_t(s.kind));
  io::put_u64(os, s.in_features);
  io::put_u64(os, s.out_features);
  io::put_u64(os, s.in_shape.channels);
  io::put_u64(os, s.in_shape.height);
  io::put_u64(os, s.in_shape.width);
  io::put_u64(os, s.out_channels);
  io::put_u64(os, s.kernel);
  io::put_u64(os, s.stride);
  io::put_u64(os, s.padding);
  io::put_u32(os, std::uint32_t(s.activation));
  io::put_u32(os, s.has_bn ? 1 : 0);
  io::put_u32(os, std::uint32_t(s.pool));
}

LayerSpec get_spec(std::istream& is) {
  LayerSpec s;
  const auto kind = io::get_u32(is);
  if (kind > 1) throw FormatError("DGPW: unknown layer kind " + std::to_string(kind));
  s.kind = LayerKind(kind);
  s.in_features = io::get_u64(is);
  s.out_features = io::get_u64(is);
  s.in_shape.channels = io::get_u64(is);
  s.in_shape.height = io::get_u64(is);
  s.in_shape.width = io::get_u64(is);
  s.out_channels = io::get_u64(is);
  s.kernel = io::get_u64(is);
  s.stride = io::get_u64(is);
  s.padding = io::get_u64(is);
  const auto act = io::get_u32(is);
  const auto bn = io::get_u32(is);
  const auto pool = io::get_u32(is);
  if (act > 1 || bn > 1 || pool > 1) throw FormatError("DGPW: corrupt layer table");
  s.activation = Activation(act);
  s.has_bn = bn == 1;
  s.pool = Pooling(pool);
  try {
    s.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("DGPW: invalid layer table: ") + e.what());
  }
  return s;
}

void put_params(std::ostream& os, const LayerParams& p) {
  io::put_matrix(os, p.weight);
  io::put_u32(os, p.bn ? 1 : 0);
  if (p.bn) {
    io::put_vec(os, p.bn->mean);
    io::put_vec(os, p.bn->var);
    io::put_vec(os, p.bn->gamma);
    io::put_vec(os, p.bn->beta);
    io::put_f64(os, p.bn->eps);
    io::put_f64(os, p.bn->momentum);
  }
}

LayerParams get_params(std::istream& is) {
  LayerParams p;
  p.weight = io::get_matrix(is);
  if (io::get_u32(is) == 1) {
    BatchNormState bn;
    bn.mean = io::get_vec(is);
    bn.var = io::get_vec(is);
    bn.gamma = io::get_vec(is);
    bn.beta = io::get_vec(is);
    bn.eps = io::get_f64(is);
    bn.momentum = io::get_f64(is);
    p.bn = std::move(bn);
  }
  return p;
}

}  // namespace

void save_network(const Network& net, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  io::put_magic(os, kNetMagic, kNetVersion);
  io::put_u32(os, std::uint32_t(net.depth()));
  for (const auto& s : net.layers()) put_spec(os, s);
  io::put_u32(os, net.shared_head() ? 1 : 0);
  io::put_u32(os, net.shared_bn_frozen() ? 1 : 0);
  const auto tasks = net.tasks();
  for (std::size_t l = 0; l < net.depth(); ++l)
    if (!net.is_per_task(l)) put_params(os, net.params(l, tasks.empty() ? 0 : tasks.front()));
  io::put_u32(os, std::uint32_t(tasks.size()));
  for (TaskId t : tasks) {
    io::put_i32(os, t);
    put_params(os, net.params(0, t));
    if (net.depth() > 1 && !net.shared_head()) put_params(os, net.params(net.depth() - 1, t));
  }
  io::write_file_atomic(path, os.str());
}

Network load_network(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open network checkpoint " + path.string());
  io::expect_magic(f, kNetMagic, kNetVersion);
  const auto depth = io::get_u32(f);
  if (depth == 0 || depth > 1024) throw FormatError("DGPW: implausible layer count " + std::to_string(depth));
  std::vector<LayerSpec> specs;
  for (std::uint32_t l = 0; l < depth; ++l) specs.push_back(get_spec(f));
  const auto head_flag = io::get_u32(f);
  if (head_flag > 1) throw FormatError("DGPW: corrupt head flag");
  Network net;
  try {
    net = Network(specs, head_flag == 1);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("DGPW: inconsistent layer table: ") + e.what());
  }
  const bool frozen = io::get_u32(f) == 1;
  std::vector<LayerParams> shared(depth);
  for (std::size_t l = 0; l < depth; ++l)
    if (!net.is_per_task(l)) shared[l] = get_params(f);
  const auto ntasks = io::get_u32(f);
  if (ntasks > 100000) throw FormatError("DGPW: implausible task count");
  bool first = true;
  for (std::uint32_t i = 0; i < ntasks; ++i) {
    const TaskId t = io::get_i32(f);
    LayerParams p0 = get_params(f);
    LayerParams ph = depth > 1 && !net.shared_head() ? get_params(f) : LayerParams{};
    try {
      net.set_task_params(t, std::move(p0), std::move(ph));
    } catch (const ShapeError& e) {
      throw FormatError(std::string("DGPW: ") + e.what());
    }
    if (first) {
      for (std::size_t l = 0; l < depth; ++l) {
        if (net.is_per_task(l)) continue;
        const auto& s = specs[l];
        if (shared[l].weight.rows() != s.weight_rows() || shared[l].weight.cols() != s.weight_cols())
          throw FormatError("DGPW: shared weight shape mismatch at layer " + std::to_string(l));
        net.params(l, t) = std::move(shared[l]);
      }
      first = false;
    }
  }
  if (frozen) net.freeze_shared_bn();
  if (f.peek() != std::char_traits<char>::eof()) throw FormatError("DGPW: trailing bytes after payload");
  return net;
}

}  // namespace dgp
