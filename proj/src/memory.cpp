#include "dgp/memory.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace dgp {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::activation: return "activation";
    case Provenance::gradient: return "gradient";
    case Provenance::compressed: return "compressed";
  }
  return "?";
}

std::size_t LayerPool::count_of(Provenance p) const { return std::size_t(std::count(tags.begin(), tags.end(), p)); }

bool operator==(const LayerPool& a, const LayerPool& b) {
  return a.layer == b.layer && a.basis.dim() == b.basis.dim() && a.basis.vectors() == b.basis.vectors() &&
         a.tags == b.tags && a.origin == b.origin && a.weights == b.weights;
}

BasisPool::BasisPool(const Network& net) {
  for (std::size_t l = 0; l < net.depth(); ++l) {
    if (net.is_per_task(l)) continue;
    LayerPool p;
    p.layer = l;
    p.basis = OrthonormalBasis(net.layers()[l].weight_rows());
    layers_.push_back(std::move(p));
  }
}

bool BasisPool::constrains(std::size_t layer) const noexcept {
  return std::any_of(layers_.begin(), layers_.end(), [&](const LayerPool& p) { return p.layer == layer; });
}

const LayerPool& BasisPool::at(std::size_t layer) const {
  for (const auto& p : layers_)
    if (p.layer == layer) return p;
  throw std::out_of_range("BasisPool: layer " + std::to_string(layer) + " is not constrained");
}

LayerPool& BasisPool::at(std::size_t layer) { return const_cast<LayerPool&>(std::as_const(*this).at(layer)); }

std::size_t BasisPool::total_count() const {
  std::size_t n = 0;
  for (const auto& p : layers_) n += p.count();
  return n;
}

void BasisPool::check(double tol) const {
  for (const auto& p : layers_) {
    p.basis.check(tol);
    if (p.tags.size() != p.count() || p.origin.size() != p.count() || p.weights.size() != p.count())
      throw NumericalError("BasisPool: bookkeeping out of sync at layer " + std::to_string(p.layer));
  }
}

const char* memory_mode_name(MemoryMode m) {
  switch (m) {
    case MemoryMode::dgp: return "dgp";
    case MemoryMode::gpm: return "gpm";
    case MemoryMode::none: return "none";
  }
  return "?";
}

MemoryMode parse_memory_mode(const std::string& s) {
  if (s == "dgp") return MemoryMode::dgp;
  if (s == "gpm") return MemoryMode::gpm;
  if (s == "none" || s == "sgd") return MemoryMode::none;
  throw ConfigError("memory.mode must be one of dgp, gpm, none (got '" + s + "')");
}

double MemoryConfig::alpha1_for(std::size_t layer, TaskId task) const {
  const double base = alpha1.empty() ? 1.0 : alpha1[std::min(layer, alpha1.size() - 1)];
  return std::min(1.0, base + alpha1_task_step * double(task));
}

void MemoryConfig::validate() const {
  auto in_range = [](double a) { return a > 0.0 && a <= 1.0; };
  if (alpha1.empty()) throw ConfigError("memory.alpha1 needs at least one value");
  for (double a : alpha1)
    if (!in_range(a)) throw ConfigError("memory.alpha1 values must lie in (0, 1]");
  if (alpha1_task_step < 0.0) throw ConfigError("memory.alpha1_task_step must be >= 0");
  if (!in_range(alpha2)) throw ConfigError("memory.alpha2 must lie in (0, 1]");
  if (!in_range(alpha3)) throw ConfigError("memory.alpha3 must lie in (0, 1]");
  if (memory_size < 1) throw ConfigError("memory.memory_size must be >= 1");
}

namespace {

DenseMatrix layer_rows(const LayerSpec& spec, const DenseMatrix& x) {
  return spec.kind == LayerKind::conv ? extract_patches(spec, x) : x;
}

}  // namespace

std::vector<DenseMatrix> sample_activation_matrices(const Network& net, TaskId task, const DenseMatrix& samples) {
  const ForwardTrace trace = forward(net, task, samples);
  std::vector<DenseMatrix> out(net.depth());
  for (std::size_t l = 0; l < net.depth(); ++l)
    if (!net.is_per_task(l)) out[l] = layer_rows(net.layers()[l], trace.layers[l].input);
  return out;
}

std::vector<DenseMatrix> sample_gradient_matrices(const Network& net, TaskId task, const DenseMatrix& samples) {
  const ForwardTrace trace = forward(net, task, samples);
  std::vector<DenseMatrix> weak = weak_gradients(net, trace);
  std::vector<DenseMatrix> out(net.depth());
  for (std::size_t l = 0; l < net.depth(); ++l)
    if (!net.is_per_task(l)) out[l] = layer_rows(net.layers()[l], weak[l]);
  return out;
}

std::size_t extend_pool(LayerPool& pool, const DenseMatrix& m, double alpha, Provenance tag, TaskId task) {
  if (m.cols() != pool.dim())
    throw ConfigError("extend_pool: matrix has " + std::to_string(m.cols()) + " columns, layer " +
                      std::to_string(pool.layer) + " pool lives in R^" + std::to_string(pool.dim()));
  m.require_finite("extend_pool");
  const double ref = frobenius_norm(m);
  if (ref == 0.0 || pool.count() >= pool.dim()) return 0;

  DenseMatrix r = m;
  if (!pool.basis.empty()) r -= matmul_nt(matmul(m, pool.basis.vectors()), pool.basis.vectors());
  SvdFactorization f = svd(r);
  for (double& s : f.sigma)
    if (s < 1e-10 * ref) s = 0.0;
  if (f.sigma.empty() || f.sigma.front() == 0.0) return 0;
  const std::size_t k = rank_select(f.sigma, alpha);

  std::size_t added = 0;
  for (std::size_t i = 0; i < k && pool.count() < pool.dim(); ++i) {
    const std::size_t before = pool.count();
    DenseMatrix col(pool.dim(), 1);
    for (std::size_t j = 0; j < pool.dim(); ++j) col(j, 0) = f.vt(i, j);
    pool.basis = orthonormalize_append(pool.basis, col);
    if (pool.count() == before) continue;
    pool.tags.push_back(tag);
    pool.origin.push_back(task);
    pool.weights.push_back(f.sigma[i] / ref);
    ++added;
  }
  return added;
}

void project_weight_gradients(Gradients& grads, const BasisPool& pool) {
  for (const auto& p : pool.layers()) {
    if (p.layer >= grads.layers.size()) throw ConfigError("project_weight_gradients: pool layer out of range");
    auto& g = grads.layers[p.layer].weight;
    if (g.rows() != p.dim())
      throw ConfigError("project_weight_gradients: layer " + std::to_string(p.layer) + " gradient has " +
                        std::to_string(g.rows()) + " rows but the pool dimension is " + std::to_string(p.dim()));
    if (p.basis.empty()) continue;
    g = project_out(g, p.basis);
  }
}

LayerPool compress_layer(const LayerPool& pool, double alpha, TaskId task) {
  if (pool.basis.empty()) return pool;
  DenseMatrix a = pool.basis.vectors();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) *= pool.weights[j];
  SvdFactorization f = svd(a);
  const double top = f.sigma.front();
  for (double& x : f.sigma)
    if (x < 1e-10 * top) x = 0.0;
  const std::size_t k = rank_select(f.sigma, alpha);
  LayerPool out;
  out.layer = pool.layer;
  OrthonormalBasis fresh(pool.dim());
  out.basis = orthonormalize_append(fresh, f.u.col_block(0, k));
  const std::size_t kept = out.basis.count();
  out.tags.assign(kept, Provenance::compressed);
  out.origin.assign(kept, task);
  out.weights.assign(f.sigma.begin(), f.sigma.begin() + std::ptrdiff_t(kept));
  return out;
}

std::size_t compress_pool(BasisPool& pool, const MemoryConfig& cfg, TaskId task) {
  std::size_t n = 0;
  for (auto& p : pool.layers()) {
    const std::size_t limit = p.dim() > cfg.headroom ? p.dim() - cfg.headroom : 0;
    if (p.count() < limit || p.basis.empty()) continue;
    p = compress_layer(p, cfg.alpha3, task);
    ++n;
  }
  return n;
}

std::vector<std::size_t> draw_memory_indices(std::size_t available, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), 0);
  count = std::min(count, available);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, available - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

PoolUpdateReport end_of_task_update(BasisPool& pool, const Network& net, TaskId task, const DenseMatrix& data,
                                    const MemoryConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  PoolUpdateReport report;
  report.activation_added.assign(pool.layers().size(), 0);
  report.gradient_added.assign(pool.layers().size(), 0);
  if (cfg.mode == MemoryMode::none || pool.layers().empty() || data.rows() == 0) return report;

  const auto idx = draw_memory_indices(data.rows(), cfg.memory_size, rng);
  DenseMatrix samples(idx.size(), data.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(data.row(idx[i]).begin(), data.cols(), samples.row(i).begin());

  const auto acts = sample_activation_matrices(net, task, samples);
  report.compressions += compress_pool(pool, cfg, task);
  for (std::size_t k = 0; k < pool.layers().size(); ++k) {
    auto& p = pool.layers()[k];
    report.activation_added[k] = extend_pool(p, acts[p.layer], cfg.alpha1_for(p.layer, task), Provenance::activation, task);
  }
  if (cfg.mode == MemoryMode::dgp) {
    const auto grads = sample_gradient_matrices(net, task, samples);
    report.compressions += compress_pool(pool, cfg, task);
    for (std::size_t k = 0; k < pool.layers().size(); ++k) {
      auto& p = pool.layers()[k];
      report.gradient_added[k] = extend_pool(p, grads[p.layer], cfg.alpha2, Provenance::gradient, task);
    }
  }
  report.compressions += compress_pool(pool, cfg, task);
  pool.check();
  return report;
}

// ---- checkpoint ----

namespace {

constexpr char kPoolMagic[5] = "DGPP";
constexpr std::uint32_t kPoolVersion = 1;

}  // namespace

void save_pool(const BasisPool& pool, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  io::put_magic(os, kPoolMagic, kPoolVersion);
  io::put_u32(os, std::uint32_t(pool.layers().size()));
  for (const auto& p : pool.layers()) {
    io::put_u32(os, std::uint32_t(p.layer));
    io::put_u64(os, p.dim());
    io::put_matrix(os, p.basis.vectors());
    for (std::size_t i = 0; i < p.count(); ++i) {
      io::put_u32(os, std::uint32_t(p.tags[i]));
      io::put_i32(os, p.origin[i]);
      io::put_f64(os, p.weights[i]);
    }
  }
  io::write_file_atomic(path, os.str());
}

BasisPool load_pool(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open pool checkpoint " + path.string());
  io::expect_magic(f, kPoolMagic, kPoolVersion);
  const auto nlayers = io::get_u32(f);
  if (nlayers > 1024) throw FormatError("DGPP: implausible layer count " + std::to_string(nlayers));
  BasisPool pool;
  for (std::uint32_t k = 0; k < nlayers; ++k) {
    LayerPool p;
    p.layer = io::get_u32(f);
    const auto dim = io::get_u64(f);
    DenseMatrix v = io::get_matrix(f);
    if (v.rows() != dim || v.cols() > dim)
      throw FormatError("DGPP: basis shape does not match dimension at layer " + std::to_string(p.layer));
    p.basis = OrthonormalBasis(dim, std::move(v));
    for (std::size_t i = 0; i < p.count(); ++i) {
      const auto tag = io::get_u32(f);
      if (tag > 2) throw FormatError("DGPP: unknown provenance tag " + std::to_string(tag));
      p.tags.push_back(Provenance(tag));
      p.origin.push_back(io::get_i32(f));
      p.weights.push_back(io::get_f64(f));
    }
    pool.layers().push_back(std::move(p));
  }
  if (f.peek() != std::char_traits<char>::eof()) throw FormatError("DGPP: trailing bytes after payload");
  pool.check();
  return pool;
}

}  // namespace dgp
