#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dgp/harness.hpp"
#include "dgp/streams.hpp"

namespace dgp {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream), std::uint32_t(stream >> 32),
                    std::uint32_t(sub), std::uint32_t(sub >> 32)};
  return std::mt19937_64(seq);
}

// ---- IDX ----

namespace {

std::vector<unsigned char> read_maybe_gz(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset file not found: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::vector<unsigned char> buf(1 << 16);
  for (;;) {
    const int got = gzread(f, buf.data(), unsigned(buf.size()));
    if (got < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw IdxTruncatedError(path.string() + ": " + msg);
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return std::uint32_t(b[at]) << 24 | std::uint32_t(b[at + 1]) << 16 | std::uint32_t(b[at + 2]) << 8 |
         std::uint32_t(b[at + 3]);
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_maybe_gz(images);
  const auto lb = read_maybe_gz(labels);
  if (ib.size() < 4 || be32(ib, 0) != 0x00000803)
    throw IdxMagicError(images.string() + ": not an IDX image file (expected magic 0x00000803)");
  if (lb.size() < 4 || be32(lb, 0) != 0x00000801)
    throw IdxMagicError(labels.string() + ": not an IDX label file (expected magic 0x00000801)");
  if (ib.size() < 16) throw IdxTruncatedError(images.string() + ": header truncated");
  if (lb.size() < 8) throw IdxTruncatedError(labels.string() + ": header truncated");
  const std::size_t n = be32(ib, 4);
  const std::size_t h = be32(ib, 8);
  const std::size_t w = be32(ib, 12);
  const std::size_t nl = be32(lb, 4);
  if (ib.size() < 16 + n * h * w)
    throw IdxTruncatedError(images.string() + ": payload holds " + std::to_string(ib.size() - 16) + " bytes, header declares " +
                            std::to_string(n * h * w));
  if (lb.size() < 8 + nl) throw IdxTruncatedError(labels.string() + ": payload shorter than declared label count");
  if (n != nl)
    throw IdxCountMismatchError(images.string() + " has " + std::to_string(n) + " images but " + labels.string() +
                                " has " + std::to_string(nl) + " labels");
  Dataset d;
  d.shape = {1, h, w};
  d.images = DenseMatrix(n, h * w);
  for (std::size_t i = 0; i < n * h * w; ++i) d.images.values()[i] = double(ib[16 + i]) / 255.0;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) max_label = std::max(max_label, d.labels[i] = int(lb[8 + i]));
  d.num_classes = std::size_t(max_label) + 1;
  return d;
}

void write_idx_dataset(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.shape.channels != 1) throw UnsupportedError("write_idx_dataset: single-channel images only");
  std::ofstream fi(images, std::ios::binary | std::ios::trunc);
  std::ofstream fl(labels, std::ios::binary | std::ios::trunc);
  if (!fi || !fl) throw std::runtime_error("cannot write IDX files");
  put_be32(fi, 0x00000803);
  put_be32(fi, std::uint32_t(data.size()));
  put_be32(fi, std::uint32_t(data.shape.height));
  put_be32(fi, std::uint32_t(data.shape.width));
  for (double v : data.images.values()) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    fi.put(char(b));
  }
  put_be32(fl, 0x00000801);
  put_be32(fl, std::uint32_t(data.size()));
  for (int y : data.labels) fl.put(char(static_cast<unsigned char>(y)));
}

DatasetPair load_mnist_dir(const std::filesystem::path& dir) {
  auto find = [&](std::initializer_list<const char*> stems) {
    for (const char* stem : stems)
      for (const char* ext : {"", ".gz"}) {
        auto p = dir / (std::string(stem) + ext);
        if (std::filesystem::exists(p)) return p;
      }
    throw std::runtime_error("dataset directory " + dir.string() + " has no " + *stems.begin() + "[.gz]");
  };
  DatasetPair out;
  out.train = load_idx_dataset(find({"train-images-idx3-ubyte"}), find({"train-labels-idx1-ubyte"}));
  out.test = load_idx_dataset(find({"t10k-images-idx3-ubyte", "test-images-idx3-ubyte"}),
                              find({"t10k-labels-idx1-ubyte", "test-labels-idx1-ubyte"}));
  const std::size_t classes = std::max(out.train.num_classes, out.test.num_classes);
  out.train.num_classes = out.test.num_classes = classes;
  return out;
}

Dataset synthetic_dataset(std::size_t n, Shape3 shape, std::size_t classes, std::uint64_t seed, std::uint64_t split) {
  if (classes == 0) throw std::invalid_argument("synthetic_dataset: classes must be >= 1");
  auto proto_rng = stream_rng(seed, stream::synthetic, 0);
  const std::size_t h = shape.height;
  const std::size_t w = shape.width;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<DenseMatrix> protos;
  for (std::size_t c = 0; c < classes; ++c) {
    DenseMatrix p(shape.channels, h * w);
    for (int blob = 0; blob < 3; ++blob) {
      const double cy = 0.2 * double(h) + 0.6 * double(h) * unit(proto_rng);
      const double cx = 0.2 * double(w) + 0.6 * double(w) * unit(proto_rng);
      const double r = 0.08 * double(h) + 0.1 * double(h) * unit(proto_rng);
      for (std::size_t ch = 0; ch < shape.channels; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double d2 = (double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx);
            p(ch, y * w + x) += std::exp(-d2 / (2.0 * r * r));
          }
    }
    protos.push_back(std::move(p));
  }

  auto rng = stream_rng(seed, stream::synthetic, 1 + split);
  std::normal_distribution<double> noise(0.0, 0.15);
  std::uniform_int_distribution<int> shift(-1, 1);
  Dataset d;
  d.shape = shape;
  d.num_classes = classes;
  d.images = DenseMatrix(n, shape.size());
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = int(i % classes);
  std::shuffle(d.labels.begin(), d.labels.end(), rng);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = protos[std::size_t(d.labels[i])];
    const int dy = shift(rng);
    const int dx = shift(rng);
    const double gain = 0.7 + 0.5 * unit(rng);
    auto row = d.images.row(i);
    for (std::size_t ch = 0; ch < shape.channels; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = long(y) - dy;
          const long sx = long(x) - dx;
          double v = 0.0;
          if (sy >= 0 && sx >= 0 && sy < long(h) && sx < long(w)) v = gain * p(ch, std::size_t(sy) * w + std::size_t(sx));
          row[ch * h * w + y * w + x] = std::clamp(v + noise(rng), 0.0, 1.0);
        }
  }
  return d;
}

Dataset downscale(const Dataset& d, int times) {
  Dataset cur = d;
  for (int t = 0; t < times; ++t) {
    const Shape3 in = cur.shape;
    const Shape3 out{in.channels, in.height / 2, in.width / 2};
    if (out.height == 0 || out.width == 0) throw ConfigError("downscale: image too small");
    Dataset next;
    next.shape = out;
    next.num_classes = cur.num_classes;
    next.labels = cur.labels;
    next.images = DenseMatrix(cur.size(), out.size());
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto src = cur.images.row(i);
      auto dst = next.images.row(i);
      for (std::size_t c = 0; c < out.channels; ++c)
        for (std::size_t y = 0; y < out.height; ++y)
          for (std::size_t x = 0; x < out.width; ++x) {
            const std::size_t b = c * in.height * in.width + 2 * y * in.width + 2 * x;
            dst[c * out.height * out.width + y * out.width + x] =
                0.25 * (src[b] + src[b + 1] + src[b + in.width] + src[b + in.width + 1]);
          }
    }
    cur = std::move(next);
  }
  return cur;
}

Dataset select_rows(const Dataset& d, std::span<const std::size_t> rows) {
  Dataset out;
  out.shape = d.shape;
  out.num_classes = d.num_classes;
  out.images = DenseMatrix(rows.size(), d.images.cols());
  out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= d.size()) throw std::out_of_range("select_rows: row index");
    std::copy_n(d.images.row(rows[i]).begin(), d.images.cols(), out.images.row(i).begin());
    out.labels[i] = d.labels[rows[i]];
  }
  return out;
}

// ---- task sequences ----

const char* benchmark_name(BenchmarkKind k) {
  switch (k) {
    case BenchmarkKind::permuted: return "permuted";
    case BenchmarkKind::rotated: return "rotated";
    case BenchmarkKind::split: return "split";
  }
  return "?";
}

BenchmarkKind parse_benchmark(const std::string& s) {
  if (s == "permuted") return BenchmarkKind::permuted;
  if (s == "rotated") return BenchmarkKind::rotated;
  if (s == "split") return BenchmarkKind::split;
  throw ConfigError("data.benchmark must be permuted, rotated or split (got '" + s + "')");
}

std::vector<TaskSpec> make_task_sequence(BenchmarkKind kind, const Dataset& base, const SequenceOptions& opts,
                                         std::uint64_t seed) {
  if (opts.num_tasks < 1) throw ConfigError("task sequence needs at least one task");
  auto rng = stream_rng(seed, stream::tasks);
  const std::size_t m = base.images.cols();
  std::vector<TaskSpec> out(opts.num_tasks);
  for (std::size_t t = 0; t < opts.num_tasks; ++t) {
    out[t].id = TaskId(t);
    out[t].kind = kind;
    out[t].train_count = opts.train_count;
    out[t].test_count = opts.test_count;
    out[t].num_classes = base.num_classes;
  }
  switch (kind) {
    case BenchmarkKind::permuted:
      for (std::size_t t = 0; t < opts.num_tasks; ++t) {
        out[t].permutation.resize(m);
        std::iota(out[t].permutation.begin(), out[t].permutation.end(), std::size_t{0});
        if (t > 0) std::shuffle(out[t].permutation.begin(), out[t].permutation.end(), rng);
      }
      break;
    case BenchmarkKind::rotated: {
      std::vector<double> angles(opts.num_tasks);
      for (std::size_t t = 0; t < opts.num_tasks; ++t) angles[t] = 180.0 * double(t) / double(opts.num_tasks);
      std::shuffle(angles.begin(), angles.end(), rng);
      for (std::size_t t = 0; t < opts.num_tasks; ++t) out[t].angle_degrees = angles[t];
      break;
    }
    case BenchmarkKind::split: {
      std::vector<int> classes(base.num_classes);
      std::iota(classes.begin(), classes.end(), 0);
      std::shuffle(classes.begin(), classes.end(), rng);
      std::size_t used = classes.size();
      if (opts.classes_per_task > 0) {
        used = opts.classes_per_task * opts.num_tasks;
        if (used > classes.size())
          throw ConfigError("split: " + std::to_string(opts.num_tasks) + " tasks x " +
                            std::to_string(opts.classes_per_task) + " classes exceeds the " +
                            std::to_string(classes.size()) + " available");
      } else if (classes.size() < opts.num_tasks) {
        throw ConfigError("split: fewer classes than tasks");
      }
      for (std::size_t j = 0; j < used; ++j) out[j % opts.num_tasks].classes.push_back(classes[j]);
      std::size_t head = 0;
      for (auto& t : out) {
        std::sort(t.classes.begin(), t.classes.end());
        head = std::max(head, t.classes.size());
      }
      for (auto& t : out) t.num_classes = head;
      break;
    }
  }
  return out;
}

DenseMatrix rotate_images(const DenseMatrix& images, Shape3 shape, double degrees) {
  if (images.cols() != shape.size()) throw ShapeError("rotate_images: row length does not match shape");
  if (degrees == 0.0) return images;
  const double th = degrees * std::acos(-1.0) / 180.0;
  const double c = std::cos(th);
  const double s = std::sin(th);
  const double cy = (double(shape.height) - 1.0) / 2.0;
  const double cx = (double(shape.width) - 1.0) / 2.0;
  const std::size_t h = shape.height;
  const std::size_t w = shape.width;
  DenseMatrix out(images.rows(), images.cols());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // inverse map: rotate the output coordinate back into the source frame
      const double dy = double(y) - cy;
      const double dx = double(x) - cx;
      const double sy = c * dy - s * dx + cy;
      const double sx = s * dy + c * dx + cx;
      const double fy = std::floor(sy);
      const double fx = std::floor(sx);
      const double ty = sy - fy;
      const double tx = sx - fx;
      const long y0 = long(fy);
      const long x0 = long(fx);
      struct Tap {
        long y, x;
        double wgt;
      };
      const Tap taps[4] = {{y0, x0, (1 - ty) * (1 - tx)},
                           {y0, x0 + 1, (1 - ty) * tx},
                           {y0 + 1, x0, ty * (1 - tx)},
                           {y0 + 1, x0 + 1, ty * tx}};
      for (std::size_t i = 0; i < images.rows(); ++i) {
        const auto src = images.row(i);
        auto dst = out.row(i);
        for (std::size_t ch = 0; ch < shape.channels; ++ch) {
          double v = 0.0;
          for (const auto& tap : taps) {
            if (tap.wgt == 0.0 || tap.y < 0 || tap.x < 0 || tap.y >= long(h) || tap.x >= long(w)) continue;
            v += tap.wgt * src[ch * h * w + std::size_t(tap.y) * w + std::size_t(tap.x)];
          }
          dst[ch * h * w + y * w + x] = v;
        }
      }
    }
  return out;
}

namespace {

void apply_transform(const TaskSpec& spec, Shape3 shape, DenseMatrix& x, Labels& y) {
  switch (spec.kind) {
    case BenchmarkKind::permuted: {
      if (spec.permutation.size() != x.cols()) throw ShapeError("task permutation does not match input size");
      DenseMatrix p(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) p(i, j) = x(i, spec.permutation[j]);
      x = std::move(p);
      break;
    }
    case BenchmarkKind::rotated:
      x = rotate_images(x, shape, spec.angle_degrees);
      break;
    case BenchmarkKind::split:
      for (int& label : y) {
        const auto it = std::find(spec.classes.begin(), spec.classes.end(), label);
        label = int(it - spec.classes.begin());
      }
      break;
  }
}

Dataset task_subset(const TaskSpec& spec, const Dataset& d, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (spec.kind != BenchmarkKind::split ||
        std::find(spec.classes.begin(), spec.classes.end(), d.labels[i]) != spec.classes.end())
      candidates.push_back(i);
  const auto pick = draw_memory_indices(candidates.size(), count, rng);
  std::vector<std::size_t> rows(pick.size());
  for (std::size_t i = 0; i < pick.size(); ++i) rows[i] = candidates[pick[i]];
  return select_rows(d, rows);
}

}  // namespace

TaskData materialize_task(const TaskSpec& spec, const DatasetPair& base, std::uint64_t seed) {
  auto rng = stream_rng(seed, stream::task_data, std::uint64_t(spec.id));
  Dataset train = task_subset(spec, base.train, spec.train_count, rng);
  Dataset test = task_subset(spec, base.test, spec.test_count, rng);
  TaskData out;
  out.train_x = std::move(train.images);
  out.train_y = std::move(train.labels);
  out.test_x = std::move(test.images);
  out.test_y = std::move(test.labels);
  apply_transform(spec, base.train.shape, out.train_x, out.train_y);
  apply_transform(spec, base.test.shape, out.test_x, out.test_y);
  return out;
}

}  // namespace dgp
