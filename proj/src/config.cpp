#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "dgp/harness.hpp"

namespace dgp {

namespace {

const std::vector<std::string>& schema() {
  static const std::vector<std::string> keys = {
      "name",
      "data.benchmark",
      "data.dir",
      "data.synthetic",
      "data.synthetic_train",
      "data.synthetic_test",
      "data.tasks",
      "data.train_per_task",
      "data.test_per_task",
      "data.classes_per_task",
      "data.eval_cap",
      "data.downscale",
      "network.arch",
      "network.hidden",
      "network.conv_channels",
      "network.kernel",
      "network.batch_norm",
      "network.shared_head",
      "train.lr",
      "train.batch_size",
      "train.epochs",
      "defense.kind",
      "defense.lambda",
      "defense.squared_norm",
      "defense.at_mix",
      "defense.at_epsilon",
      "attacks",
      "memory.mode",
      "memory.alpha1",
      "memory.alpha1_task_step",
      "memory.alpha2",
      "memory.alpha3",
      "memory.memory_size",
      "memory.headroom",
      "similarity.enabled",
      "similarity.samples",
      "seeds",
      "output.dir",
      "output.overwrite",
  };
  return keys;
}

bool is_section(const std::string& key) {
  const auto& keys = schema();
  return std::any_of(keys.begin(), keys.end(), [&](const std::string& k) { return k.rfind(key + ".", 0) == 0; });
}

bool is_leaf(const std::string& key) {
  const auto& keys = schema();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

std::string where(const std::string& source, const YAML::Node& n) {
  const auto m = n.Mark();
  if (m.line < 0) return source;
  return source + ":" + std::to_string(m.line + 1);
}

void check_keys(const YAML::Node& node, const std::string& prefix, const std::string& source) {
  if (!node.IsMap()) throw ConfigError(where(source, node) + ": expected a mapping" + (prefix.empty() ? "" : " for '" + prefix + "'"));
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    if (is_leaf(full)) continue;
    if (is_section(full)) {
      check_keys(kv.second, full, source);
      continue;
    }
    throw ConfigError(where(source, kv.first) + ": unknown key '" + full + "'");
  }
}

std::vector<std::string> split_dots(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  if (!is_leaf(key)) throw ConfigError("unknown key '" + key + "' in override");
  YAML::Node parsed;
  try {
    parsed = YAML::Load(value);
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + key + "': cannot parse value '" + value + "': " + e.msg);
  }
  const auto parts = split_dots(key);
  YAML::Node cur = root;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    YAML::Node next = cur[parts[i]];
    if (!next.IsDefined() || next.IsNull()) {
      cur[parts[i]] = YAML::Node(YAML::NodeType::Map);
      next = cur[parts[i]];
    }
    cur.reset(next);
  }
  cur[parts.back()] = parsed;
}

class Reader {
 public:
  Reader(const YAML::Node& root, std::string source) : root_(root), source_(std::move(source)) {}

  template <class T>
  void get(const std::string& key, T& out) const {
    const YAML::Node n = lookup(key);
    if (!n.IsDefined() || n.IsNull()) return;
    try {
      out = n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(source_, n) + ": key '" + key + "' has a value of the wrong type");
    }
  }

  /// Scalar or sequence.
  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) const {
    const YAML::Node n = lookup(key);
    if (!n.IsDefined() || n.IsNull()) return;
    try {
      if (n.IsSequence())
        out = n.as<std::vector<T>>();
      else
        out = {n.as<T>()};
    } catch (const YAML::Exception&) {
      throw ConfigError(where(source_, n) + ": key '" + key + "' has a value of the wrong type");
    }
  }

  [[nodiscard]] YAML::Node lookup(const std::string& key) const {
    YAML::Node cur = root_;
    for (const auto& part : split_dots(key)) {
      if (!cur.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
      YAML::Node next = cur[part];
      if (!next.IsDefined()) return next;
      cur.reset(next);
    }
    return cur;
  }

  [[nodiscard]] std::string at(const std::string& key) const {
    const YAML::Node n = lookup(key);
    return n.IsDefined() ? where(source_, n) : source_;
  }

 private:
  YAML::Node root_;
  std::string source_;
};

template <class F>
auto keyed(const Reader& r, const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(r.at(key) + ": " + e.what());
  }
}

}  // namespace

std::vector<std::string> config_keys() { return schema(); }

ExperimentConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides,
                              const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  check_keys(root, "", source);
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig c;
  const Reader r(root, source);
  r.get("name", c.name);

  std::string s = benchmark_name(c.data.benchmark);
  r.get("data.benchmark", s);
  c.data.benchmark = keyed(r, "data.benchmark", [&] { return parse_benchmark(s); });
  r.get("data.dir", c.data.dir);
  r.get("data.synthetic", c.data.synthetic);
  r.get("data.synthetic_train", c.data.synthetic_train);
  r.get("data.synthetic_test", c.data.synthetic_test);
  r.get("data.tasks", c.data.tasks);
  r.get("data.train_per_task", c.data.train_per_task);
  r.get("data.test_per_task", c.data.test_per_task);
  r.get("data.classes_per_task", c.data.classes_per_task);
  r.get("data.eval_cap", c.data.eval_cap);
  r.get("data.downscale", c.data.downscale);

  s = c.network.arch == Architecture::mlp ? "mlp" : "conv";
  r.get("network.arch", s);
  if (s == "mlp")
    c.network.arch = Architecture::mlp;
  else if (s == "conv")
    c.network.arch = Architecture::conv;
  else
    throw ConfigError(r.at("network.arch") + ": network.arch must be mlp or conv (got '" + s + "')");
  r.get_list("network.hidden", c.network.hidden);
  r.get_list("network.conv_channels", c.network.conv_channels);
  r.get("network.kernel", c.network.kernel);
  r.get("network.batch_norm", c.network.batch_norm);
  r.get("network.shared_head", c.network.shared_head);

  r.get("train.lr", c.train.lr);
  r.get("train.batch_size", c.train.batch_size);
  r.get("train.epochs", c.train.epochs);

  s = "none";
  r.get("defense.kind", s);
  if (s == "none")
    c.defense.kind = DefenseKind::none;
  else if (s == "igr")
    c.defense.kind = DefenseKind::igr;
  else if (s == "at")
    c.defense.kind = DefenseKind::at;
  else
    throw ConfigError(r.at("defense.kind") + ": defense.kind must be none, igr or at (got '" + s + "')");
  r.get("defense.lambda", c.defense.lambda);
  r.get("defense.squared_norm", c.defense.squared_norm);
  r.get("defense.at_mix", c.defense.at_mix);
  r.get("defense.at_epsilon", c.defense.at_epsilon);

  r.get_list("attacks", c.attacks);

  s = memory_mode_name(c.memory.mode);
  r.get("memory.mode", s);
  c.memory.mode = keyed(r, "memory.mode", [&] { return parse_memory_mode(s); });
  r.get_list("memory.alpha1", c.memory.alpha1);
  r.get("memory.alpha1_task_step", c.memory.alpha1_task_step);
  r.get("memory.alpha2", c.memory.alpha2);
  r.get("memory.alpha3", c.memory.alpha3);
  r.get("memory.memory_size", c.memory.memory_size);
  r.get("memory.headroom", c.memory.headroom);

  r.get("similarity.enabled", c.similarity);
  r.get("similarity.samples", c.similarity_samples);
  r.get_list("seeds", c.seeds);
  r.get("output.dir", c.out_dir);
  r.get("output.overwrite", c.overwrite);

  keyed(r, "", [&] {
    c.validate();
    return 0;
  });
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), overrides, path.string());
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (data.tasks < 1) throw ConfigError("data.tasks must be >= 1");
  if (data.train_per_task < 1 || data.test_per_task < 1) throw ConfigError("data.*_per_task must be >= 1");
  if (data.downscale < 0 || data.downscale > 4) throw ConfigError("data.downscale must lie in [0, 4]");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (network.arch == Architecture::conv && network.conv_channels.empty())
    throw ConfigError("network.conv_channels needs at least one entry for conv networks");
  if (network.arch == Architecture::mlp && network.hidden.empty())
    throw ConfigError("network.hidden needs at least one entry for mlp networks");
  if (network.kernel < 1 || network.kernel % 2 == 0) throw ConfigError("network.kernel must be odd");
  for (auto h : network.hidden)
    if (h < 1) throw ConfigError("network.hidden entries must be >= 1");
  for (auto h : network.conv_channels)
    if (h < 1) throw ConfigError("network.conv_channels entries must be >= 1");
  defense.validate();
  memory.validate();
  for (const auto& a : attacks) (void)attack_preset(a);
}

std::string dump_config(const ExperimentConfig& c) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << c.name;
  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "benchmark" << YAML::Value << benchmark_name(c.data.benchmark);
  e << YAML::Key << "dir" << YAML::Value << c.data.dir;
  e << YAML::Key << "synthetic" << YAML::Value << c.data.synthetic;
  e << YAML::Key << "synthetic_train" << YAML::Value << c.data.synthetic_train;
  e << YAML::Key << "synthetic_test" << YAML::Value << c.data.synthetic_test;
  e << YAML::Key << "tasks" << YAML::Value << c.data.tasks;
  e << YAML::Key << "train_per_task" << YAML::Value << c.data.train_per_task;
  e << YAML::Key << "test_per_task" << YAML::Value << c.data.test_per_task;
  e << YAML::Key << "classes_per_task" << YAML::Value << c.data.classes_per_task;
  e << YAML::Key << "eval_cap" << YAML::Value << c.data.eval_cap;
  e << YAML::Key << "downscale" << YAML::Value << c.data.downscale;
  e << YAML::EndMap;
  e << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "arch" << YAML::Value << (c.network.arch == Architecture::mlp ? "mlp" : "conv");
  e << YAML::Key << "hidden" << YAML::Value << YAML::Flow << c.network.hidden;
  e << YAML::Key << "conv_channels" << YAML::Value << YAML::Flow << c.network.conv_channels;
  e << YAML::Key << "kernel" << YAML::Value << c.network.kernel;
  e << YAML::Key << "batch_norm" << YAML::Value << c.network.batch_norm;
  e << YAML::Key << "shared_head" << YAML::Value << c.network.shared_head;
  e << YAML::EndMap;
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "lr" << YAML::Value << c.train.lr;
  e << YAML::Key << "batch_size" << YAML::Value << c.train.batch_size;
  e << YAML::Key << "epochs" << YAML::Value << c.train.epochs;
  e << YAML::EndMap;
  const char* kind = c.defense.kind == DefenseKind::igr ? "igr" : c.defense.kind == DefenseKind::at ? "at" : "none";
  e << YAML::Key << "defense" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << kind;
  e << YAML::Key << "lambda" << YAML::Value << c.defense.lambda;
  e << YAML::Key << "squared_norm" << YAML::Value << c.defense.squared_norm;
  e << YAML::Key << "at_mix" << YAML::Value << c.defense.at_mix;
  e << YAML::Key << "at_epsilon" << YAML::Value << c.defense.at_epsilon;
  e << YAML::EndMap;
  e << YAML::Key << "attacks" << YAML::Value << YAML::Flow << c.attacks;
  e << YAML::Key << "memory" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "mode" << YAML::Value << memory_mode_name(c.memory.mode);
  e << YAML::Key << "alpha1" << YAML::Value << YAML::Flow << c.memory.alpha1;
  e << YAML::Key << "alpha1_task_step" << YAML::Value << c.memory.alpha1_task_step;
  e << YAML::Key << "alpha2" << YAML::Value << c.memory.alpha2;
  e << YAML::Key << "alpha3" << YAML::Value << c.memory.alpha3;
  e << YAML::Key << "memory_size" << YAML::Value << c.memory.memory_size;
  e << YAML::Key << "headroom" << YAML::Value << c.memory.headroom;
  e << YAML::EndMap;
  e << YAML::Key << "similarity" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "enabled" << YAML::Value << c.similarity;
  e << YAML::Key << "samples" << YAML::Value << c.similarity_samples;
  e << YAML::EndMap;
  e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
  e << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "dir" << YAML::Value << c.out_dir;
  e << YAML::Key << "overwrite" << YAML::Value << c.overwrite;
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

Shape3 input_shape(const DataConfig& cfg, Shape3 base) {
  for (int i = 0; i < cfg.downscale; ++i) {
    base.height /= 2;
    base.width /= 2;
  }
  return base;
}

Network build_network(const NetworkConfig& cfg, Shape3 input, std::size_t num_classes) {
  std::vector<LayerSpec> layers;
  std::size_t features = input.size();
  if (cfg.arch == Architecture::conv) {
    Shape3 shape = input;
    for (std::size_t ch : cfg.conv_channels) {
      layers.push_back(
          LayerSpec::conv(shape, ch, cfg.kernel, 1, cfg.kernel / 2, cfg.batch_norm, Pooling::avg2x2, Activation::relu));
      shape = layers.back().out_shape();
    }
    features = shape.size();
  }
  for (std::size_t h : cfg.hidden) {
    layers.push_back(LayerSpec::linear(features, h, Activation::relu));
    features = h;
  }
  layers.push_back(LayerSpec::linear(features, num_classes, Activation::none));
  return Network(std::move(layers), cfg.shared_head);
}

std::filesystem::path resolve_data_dir(const std::string& dir) {
  const std::filesystem::path p(dir);
  if (std::filesystem::is_directory(p)) return p;
  if (const char* env = std::getenv("DGP_DATA_DIR"); env && *env) {
    const std::filesystem::path root(env);
    if (p.is_relative() && std::filesystem::is_directory(root / p)) return root / p;
    if (std::filesystem::is_directory(root / p.filename())) return root / p.filename();
    if (std::filesystem::is_directory(root)) return root;
  }
  throw std::runtime_error("dataset directory not found: " + p.string() +
                           " (set DGP_DATA_DIR or use --synthetic for generated data)");
}

DatasetPair load_experiment_data(const DataConfig& cfg, std::uint64_t seed) {
  DatasetPair d;
  if (cfg.synthetic) {
    d.train = synthetic_dataset(cfg.synthetic_train, {1, 28, 28}, 10, seed, 0);
    d.test = synthetic_dataset(cfg.synthetic_test, {1, 28, 28}, 10, seed, 1);
  } else {
    d = load_mnist_dir(resolve_data_dir(cfg.dir));
  }
  if (cfg.downscale > 0) {
    d.train = downscale(d.train, cfg.downscale);
    d.test = downscale(d.test, cfg.downscale);
  }
  return d;
}

}  // namespace dgp
