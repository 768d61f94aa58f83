// Command-line entry point: run, eval, attack, report, inspect-pool.

#include <fmt/format.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "dgp/harness.hpp"
#include "dgp/streams.hpp"

namespace {

enum Exit { ok = 0, usage = 1, failure = 2 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool synthetic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (YAML)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config key, e.g. memory.mode=none (repeatable)");
  cmd->add_flag("--synthetic", c.synthetic, "use generated data instead of IDX files");
}

dgp::ExperimentConfig load(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> o = c.overrides;
  if (c.synthetic) o.push_back("data.synthetic=true");
  o.insert(o.end(), extra.begin(), extra.end());
  return dgp::load_config(c.config, o);
}

std::string describe(const dgp::LayerSpec& s) {
  if (s.kind == dgp::LayerKind::linear) return fmt::format("linear {}->{}", s.in_features, s.out_features);
  return fmt::format("conv {}x{}x{} -> {}ch k{}{}{}", s.in_shape.channels, s.in_shape.height, s.in_shape.width,
                     s.out_channels, s.kernel, s.has_bn ? " bn" : "", s.pool == dgp::Pooling::avg2x2 ? " pool" : "");
}

std::string describe(const std::vector<dgp::LayerSpec>& layers) {
  std::string out;
  for (const auto& l : layers) out += (out.empty() ? "" : ", ") + describe(l);
  return "[" + out + "]";
}

void check_matches(const dgp::Network& loaded, const dgp::Network& expected, const std::string& path) {
  if (loaded.layers() != expected.layers())
    throw dgp::ConfigError("checkpoint " + path + " has layers " + describe(loaded.layers()) +
                           " but the config builds " + describe(expected.layers()));
  if (loaded.shared_head() != expected.shared_head())
    throw dgp::ConfigError(fmt::format("checkpoint {} has a {} head but the config asks for a {} one", path,
                                       loaded.shared_head() ? "shared" : "per-task",
                                       expected.shared_head() ? "shared" : "per-task"));
}

struct Setup {
  dgp::ExperimentConfig cfg;
  dgp::DatasetPair data;
  std::vector<dgp::TaskSpec> specs;
  dgp::Network net;
};

Setup prepare(const Common& c, const std::string& checkpoint, std::optional<std::uint64_t> seed) {
  Setup s;
  s.cfg = load(c);
  const std::uint64_t sd = seed.value_or(s.cfg.seeds.front());
  s.data = dgp::load_experiment_data(s.cfg.data, 20240101);
  dgp::SequenceOptions opts;
  opts.num_tasks = s.cfg.data.tasks;
  opts.train_count = s.cfg.data.train_per_task;
  opts.test_count = s.cfg.data.test_per_task;
  opts.classes_per_task = s.cfg.data.classes_per_task;
  s.specs = dgp::make_task_sequence(s.cfg.data.benchmark, s.data.train, opts, sd);
  s.net = dgp::load_network(checkpoint);
  check_matches(s.net, dgp::build_network(s.cfg.network, s.data.train.shape, s.specs.front().num_classes), checkpoint);
  return s;
}

int cmd_run(const Common& c, const std::string& out, const std::string& seeds, bool overwrite, bool quiet) {
  std::vector<std::string> extra;
  if (!out.empty()) extra.push_back("output.dir=" + out);
  if (!seeds.empty()) extra.push_back("seeds=[" + seeds + "]");
  if (overwrite) extra.push_back("output.overwrite=true");
  const auto cfg = load(c, extra);
  dgp::ProgressFn progress;
  if (!quiet) progress = [](const std::string& line) { std::cout << line << std::endl; };
  const auto res = dgp::run_experiment(cfg, progress);
  for (const auto& a : res.attacks) {
    if (res.succeeded() == 0) break;
    const auto [acc, acc_sd] = res.final_stat(a, false);
    const auto [bwt, bwt_sd] = res.final_stat(a, true);
    std::cout << fmt::format("final {:<18} ACC {:.4f} ± {:.4f}", a, acc, acc_sd);
    if (cfg.data.tasks > 1) std::cout << fmt::format("  BWT {:.4f} ± {:.4f}", bwt, bwt_sd);
    std::cout << "\n";
  }
  std::cout << "results written to " << cfg.out_dir << "\n";
  if (res.succeeded() < res.seeds.size()) {
    std::cerr << res.seeds.size() - res.succeeded() << " seed(s) failed; see metadata.yaml\n";
    return failure;
  }
  return ok;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::optional<std::uint64_t> seed) {
  Setup s = prepare(c, checkpoint, seed);
  const std::uint64_t sd = seed.value_or(s.cfg.seeds.front());
  std::cout << fmt::format("{:<6} {:>8}", "task", "clean");
  for (const auto& a : s.cfg.attacks) std::cout << fmt::format(" {:>18}", a);
  std::cout << "\n";
  for (const auto& spec : s.specs) {
    if (!s.net.has_task(spec.id)) continue;
    const auto td = dgp::materialize_task(spec, s.data, sd);
    std::cout << fmt::format("{:<6} {:>8.4f}", spec.id + 1, dgp::accuracy(s.net, spec.id, td.test_x, td.test_y));
    for (std::size_t a = 0; a < s.cfg.attacks.size(); ++a) {
      auto rng = dgp::stream_rng(sd, dgp::stream::attack, std::uint64_t(spec.id) * 64 + a);
      const auto attack = dgp::attack_preset(s.cfg.attacks[a]);
      std::cout << fmt::format(" {:>18.4f}", dgp::adversarial_accuracy(s.net, spec.id, td.test_x, td.test_y, attack,
                                                                       s.cfg.data.eval_cap, rng));
    }
    std::cout << "\n";
  }
  return ok;
}

int cmd_attack(const Common& c, const std::string& checkpoint, const std::string& pool_path, const std::string& preset,
               int task, std::optional<std::uint64_t> seed) {
  const auto attack = dgp::attack_preset(preset);
  Setup s = prepare(c, checkpoint, seed);
  if (!pool_path.empty()) {
    const auto pool = dgp::load_pool(pool_path);
    for (const auto& p : pool.layers())
      if (p.layer >= s.net.depth() || s.net.layers()[p.layer].weight_rows() != p.dim())
        throw dgp::ConfigError(fmt::format("pool {} layer {} has dimension {} which does not match checkpoint {}",
                                           pool_path, p.layer, p.dim(), describe(s.net.layers())));
  }
  if (task < 1 || std::size_t(task) > s.specs.size()) throw dgp::ConfigError(fmt::format("--task must lie in [1, {}]", s.specs.size()));
  const auto& spec = s.specs[std::size_t(task - 1)];
  if (!s.net.has_task(spec.id)) throw dgp::ConfigError(fmt::format("checkpoint has no parameters for task {}", task));
  const std::uint64_t sd = seed.value_or(s.cfg.seeds.front());
  const auto td = dgp::materialize_task(spec, s.data, sd);
  const std::size_t cap = std::min(s.cfg.data.eval_cap, td.test_x.rows());
  const dgp::DenseMatrix x = td.test_x.row_block(0, cap);
  const std::span<const int> y(td.test_y.data(), cap);
  auto rng = dgp::stream_rng(sd, dgp::stream::attack, std::uint64_t(spec.id));
  const double clean = dgp::accuracy(s.net, spec.id, x, y);
  const double adv = dgp::adversarial_accuracy(s.net, spec.id, x, y, attack, cap, rng);
  std::cout << fmt::format("task {} samples {}\nclean accuracy       {:.4f}\n{:<20} {:.4f}\n", task, cap, clean,
                           preset + " accuracy", adv);
  return ok;
}

int cmd_report(const std::string& archive, std::string out) {
  const auto rep = dgp::build_report(archive);
  if (out.empty()) out = (std::filesystem::path(archive) / "report").string();
  std::filesystem::create_directories(out);
  const std::filesystem::path o(out);
  dgp::write_text_atomic(o / "table.txt", rep.table_text);
  dgp::write_text_atomic(o / "table.csv", rep.table_csv);
  dgp::write_text_atomic(o / "acc_series.csv", rep.acc_series);
  dgp::write_text_atomic(o / "sim_series.csv", rep.sim_series);
  std::cout << rep.table_text << "report written to " << out << "\n";
  return ok;
}

int cmd_inspect_pool(const std::string& path) {
  const auto pool = dgp::load_pool(path);
  std::cout << fmt::format("{:<6} {:>6} {:>6} {:>11} {:>9} {:>11} {:>9} {:>10}\n", "layer", "dim", "count", "activation",
                           "gradient", "compressed", "headroom", "residual");
  for (const auto& p : pool.layers())
    std::cout << fmt::format("{:<6} {:>6} {:>6} {:>11} {:>9} {:>11} {:>9} {:>10.2e}\n", p.layer, p.dim(), p.count(),
                             p.count_of(dgp::Provenance::activation), p.count_of(dgp::Provenance::gradient),
                             p.count_of(dgp::Provenance::compressed), p.dim() - p.count(), p.basis.residual());
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Double gradient projection continual-learning experiments"};
  app.require_subcommand(1);

  Common run_c, eval_c, attack_c;
  std::string out, seeds, checkpoint, attack_checkpoint, pool_path, preset, archive, report_out;
  bool overwrite = false, quiet = false;
  std::optional<std::uint64_t> seed;
  int task = 1;

  auto* run = app.add_subcommand("run", "train and evaluate every seed of an experiment");
  add_common(run, run_c);
  run->add_option("--out", out, "output directory (overrides output.dir)");
  run->add_option("--seeds", seeds, "comma-separated seeds (overrides seeds)");
  run->add_flag("--overwrite", overwrite, "replace results in an existing output directory");
  run->add_flag("--quiet", quiet, "suppress progress lines");

  auto* eval = app.add_subcommand("eval", "evaluate a saved network on every task it knows");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", checkpoint, "network checkpoint (.dgpw)")->required()->check(CLI::ExistingFile);
  eval->add_option("--seed", seed, "seed that generated the task sequence (default: first config seed)");

  auto* attack = app.add_subcommand("attack", "clean vs adversarial accuracy of a saved network");
  add_common(attack, attack_c);
  attack->add_option("--checkpoint", attack_checkpoint, "network checkpoint (.dgpw)")->required()->check(CLI::ExistingFile);
  attack->add_option("--pool", pool_path, "pool checkpoint (.dgpp) to validate against the network");
  attack->add_option("--preset", preset, "attack preset")->required();
  attack->add_option("--task", task, "task number, 1-based");
  attack->add_option("--seed", seed, "seed that generated the task sequence (default: first config seed)");

  auto* report = app.add_subcommand("report", "summary tables and plot-ready series from a result archive");
  report->add_option("archive", archive, "result directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "report directory (default: <archive>/report)");

  auto* inspect = app.add_subcommand("inspect-pool", "per-layer statistics of a pool checkpoint");
  inspect->add_option("pool", pool_path, "pool checkpoint (.dgpp)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*run) return cmd_run(run_c, out, seeds, overwrite, quiet);
    if (*eval) return cmd_eval(eval_c, checkpoint, seed);
    if (*attack) return cmd_attack(attack_c, attack_checkpoint, pool_path, preset, task, seed);
    if (*report) return cmd_report(archive, report_out);
    if (*inspect) return cmd_inspect_pool(pool_path);
  } catch (const dgp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return usage;
}
