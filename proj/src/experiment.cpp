#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "dgp/harness.hpp"
#include "dgp/streams.hpp"

namespace dgp {

namespace {

constexpr std::uint64_t kDataSeed = 20240101;
constexpr std::size_t kAttackChunk = 250;

void gather(const DenseMatrix& x, std::span<const int> y, std::span<const std::size_t> rows, DenseMatrix& bx,
            Labels& by) {
  bx = DenseMatrix(rows.size(), x.cols());
  by.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.row(rows[i]).begin(), x.cols(), bx.row(i).begin());
    by[i] = y[rows[i]];
  }
}

std::size_t argmax(std::span<const double> v) {
  return std::size_t(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<EpochLog> train_task(Network& net, const BasisPool& pool, std::size_t task_index, TaskId task,
                                 const TaskData& data, const ExperimentConfig& cfg, std::mt19937_64& rng,
                                 const ProgressFn& progress) {
  const std::size_t n = data.train_x.rows();
  const bool project = task_index > 0 && cfg.memory.mode != MemoryMode::none;
  const double lambda = cfg.defense.kind == DefenseKind::igr ? cfg.defense.lambda : 0.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochLog> log;
  DenseMatrix bx;
  Labels by;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double reg_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.train.batch_size) {
      const std::size_t count = std::min(cfg.train.batch_size, n - start);
      gather(data.train_x, data.train_y, std::span(order).subspan(start, count), bx, by);
      if (cfg.defense.kind == DefenseKind::at) bx = adversarial_training_batch(net, task, bx, by, cfg.defense, rng);
      const ForwardTrace trace = forward_train(net, task, bx);
      Objective obj = igr_objective(net, trace, by, lambda, cfg.defense.squared_norm);
      if (!std::isfinite(obj.total))
        throw NumericalError(fmt::format("training diverged on task {} epoch {} batch {} (loss {}); lower train.lr",
                                         task + 1, epoch + 1, batches + 1, obj.total));
      if (project) project_weight_gradients(obj.grads, pool);
      net.apply_update(task, obj.grads, cfg.train.lr);
      loss_sum += obj.total;
      reg_sum += obj.regularizer;
      ++batches;
    }
    EpochLog e{task, epoch + 1, batches ? loss_sum / double(batches) : 0.0, batches ? reg_sum / double(batches) : 0.0};
    log.push_back(e);
    if (progress)
      progress(fmt::format("task {} epoch {}/{} loss {:.4f} penalty {:.4f}", task + 1, e.epoch, cfg.train.epochs, e.loss,
                           e.regularizer));
  }
  return log;
}

double accuracy(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels) {
  if (x.rows() == 0) return 0.0;
  const DenseMatrix logits = forward(net, task, x).logits;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) correct += argmax(logits.row(i)) == std::size_t(labels[i]) ? 1 : 0;
  return double(correct) / double(x.rows());
}

double adversarial_accuracy(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                            const AttackConfig& attack, std::size_t cap, std::mt19937_64& rng) {
  const std::size_t n = std::min(cap, x.rows());
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += kAttackChunk) {
    const std::size_t count = std::min(kAttackChunk, n - start);
    const DenseMatrix bx = x.row_block(start, count);
    const auto by = labels.subspan(start, count);
    const DenseMatrix adv = run_attack(net, task, bx, by, attack, rng);
    const DenseMatrix logits = forward(net, task, adv).logits;
    for (std::size_t i = 0; i < count; ++i) correct += argmax(logits.row(i)) == std::size_t(by[i]) ? 1 : 0;
  }
  return double(correct) / double(n);
}

void AccuracyMatrix::set(std::size_t after, std::size_t task, double v) {
  if (after < 1 || task < 1 || task > after || after > tasks) throw std::out_of_range("AccuracyMatrix::set");
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("accuracy outside [0, 1]");
  r[after - 1][task - 1] = v;
}

double AccuracyMatrix::at(std::size_t after, std::size_t task) const {
  if (after < 1 || task < 1 || task > after || after > tasks) throw std::out_of_range("AccuracyMatrix::at");
  const auto& v = r[after - 1][task - 1];
  if (!v) throw std::logic_error(fmt::format("accuracy R[{},{}] not recorded", after, task));
  return *v;
}

AccBwt acc_bwt(const AccuracyMatrix& r, std::size_t upto) {
  if (upto < 1 || upto > r.tasks) throw std::out_of_range("acc_bwt: checkpoint outside the matrix");
  AccBwt out;
  for (std::size_t t = 1; t <= upto; ++t) out.acc += r.at(upto, t);
  out.acc /= double(upto);
  if (upto >= 2) {
    double b = 0.0;
    for (std::size_t t = 1; t < upto; ++t) b += r.at(upto, t) - r.at(t, t);
    out.bwt = b / double(upto - 1);
  }
  return out;
}

std::optional<double> gradient_similarity(const DenseMatrix& reference, const DenseMatrix& current) {
  if (reference.size() != current.size()) throw ShapeError("gradient_similarity: size mismatch");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double a = reference.values()[i];
    const double b = current.values()[i];
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

DenseMatrix output_weak_gradients(const Network& net, TaskId task, const DenseMatrix& samples) {
  return weak_gradients(net, forward(net, task, samples)).back();
}

std::size_t ExperimentResult::succeeded() const {
  return std::size_t(std::count_if(seeds.begin(), seeds.end(), [](const SeedResult& s) { return s.ok; }));
}

std::pair<double, double> ExperimentResult::final_stat(const std::string& attack, bool bwt) const {
  std::vector<double> v;
  for (const auto& s : seeds) {
    if (!s.ok) continue;
    const auto it = s.matrices.find(attack);
    if (it == s.matrices.end()) throw std::out_of_range("no results for attack " + attack);
    const AccBwt ab = acc_bwt(it->second, it->second.tasks);
    if (bwt && !ab.bwt) continue;
    v.push_back(bwt ? *ab.bwt : ab.acc);
  }
  if (v.empty()) return {std::nan(""), std::nan("")};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0};
}

SeedResult run_seed(const ExperimentConfig& cfg, const DatasetPair& data, std::uint64_t seed,
                    const ProgressFn& progress, Network* final_net, BasisPool* final_pool) {
  cfg.validate();
  SeedResult res;
  res.seed = seed;
  SequenceOptions opts;
  opts.num_tasks = cfg.data.tasks;
  opts.train_count = cfg.data.train_per_task;
  opts.test_count = cfg.data.test_per_task;
  opts.classes_per_task = cfg.data.classes_per_task;
  const auto specs = make_task_sequence(cfg.data.benchmark, data.train, opts, seed);
  const std::size_t T = specs.size();

  std::vector<AttackConfig> attacks;
  for (const auto& a : cfg.attacks) attacks.push_back(attack_preset(a));
  res.matrices.emplace("clean", AccuracyMatrix(T));
  for (const auto& a : attacks) res.matrices.emplace(a.name, AccuracyMatrix(T));

  Network net = build_network(cfg.network, data.train.shape, specs.front().num_classes);
  BasisPool pool(net);
  auto init_rng = stream_rng(seed, stream::init);
  std::vector<TaskData> tasks;
  DenseMatrix probe;
  DenseMatrix reference;

  for (std::size_t i = 0; i < T; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const TaskId task = specs[i].id;
    tasks.push_back(materialize_task(specs[i], data, seed));
    net.add_task(task, init_rng);
    auto batch_rng = stream_rng(seed, stream::batches, i);
    train_task(net, pool, i, task, tasks.back(), cfg, batch_rng, progress);
    if (i == 0) net.freeze_shared_bn();

    for (std::size_t t = 0; t <= i; ++t) {
      const auto& td = tasks[t];
      const TaskId tid = specs[t].id;
      res.matrices.at("clean").set(i + 1, t + 1, accuracy(net, tid, td.test_x, td.test_y));
      for (std::size_t a = 0; a < attacks.size(); ++a) {
        auto arng = stream_rng(seed, stream::attack, (i * T + t) * 64 + a);
        res.matrices.at(attacks[a].name)
            .set(i + 1, t + 1, adversarial_accuracy(net, tid, td.test_x, td.test_y, attacks[a], cfg.data.eval_cap, arng));
      }
    }

    if (cfg.similarity) {
      const TaskId first = specs.front().id;
      if (i == 0) {
        auto srng = stream_rng(seed, stream::similarity);
        const std::size_t n = cfg.similarity_samples ? cfg.similarity_samples : cfg.memory.memory_size;
        const auto idx = draw_memory_indices(tasks[0].train_x.rows(), n, srng);
        Labels unused;
        gather(tasks[0].train_x, tasks[0].train_y, idx, probe, unused);
        reference = output_weak_gradients(net, first, probe);
      }
      res.similarity.push_back(gradient_similarity(reference, output_weak_gradients(net, first, probe)));
    }

    auto mrng = stream_rng(seed, stream::memory, i);
    res.pool_updates.push_back(end_of_task_update(pool, net, task, tasks.back().train_x, cfg.memory, mrng));
    res.pool_counts.push_back(pool.total_count());
    // training data of finished tasks is no longer needed
    tasks.back().train_x = DenseMatrix();
    tasks.back().train_y.clear();
    res.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    if (progress) {
      std::string line = fmt::format("seed {} task {}/{} clean {:.4f}", seed, i + 1, T,
                                     acc_bwt(res.matrices.at("clean"), i + 1).acc);
      for (const auto& a : attacks) line += fmt::format(" {} {:.4f}", a.name, acc_bwt(res.matrices.at(a.name), i + 1).acc);
      if (!res.similarity.empty() && res.similarity.back()) line += fmt::format(" sim {:.4f}", *res.similarity.back());
      line += fmt::format(" pool {} ({:.1f}s)", pool.total_count(), res.task_seconds.back());
      progress(line);
    }
  }
  res.ok = true;
  if (final_net) *final_net = std::move(net);
  if (final_pool) *final_pool = std::move(pool);
  return res;
}

// ---- persistence ----

void write_text_atomic(const std::filesystem::path& path, const std::string& text) { io::write_file_atomic(path, text); }

namespace {

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string(); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> result_attacks(const ExperimentConfig& cfg) {
  std::vector<std::string> a = {"clean"};
  a.insert(a.end(), cfg.attacks.begin(), cfg.attacks.end());
  return a;
}

std::vector<MetricRow> metric_rows(const SeedResult& s, const std::vector<std::string>& attacks) {
  std::vector<MetricRow> rows;
  const std::size_t T = s.matrices.at("clean").tasks;
  for (std::size_t after = 1; after <= T; ++after)
    for (std::size_t t = 1; t <= after; ++t)
      for (const auto& a : attacks) {
        const auto& v = s.matrices.at(a).r[after - 1][t - 1];
        if (v) rows.push_back({s.seed, after, t, a, *v});
      }
  return rows;
}

std::string summary_csv(const std::vector<SeedResult>& seeds, const std::vector<std::string>& attacks) {
  std::string out = "seed,T,attack,ACC,BWT,Sim\n";
  for (const auto& s : seeds) {
    if (!s.ok) continue;
    const std::size_t T = s.matrices.at("clean").tasks;
    for (std::size_t after = 1; after <= T; ++after)
      for (const auto& a : attacks) {
        const AccBwt ab = acc_bwt(s.matrices.at(a), after);
        const std::optional<double> sim = after <= s.similarity.size() ? s.similarity[after - 1] : std::nullopt;
        out += fmt::format("{},{},{},{:.6f},{},{}\n", s.seed, after, a, ab.acc, fmt_opt(ab.bwt), fmt_opt(sim));
      }
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0};
}

std::string aggregate_csv(const std::vector<SeedResult>& seeds, const std::vector<std::string>& attacks) {
  std::string out = "T,attack,metric,mean,std,seeds\n";
  std::size_t T = 0;
  for (const auto& s : seeds)
    if (s.ok) T = std::max(T, s.matrices.at("clean").tasks);
  for (std::size_t after = 1; after <= T; ++after)
    for (const auto& a : attacks) {
      std::vector<double> acc, bwt, sim;
      for (const auto& s : seeds) {
        if (!s.ok) continue;
        const AccBwt ab = acc_bwt(s.matrices.at(a), after);
        acc.push_back(ab.acc);
        if (ab.bwt) bwt.push_back(*ab.bwt);
        if (after <= s.similarity.size() && s.similarity[after - 1]) sim.push_back(*s.similarity[after - 1]);
      }
      auto emit = [&](const char* metric, const std::vector<double>& v) {
        if (v.empty()) return;
        const auto [m, sd] = mean_std(v);
        out += fmt::format("{},{},{},{:.6f},{:.6f},{}\n", after, a, metric, m, sd, v.size());
      };
      emit("ACC", acc);
      emit("BWT", bwt);
      if (a == "clean") emit("Sim", sim);
    }
  return out;
}

std::string timing_csv(const std::vector<SeedResult>& seeds) {
  std::string out = "seed,T,seconds,pool_vectors\n";
  for (const auto& s : seeds)
    for (std::size_t i = 0; i < s.task_seconds.size(); ++i)
      out += fmt::format("{},{},{:.3f},{}\n", s.seed, i + 1, s.task_seconds[i], s.pool_counts[i]);
  return out;
}

std::string metadata_yaml(const ExperimentConfig& cfg, const std::vector<SeedResult>& seeds) {
  std::string out;
  out += fmt::format("name: {}\n", cfg.name);
  out += fmt::format("adversarial_eval_samples_per_task: {}\n", cfg.data.eval_cap);
  out += fmt::format("similarity_probe_samples: {}\n",
                     cfg.similarity ? (cfg.similarity_samples ? cfg.similarity_samples : cfg.memory.memory_size) : 0);
  out += fmt::format("data: {}\n", cfg.data.synthetic ? "synthetic" : cfg.data.dir);
  out += "seeds:\n";
  for (const auto& s : seeds) {
    out += fmt::format("  - seed: {}\n    status: {}\n", s.seed, s.ok ? "ok" : "failed");
    if (!s.ok) {
      std::string e = s.error;
      std::replace(e.begin(), e.end(), '"', '\'');
      out += fmt::format("    error: \"{}\"\n", e);
    }
  }
  return out;
}

}  // namespace

std::string format_metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "seed,T,t,attack,accuracy\n";
  for (const auto& r : rows) out += fmt::format("{},{},{},{},{:.6f}\n", r.seed, r.after, r.task, r.attack, r.accuracy);
  return out;
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != "seed,T,t,attack,accuracy")
    throw FormatError("metrics.csv: unexpected header '" + line + "'");
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 5) throw FormatError(fmt::format("metrics.csv:{}: expected 5 columns", lineno));
    try {
      rows.push_back({std::stoull(c[0]), std::stoul(c[1]), std::stoul(c[2]), c[3], std::stod(c[4])});
    } catch (const std::exception&) {
      throw FormatError(fmt::format("metrics.csv:{}: malformed number", lineno));
    }
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const std::filesystem::path out(cfg.out_dir);
  if (std::filesystem::exists(out) && !std::filesystem::is_empty(out) && !cfg.overwrite)
    throw ConfigError("output directory " + out.string() + " already holds results; pass --overwrite to replace them");
  const DatasetPair data = load_experiment_data(cfg.data, kDataSeed);
  if (cfg.overwrite && std::filesystem::exists(out)) {
    for (const char* f : {"metrics.csv", "summary.csv", "aggregate.csv", "timing.csv", "metadata.yaml", "config.yaml"})
      std::filesystem::remove(out / f);
  }
  std::filesystem::create_directories(out);
  write_text_atomic(out / "config.yaml", dump_config(cfg));

  ExperimentResult result;
  result.attacks = result_attacks(cfg);
  std::vector<MetricRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    SeedResult s;
    Network net;
    BasisPool pool;
    try {
      s = run_seed(cfg, data, seed, progress, &net, &pool);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      s = SeedResult{};
      s.seed = seed;
      s.ok = false;
      s.error = e.what();
      if (progress) progress(fmt::format("seed {} failed: {}", seed, e.what()));
    }
    if (s.ok) {
      const auto dir = out / fmt::format("seed-{}", seed);
      std::filesystem::create_directories(dir);
      save_network(net, dir / "network.dgpw");
      save_pool(pool, dir / "pool.dgpp");
      const auto r = metric_rows(s, result.attacks);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    result.seeds.push_back(std::move(s));
    write_text_atomic(out / "metrics.csv", format_metrics_csv(rows));
    write_text_atomic(out / "summary.csv", summary_csv(result.seeds, result.attacks));
    write_text_atomic(out / "aggregate.csv", aggregate_csv(result.seeds, result.attacks));
    write_text_atomic(out / "timing.csv", timing_csv(result.seeds));
    write_text_atomic(out / "metadata.yaml", metadata_yaml(cfg, result.seeds));
  }
  return result;
}

// ---- reports ----

ReportFiles build_report(const std::filesystem::path& archive) {
  std::ifstream f(archive / "metrics.csv");
  if (!f) throw std::runtime_error("no metrics.csv in " + archive.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const auto rows = parse_metrics_csv(ss.str());
  if (rows.empty()) throw std::runtime_error("archive " + archive.string() + " holds no completed seed");

  std::vector<std::uint64_t> seeds;
  std::vector<std::string> attacks;
  std::map<std::uint64_t, std::size_t> tasks;
  for (const auto& r : rows) {
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
    tasks[r.seed] = std::max(tasks[r.seed], r.after);
  }
  std::map<std::pair<std::uint64_t, std::string>, AccuracyMatrix> m;
  for (auto s : seeds)
    for (const auto& a : attacks) m.emplace(std::make_pair(s, a), AccuracyMatrix(tasks[s]));
  for (const auto& r : rows) m.at({r.seed, r.attack}).set(r.after, r.task, r.accuracy);

  ReportFiles rep;
  rep.acc_series = "seed,T,attack,ACC\n";
  for (auto s : seeds)
    for (std::size_t T = 1; T <= tasks[s]; ++T)
      for (const auto& a : attacks)
        rep.acc_series += fmt::format("{},{},{},{:.6f}\n", s, T, a, acc_bwt(m.at({s, a}), T).acc);

  rep.table_csv = "attack,ACC_mean,ACC_std,BWT_mean,BWT_std,seeds\n";
  rep.table_text = fmt::format("{:<20} {:>19} {:>19} {:>6}\n", "attack", "ACC (mean ± std)", "BWT (mean ± std)", "seeds");
  for (const auto& a : attacks) {
    std::vector<double> acc, bwt;
    for (auto s : seeds) {
      const AccBwt ab = acc_bwt(m.at({s, a}), tasks[s]);
      acc.push_back(ab.acc);
      if (ab.bwt) bwt.push_back(*ab.bwt);
    }
    const auto [am, as] = mean_std(acc);
    std::string bcell = "absent";
    std::string bcsv = ",";
    if (!bwt.empty()) {
      const auto [bm, bs] = mean_std(bwt);
      bcell = fmt::format("{:.4f} ± {:.4f}", bm, bs);
      bcsv = fmt::format("{:.6f},{:.6f}", bm, bs);
    }
    rep.table_text += fmt::format("{:<20} {:>18} {:>18} {:>6}\n", a, fmt::format("{:.4f} ± {:.4f}", am, as), bcell,
                                  seeds.size());
    rep.table_csv += fmt::format("{},{:.6f},{:.6f},{},{}\n", a, am, as, bcsv, seeds.size());
  }

  rep.sim_series = "seed,T,Sim\n";
  if (std::ifstream sf(archive / "summary.csv"); sf) {
    std::string line;
    std::getline(sf, line);
    while (std::getline(sf, line)) {
      const auto c = split_csv(line);
      if (c.size() == 6 && c[2] == "clean") rep.sim_series += fmt::format("{},{},{}\n", c[0], c[1], c[5]);
    }
  }
  return rep;
}

}  // namespace dgp
