// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--work DIR]
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "dgp/harness.hpp"
#include "dgp/streams.hpp"
#include "test_util.hpp"

using namespace dgp;
using namespace dgp::testing;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDataSeed = 20240101;

struct Verdict {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

void log(const std::string& line) { std::cerr << "  " << line << '\n'; }

ExperimentConfig preset(const std::string& name) {
  auto cfg = load_config(fs::path(DGP_SOURCE_DIR) / "configs" / (name + ".yaml"));
  cfg.data.dir = (fs::path(DGP_SOURCE_DIR) / cfg.data.dir).string();
  return cfg;
}

double rel_change(const DenseMatrix& before, const DenseMatrix& after) {
  return frobenius_norm(after - before) / std::max(frobenius_norm(before), 1e-300);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

double dot(const DenseMatrix& a, const DenseMatrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

// ---- 1 ----

struct Stability {
  double logits = 0.0;
  double weak = 0.0;
};

Stability two_task_stability(const ExperimentConfig& base) {
  const std::uint64_t seed = base.seeds.front();
  const auto data = load_experiment_data(base.data, kDataSeed);

  auto one = base;
  one.data.tasks = 1;
  Network after1;
  run_seed(one, data, seed, {}, &after1);
  Network after2;
  const auto r2 = run_seed(base, data, seed, {}, &after2);
  if (!r2.ok) throw std::runtime_error(r2.error);

  SequenceOptions opts;
  opts.num_tasks = base.data.tasks;
  opts.train_count = base.data.train_per_task;
  opts.test_count = base.data.test_per_task;
  const auto specs = make_task_sequence(base.data.benchmark, data.train, opts, seed);
  const auto task1 = materialize_task(specs[0], data, seed);
  auto mrng = stream_rng(seed, stream::memory, 0);
  const auto idx = draw_memory_indices(task1.train_x.rows(), base.memory.memory_size, mrng);
  DenseMatrix mem(idx.size(), task1.train_x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(task1.train_x.row(idx[i]).begin(), mem.cols(), mem.row(i).begin());

  const TaskId t = specs[0].id;
  Stability s;
  s.logits = rel_change(forward(after1, t, mem).logits, forward(after2, t, mem).logits);
  s.weak = rel_change(output_weak_gradients(after1, t, mem), output_weak_gradients(after2, t, mem));
  return s;
}

Verdict criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto mlp = two_task_stability(preset("stability-mlp"));
  const double mlp_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto conv = two_task_stability(preset("conv-desk"));
  Verdict v;
  v.pass = mlp.logits <= 1e-6 && mlp.weak <= 1e-6 && conv.logits <= 1e-5 && conv.weak <= 1e-5 && mlp_seconds <= 180.0;
  v.detail = fmt::format("mlp logits {:.2e} weak {:.2e} (<= 1e-6, {:.0f}s <= 180s); conv logits {:.2e} weak {:.2e} (<= 1e-5)",
                         mlp.logits, mlp.weak, mlp_seconds, conv.logits, conv.weak);
  return v;
}

// ---- 2 ----

Verdict criterion2() {
  std::mt19937_64 rng(2);
  double weak_worst = 0.0;
  std::uniform_int_distribution<std::size_t> width(2, 32), depth(1, 4);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::size_t> dims{width(rng)};
    for (std::size_t l = 0, d = depth(rng); l < d; ++l) dims.push_back(width(rng));
    Network net = random_mlp(dims, rng);
    const auto x = random_matrix(2, dims.front(), rng);
    const auto weak = weak_gradients(net, forward(net, 0, x)).back();
    for (std::size_t i = 0; i < 2; ++i) {
      const auto summed = matmul(DenseMatrix(1, dims.front(), 1.0), full_input_jacobian(net, 0, x.row(i)));
      weak_worst = std::max(weak_worst, max_abs_diff(weak.row_block(i, 1), summed) / std::max(1.0, max_abs(summed)));
    }
  }

  double conv_worst = 0.0;
  std::uniform_int_distribution<std::size_t> small(1, 3), side(3, 6), kern(1, 3), stride(1, 2), pad(0, 1);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t h = side(rng);
    const auto s = LayerSpec::conv({small(rng), h, side(rng)}, small(rng), std::min(kern(rng), h), stride(rng), pad(rng));
    const auto w = random_matrix(s.weight_rows(), s.weight_cols(), rng);
    const auto x = random_matrix(1, s.input_size(), rng);
    conv_worst = std::max(conv_worst, max_abs_diff(apply_weights(s, w, x), matmul(x, conv_as_matrix(s, w))));
  }

  double reshape_worst = 0.0;
  bool converse = true;
  for (int rep = 0; rep < 20; ++rep) {
    const auto s = LayerSpec::conv({2, 5, 5}, 3, 3, 1 + rep % 2, rep % 2);
    const auto v = random_matrix(1, s.input_size(), rng);
    const auto dk = random_matrix(s.weight_rows(), s.weight_cols(), rng);
    LayerPool pool;
    pool.basis = OrthonormalBasis(s.weight_rows());
    extend_pool(pool, extract_patches(s, v), 1.0, Provenance::gradient, 0);
    const auto dk_proj = project_out(dk, pool.basis);
    reshape_worst = std::max(reshape_worst, max_abs(matmul(v, conv_as_matrix(s, dk_proj))));
    reshape_worst = std::max(reshape_worst, max_abs(matmul(extract_patches(s, v), dk_proj)));
    converse = converse && max_abs(matmul(v, conv_as_matrix(s, dk - dk_proj))) > 1e-6;
  }

  Verdict v;
  v.pass = weak_worst <= 1e-10 && conv_worst <= 1e-12 && reshape_worst <= 1e-10 && converse;
  v.detail = fmt::format("(a) weak vs jacobian {:.1e} <= 1e-10 on 50 nets; (b) conv matrix {:.1e} <= 1e-12 on 100 cases; "
                         "(c) reshape orthogonality {:.1e} <= 1e-10{}",
                         weak_worst, conv_worst, reshape_worst, converse ? "" : " (converse failed)");
  return v;
}

// ---- 3 ----

Network random_small_net(std::mt19937_64& rng, int kind) {
  if (kind == 0) return random_mlp({8, 6, 4}, rng);
  if (kind == 1) return random_mlp({10, 12, 7, 5}, rng);
  return small_conv_net(rng);
}

Verdict criterion3() {
  std::mt19937_64 rng(3);
  double back_worst = 0.0, jac_worst = 0.0, igr_worst = 0.0;
  auto track = [](double& worst, const DenseMatrix& fd, const DenseMatrix& an) { worst = std::max(worst, rel_err(fd, an)); };

  for (int rep = 0; rep < 20; ++rep) {
    Network net = random_small_net(rng, rep % 3);
    const auto x = random_matrix(3, net.input_size(), rng, 0, 1);
    const auto y = random_labels(3, net.num_classes(), rng);

    const auto up = random_matrix(3, net.num_classes(), rng);
    const auto g = backward_weights(net, forward(net, 0, x), up);
    auto f = [&] { return dot(forward(net, 0, x).logits, up); };
    for (std::size_t l = 0; l < net.depth(); ++l) {
      auto& p = net.params(l, 0);
      track(back_worst, finite_difference(p.weight, f), g.layers[l].weight);
      if (p.bn) {
        track(back_worst, finite_difference(p.bn->gamma, f), row_vector(g.layers[l].gamma));
        track(back_worst, finite_difference(p.bn->beta, f), row_vector(g.layers[l].beta));
      }
    }

    DenseMatrix in = x.row_block(0, 1);
    for (std::size_t l = 0; l < net.depth(); ++l) {
      const auto& spec = net.layers()[l];
      Network single({spec});
      const auto& p = net.params(l, 0);
      single.set_task_params(0, p, p);
      const auto trace = forward(single, 0, in);
      LayerJacobian jac(spec, single.params(0, 0), trace.layers[0]);
      const auto j = jac.apply_for_sample(DenseMatrix::identity(spec.input_size()), 0);
      DenseMatrix fd(spec.input_size(), spec.output_size());
      for (std::size_t o = 0; o < spec.output_size(); ++o) {
        DenseMatrix e(1, spec.output_size());
        e(0, o) = 1.0;
        const auto col = finite_difference(in, [&] { return dot(forward(single, 0, in).logits, e); });
        for (std::size_t i = 0; i < spec.input_size(); ++i) fd(i, o) = col(0, i);
      }
      track(jac_worst, fd, j);
      in = trace.logits;
    }

    for (double lambda : {0.0, 1.0, 50.0}) {
      const auto obj = igr_objective(net, 0, x, y, lambda);
      auto h = [&] { return igr_objective(net, 0, x, y, lambda).total; };
      for (std::size_t l = 0; l < net.depth(); ++l) {
        auto& p = net.params(l, 0);
        track(igr_worst, finite_difference(p.weight, h), obj.grads.layers[l].weight);
        if (p.bn) {
          track(igr_worst, finite_difference(p.bn->gamma, h), row_vector(obj.grads.layers[l].gamma));
          track(igr_worst, finite_difference(p.bn->beta, h), row_vector(obj.grads.layers[l].beta));
        }
      }
    }
  }
  Verdict v;
  v.pass = back_worst <= 1e-5 && jac_worst <= 1e-5 && igr_worst <= 1e-4;
  v.detail = fmt::format("20 cases: backward {:.1e} <= 1e-5, layer jacobians {:.1e} <= 1e-5, igr (lambda 0/1/50) {:.1e} <= 1e-4",
                         back_worst, jac_worst, igr_worst);
  return v;
}

// ---- 4 and 5 ----

struct Comparison {
  ExperimentResult dgp, sgd, gpm;
  double seconds = 0.0;
};

ExperimentResult run_mode(const std::string& mode, double lr) {
  auto cfg = preset("pmnist-desk");
  cfg.memory.mode = parse_memory_mode(mode);
  cfg.train.lr = lr;
  cfg.out_dir = (g_work / ("pmnist-" + mode)).string();
  cfg.overwrite = true;
  log(fmt::format("pmnist-desk mode={} lr={} seeds={}", mode, lr, cfg.seeds.size()));
  return run_experiment(cfg, [](const std::string& line) {
    if (line.rfind("seed", 0) == 0) log(line);
  });
}

const Comparison& comparison() {
  static const Comparison c = [] {
    Comparison r;
    const auto t0 = std::chrono::steady_clock::now();
    r.dgp = run_mode("dgp", 0.05);
    r.sgd = run_mode("none", 0.1);
    r.gpm = run_mode("gpm", 0.05);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }();
  return c;
}

Verdict criterion4() {
  const auto& c = comparison();
  const std::size_t seeds = preset("pmnist-desk").seeds.size();
  if (c.dgp.succeeded() != seeds || c.sgd.succeeded() != seeds || c.gpm.succeeded() != seeds)
    return {false, "a seed failed; see the archives' metadata.yaml"};

  Verdict v;
  v.pass = c.seconds <= 45 * 60;
  std::string parts;
  for (const char* attack : {"pmnist-fgsm", "pmnist-pgd"}) {
    const double gap = 100.0 * (c.dgp.final_stat(attack, false).first - c.sgd.final_stat(attack, false).first);
    const bool ok = gap >= 15.0;
    v.pass = v.pass && ok;
    parts += fmt::format("(a) {} dgp-sgd {:+.1f}pp{} ", attack, gap, ok ? "" : " < 15");
  }
  const double dgp_bwt = c.dgp.final_stat("clean", true).first;
  const double sgd_bwt = c.sgd.final_stat("clean", true).first;
  v.pass = v.pass && dgp_bwt >= -0.05 && sgd_bwt <= -0.30;
  parts += fmt::format("(b) bwt dgp {:.3f}{} sgd {:.3f}{} ", dgp_bwt, dgp_bwt >= -0.05 ? "" : " < -0.05", sgd_bwt,
                       sgd_bwt <= -0.30 ? "" : " > -0.30");
  for (const char* attack : {"pmnist-fgsm", "pmnist-pgd"}) {
    const double d = c.dgp.final_stat(attack, false).first;
    const double g = c.gpm.final_stat(attack, false).first;
    v.pass = v.pass && d >= g;
    parts += fmt::format("(c) {} dgp {:.4f} {} gpm {:.4f} ", attack, d, d >= g ? ">=" : "<", g);
  }
  v.detail = parts + fmt::format("| {:.0f}s <= 2700s", c.seconds);
  return v;
}

Verdict criterion5() {
  const auto& c = comparison();
  bool ordered = true;
  std::size_t checked = 0;
  double min_gap = 1e300;
  for (const auto& d : c.dgp.seeds) {
    const auto s = std::find_if(c.sgd.seeds.begin(), c.sgd.seeds.end(), [&](const SeedResult& r) { return r.seed == d.seed; });
    if (!d.ok || s == c.sgd.seeds.end() || !s->ok) {
      ordered = false;
      continue;
    }
    for (std::size_t t = 1; t < d.similarity.size(); ++t) {
      if (!d.similarity[t] || !s->similarity[t]) {
        ordered = false;
        continue;
      }
      min_gap = std::min(min_gap, *d.similarity[t] - *s->similarity[t]);
      ordered = ordered && *d.similarity[t] > *s->similarity[t];
      ++checked;
    }
  }

  auto cfg = preset("pmnist-desk");
  cfg.memory.alpha1 = {1.0};
  cfg.memory.alpha2 = 1.0;
  cfg.memory.alpha3 = 1.0;
  cfg.attacks.clear();
  cfg.out_dir = (g_work / "pmnist-exact").string();
  cfg.overwrite = true;
  log("pmnist-desk exact mode (alpha = 1)");
  const auto exact = run_experiment(cfg, [](const std::string& line) {
    if (line.rfind("seed", 0) == 0) log(line);
  });
  double exact_dev = 0.0;
  double sim5_min = 1.0;
  bool exact_ok = exact.succeeded() == cfg.seeds.size();
  for (const auto& r : exact.seeds)
    for (const auto& s : r.similarity) {
      if (!s) {
        exact_ok = false;
        continue;
      }
      exact_dev = std::max(exact_dev, std::abs(*s - 1.0));
    }
  for (const auto& r : exact.seeds)
    if (!r.similarity.empty() && r.similarity.back()) sim5_min = std::min(sim5_min, *r.similarity.back());

  Verdict v;
  v.pass = ordered && checked > 0 && exact_ok && sim5_min >= 0.9 && exact_dev <= 1e-6;
  v.detail = fmt::format("dgp > sgd at {} checkpoints (min gap {:+.4f}){}; exact mode min Sim5 {:.7f} >= 0.9, |Sim-1| {:.1e} <= 1e-6",
                         checked, min_gap, ordered ? "" : " ORDER VIOLATED", sim5_min, exact_dev);
  return v;
}

// ---- 6 ----

Verdict criterion6() {
  std::mt19937_64 rng(6);
  std::string failures;

  // pool orthonormality after every mutation and projected gradients
  double ortho_worst = 0.0, proj_worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    Network net = rep % 2 ? small_conv_net(rng) : random_mlp({12, 10, 8, 4}, rng);
    net.add_task(1, rng);
    BasisPool pool(net);
    MemoryConfig mc;
    mc.alpha1 = {0.9 + 0.01 * rep};
    for (TaskId t = 0; t < 6; ++t) {
      const auto data = random_matrix(30, net.input_size(), rng, 0, 1);
      auto mrng = std::mt19937_64(rng());
      mc.memory_size = 10 + 5 * std::size_t(t);
      end_of_task_update(pool, net, t % 2, data, mc, mrng);
      for (const auto& p : pool.layers()) ortho_worst = std::max(ortho_worst, p.basis.residual());
      for (auto& p : pool.layers()) {
        extend_pool(p, random_matrix(3, p.dim(), rng), 0.5, Provenance::activation, t);
        ortho_worst = std::max(ortho_worst, p.basis.residual());
      }
      compress_pool(pool, mc, t);
      for (const auto& p : pool.layers()) ortho_worst = std::max(ortho_worst, p.basis.residual());

      auto grads = net.zero_gradients(1);
      for (auto& g : grads.layers) g.weight = random_matrix(g.weight.rows(), g.weight.cols(), rng);
      project_weight_gradients(grads, pool);
      for (const auto& p : pool.layers())
        if (p.count()) proj_worst = std::max(proj_worst, max_abs(matmul_tn(p.basis.vectors(), grads.layers[p.layer].weight)));
    }
  }
  // pools saved by the criterion-4 runs
  std::size_t archived = 0;
  for (const char* mode : {"dgp", "gpm"}) {
    const auto dir = g_work / fmt::format("pmnist-{}", mode);
    if (!fs::is_directory(dir)) continue;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_directory() && fs::exists(entry.path() / "pool.dgpp")) {
        const auto pool = load_pool(entry.path() / "pool.dgpp");
        ++archived;
        for (const auto& p : pool.layers()) ortho_worst = std::max(ortho_worst, p.basis.residual());
      }
  }
  if (ortho_worst > 1e-8) failures += " orthonormality";
  if (proj_worst > 1e-8) failures += " projection";

  // attacks stay inside the budget and the pixel range on every batch
  double budget_excess = 0.0;
  bool in_range = true;
  for (int rep = 0; rep < 10; ++rep) {
    Network net = random_mlp({16, 12, 10}, rng);
    const auto x = random_matrix(8, 16, rng, 0, 1);
    const auto y = random_labels(8, 10, rng);
    for (const auto& name : attack_preset_names()) {
      const auto a = attack_preset(name);
      const auto adv = run_attack(net, 0, x, y, a, rng);
      const double radius = a.kind == AttackKind::fgsm ? a.step : a.budget;
      budget_excess = std::max(budget_excess, max_abs(adv - x) - radius);
      for (double v : adv.values()) in_range = in_range && v >= a.pixel_min && v <= a.pixel_max;
    }
  }
  if (budget_excess > 1e-12) failures += " attack-budget";
  if (!in_range) failures += " pixel-range";

  AccuracyMatrix r(2);
  r.set(1, 1, 0.9);
  r.set(2, 1, 0.8);
  r.set(2, 2, 0.7);
  const auto ab = acc_bwt(r, 2);
  const bool hand = std::abs(ab.acc - 0.75) < 1e-12 && ab.bwt && std::abs(*ab.bwt + 0.1) < 1e-12;
  if (!hand) failures += " acc_bwt";

  // two seed-7 runs of the preset
  std::vector<std::string> differing;
  std::vector<fs::path> dirs;
  for (int run = 0; run < 2; ++run) {
    auto cfg = preset("pmnist-desk");
    cfg.seeds = {7};
    cfg.out_dir = (g_work / fmt::format("determinism-{}", run)).string();
    cfg.overwrite = true;
    log(fmt::format("pmnist-desk seed 7, run {}", run + 1));
    run_experiment(cfg);
    dirs.emplace_back(cfg.out_dir);
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".csv" || name == "timing.csv") continue;
    ++compared;
    if (slurp(entry.path()) != slurp(dirs[1] / name)) differing.push_back(name);
  }
  if (!differing.empty() || compared == 0) failures += " determinism";

  Verdict v;
  v.pass = failures.empty();
  v.detail = fmt::format("orthonormality {:.1e} <= 1e-8 (60 synthetic updates, {} archived pools), projected {:.1e} <= 1e-8, attack overshoot {:.1e}, pixels {}, "
                         "acc_bwt {:.2f}/{:.2f}, seed-7 CSVs identical {}/{}{}",
                         ortho_worst, archived, proj_worst, std::max(budget_excess, 0.0), in_range ? "in range" : "OUT OF RANGE",
                         ab.acc, ab.bwt.value_or(std::nan("")), compared - differing.size(), compared,
                         failures.empty() ? "" : " | failed:" + failures);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "dgp-acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--work DIR]\n";
      return 1;
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"full-rank double stability", criterion1},
      {"oracle equivalences", criterion2},
      {"finite-difference suite", criterion3},
      {"pmnist-desk robustness and forgetting", criterion4},
      {"similarity stabilization", criterion5},
      {"mechanical invariants", criterion6},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && v.pass;
    std::cout << fmt::format("[{}] {} {}: {} ({:.0f}s)", v.pass ? "PASS" : "FAIL", id, criteria[i].first, v.detail, s)
              << std::endl;
  }
  return all ? 0 : 1;
}
