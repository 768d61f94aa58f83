#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dgp/defense.hpp"
#include "dgp/memory.hpp"
#include "dgp/network.hpp"

namespace dgp {

// ---- data ----

struct Dataset {
  DenseMatrix images;  // n x (c*h*w), pixels in [0, 1]
  Labels labels;
  Shape3 shape;
  std::size_t num_classes = 10;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
};

struct IdxMagicError : FormatError {
  using FormatError::FormatError;
};
struct IdxTruncatedError : FormatError {
  using FormatError::FormatError;
};
struct IdxCountMismatchError : FormatError {
  using FormatError::FormatError;
};

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Gzip-compressed files are accepted transparently.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Writes uncompressed IDX files; pixels are rounded to bytes.
void write_idx_dataset(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Loads {train,t10k|test}-{images-idx3,labels-idx1}-ubyte[.gz] from a directory.
DatasetPair load_mnist_dir(const std::filesystem::path& dir);

/// Class-prototype images plus noise; learnable, offline stand-in for MNIST.
/// Prototypes depend on seed only, so splits drawn with the same seed share them.
Dataset synthetic_dataset(std::size_t n, Shape3 shape, std::size_t classes, std::uint64_t seed,
                          std::uint64_t split = 0);

/// 2x2 average downscaling, applied `times` times.
Dataset downscale(const Dataset& d, int times);

Dataset select_rows(const Dataset& d, std::span<const std::size_t> rows);

// ---- task sequences ----

enum class BenchmarkKind { permuted, rotated, split };

const char* benchmark_name(BenchmarkKind k);
BenchmarkKind parse_benchmark(const std::string& s);

struct TaskSpec {
  TaskId id = 0;
  BenchmarkKind kind = BenchmarkKind::permuted;
  std::vector<std::size_t> permutation;  // permuted
  double angle_degrees = 0.0;            // rotated
  std::vector<int> classes;              // split; label i of the task is classes[i]
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::size_t num_classes = 10;
};

struct SequenceOptions {
  std::size_t num_tasks = 5;
  std::size_t train_count = 2000;
  std::size_t test_count = 1000;
  /// Split benchmark: classes per task; 0 divides all classes, remainder round-robin.
  std::size_t classes_per_task = 0;
};

std::vector<TaskSpec> make_task_sequence(BenchmarkKind kind, const Dataset& base, const SequenceOptions& opts,
                                         std::uint64_t seed);

/// Bilinear rotation about the image centre, zero outside the frame.
DenseMatrix rotate_images(const DenseMatrix& images, Shape3 shape, double degrees);

struct TaskData {
  DenseMatrix train_x;
  Labels train_y;
  DenseMatrix test_x;
  Labels test_y;
};

/// Applies the task transform to seeded subsets of the base splits.
TaskData materialize_task(const TaskSpec& spec, const DatasetPair& base, std::uint64_t seed);

// ---- configuration ----

struct DataConfig {
  BenchmarkKind benchmark = BenchmarkKind::permuted;
  std::string dir = "data/mnist-5k";
  bool synthetic = false;
  std::size_t synthetic_train = 4000;
  std::size_t synthetic_test = 1000;
  std::size_t tasks = 5;
  std::size_t train_per_task = 2000;
  std::size_t test_per_task = 1000;
  std::size_t classes_per_task = 0;
  /// Test samples per task used for adversarial evaluation.
  std::size_t eval_cap = 500;
  int downscale = 0;
};

enum class Architecture { mlp, conv };

struct NetworkConfig {
  Architecture arch = Architecture::mlp;
  std::vector<std::size_t> hidden = {256, 256};
  std::vector<std::size_t> conv_channels = {8, 16};
  std::size_t kernel = 3;
  bool batch_norm = true;
  /// One head for every task instead of a head per task.
  bool shared_head = false;
};

struct TrainConfig {
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DataConfig data;
  NetworkConfig network;
  TrainConfig train;
  DefenseConfig defense;
  std::vector<std::string> attacks;
  MemoryConfig memory;
  bool similarity = true;
  /// Samples in the gradient-similarity probe; 0 means memory_size.
  std::size_t similarity_samples = 0;
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "results";
  bool overwrite = false;

  void validate() const;
};

/// Parses YAML text, applying dotted key=value overrides first. Unknown keys,
/// type errors and bad values raise ConfigError naming the key (and line).
ExperimentConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides = {},
                              const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
/// Canonical YAML form of a config (round-trips through parse_config).
std::string dump_config(const ExperimentConfig& cfg);

/// Dotted keys accepted by the schema, for help output and override checks.
std::vector<std::string> config_keys();

Network build_network(const NetworkConfig& cfg, Shape3 input, std::size_t num_classes);

/// Input shape after the configured downscaling.
Shape3 input_shape(const DataConfig& cfg, Shape3 base);

/// Resolves data.dir against the working directory, then DGP_DATA_DIR.
std::filesystem::path resolve_data_dir(const std::string& dir);

/// Real data from data.dir or the synthetic generator, downscaled as configured.
DatasetPair load_experiment_data(const DataConfig& cfg, std::uint64_t seed);

// ---- training and evaluation ----

/// Independent generator for a named purpose within a seed.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub = 0);

struct EpochLog {
  TaskId task = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double regularizer = 0.0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains one task with the configured defense; weight gradients of shared
/// layers are projected against the pool from the second task on.
std::vector<EpochLog> train_task(Network& net, const BasisPool& pool, std::size_t task_index, TaskId task,
                                 const TaskData& data, const ExperimentConfig& cfg, std::mt19937_64& rng,
                                 const ProgressFn& progress = {});

double accuracy(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels);

/// Accuracy under an attack on the first `cap` samples.
double adversarial_accuracy(const Network& net, TaskId task, const DenseMatrix& x, std::span<const int> labels,
                            const AttackConfig& attack, std::size_t cap, std::mt19937_64& rng);

/// Accuracy matrices R[attack][T-1][t-1]; "clean" is always present.
struct AccuracyMatrix {
  std::size_t tasks = 0;
  std::vector<std::vector<std::optional<double>>> r;

  explicit AccuracyMatrix(std::size_t t = 0) : tasks(t), r(t, std::vector<std::optional<double>>(t)) {}
  void set(std::size_t after, std::size_t task, double v);
  [[nodiscard]] double at(std::size_t after, std::size_t task) const;
};

struct AccBwt {
  double acc = 0.0;
  std::optional<double> bwt;
};

/// ACC and BWT after learning the first `upto` tasks (1-based).
AccBwt acc_bwt(const AccuracyMatrix& r, std::size_t upto);

/// Cosine similarity of two flattened gradient sets; absent when either is zero.
std::optional<double> gradient_similarity(const DenseMatrix& reference, const DenseMatrix& current);

/// Flattened weak-guarantee vectors at the network output for the samples.
DenseMatrix output_weak_gradients(const Network& net, TaskId task, const DenseMatrix& samples);

struct MetricRow {
  std::uint64_t seed = 0;
  std::size_t after = 0;  // T
  std::size_t task = 0;   // t
  std::string attack;
  double accuracy = 0.0;
};

struct SummaryRow {
  std::uint64_t seed = 0;
  std::size_t after = 0;
  std::string attack;
  double acc = 0.0;
  std::optional<double> bwt;
  std::optional<double> sim;
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::map<std::string, AccuracyMatrix> matrices;
  std::vector<std::optional<double>> similarity;  // per checkpoint
  std::vector<double> task_seconds;
  std::vector<PoolUpdateReport> pool_updates;
  std::vector<std::size_t> pool_counts;  // total pool vectors after each task
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  std::vector<std::string> attacks;  // including "clean" first

  /// Metric over successful seeds: mean and sample standard deviation.
  [[nodiscard]] std::pair<double, double> final_stat(const std::string& attack, bool bwt) const;
  [[nodiscard]] std::size_t succeeded() const;
};

/// Runs one seed end to end without touching the filesystem.
SeedResult run_seed(const ExperimentConfig& cfg, const DatasetPair& data, std::uint64_t seed,
                    const ProgressFn& progress = {}, Network* final_net = nullptr, BasisPool* final_pool = nullptr);

/// All seeds; writes metrics.csv, summary.csv, aggregate.csv, timing.csv,
/// config.yaml, metadata.yaml and per-seed checkpoints to cfg.out_dir. A seed
/// that throws is recorded as failed and the rest proceed.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {});

std::string format_metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(const std::string& text);

// ---- reports ----

struct ReportFiles {
  std::string table_text;   // aligned ACC/BWT table per attack
  std::string table_csv;
  std::string acc_series;   // seed,T,attack,ACC
  std::string sim_series;   // seed,T,sim
};

/// Builds report tables from an archive's metrics.csv and summary.csv.
ReportFiles build_report(const std::filesystem::path& archive);

void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace dgp
