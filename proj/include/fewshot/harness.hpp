// Experiment front end: run configs from JSON (unknown keys rejected),
// dataset JSONL I/O, metrics/trace/matrix CSV emission, the gradient-check
// suite, and the CLI dispatcher behind tools/fewshot.
#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "fewshot/training.hpp"

namespace fewshot {

// Named rng streams derived from the single run seed, so each component is
// independently reproducible.
constexpr std::uint64_t kStreamData = 1;
constexpr std::uint64_t kStreamInit = 2;
constexpr std::uint64_t kStreamEpisodes = 3;
constexpr std::uint64_t kStreamEval = 4;
constexpr std::uint64_t kStreamExport = 5;
constexpr std::uint64_t kStreamGradCheck = 6;

struct EncoderSpec {
  std::string kind = "identity";  // "identity" | "mlp"
  std::vector<int> layers;        // mlp widths after the input layer
  Activation activation = Activation::relu;
};

struct RunConfig {
  TrainConfig train;

  bool has_mixture = false;
  MixtureSpec mixture;       // seed is filled from the run seed at build time
  std::string dataset_path;  // alternative source: JSONL file

  int test_classes = 0;  // > 0: class-disjoint split before training
  EncoderSpec encoder;
  int jobs = 1;
  std::string checkpoint;  // explicit checkpoint path (optional)

  // radius-dynamics settings
  int warmup_steps = 500;
  int total_steps = 2000;
  int log_every = 50;
  int anchor_class = 0;
  int retry_limit = 200;

  // matrix exports
  int export_classes = 5;
  int export_per_class = 5;

  std::vector<int> shots;  // shot-sweep grid
};

// Parses and validates; any key outside the schema is an error, so typos
// fail loudly instead of silently using a default.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// One {"features": [...], "label": n} object per line. Features round-trip
// exactly (shortest-round-trip decimal serialization). Errors carry
// path:line.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& ds, const std::string& path);

// One {"id": n, "labels": {"<class>": count}} object per line.
MultiLabelDataset load_multilabel_dataset(const std::string& path);
void save_multilabel_dataset(const MultiLabelDataset& ds,
                             const std::string& path);

// Header `metric,value,ci95_halfwidth,n`, fixed 6-decimal formatting, rows
// accuracy/precision/recall/f1. The halfwidth applies to accuracy (the
// per-episode statistic); pooled micro scores carry 0.
void write_metrics_csv(const Metrics& m, const std::string& path);

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Samples n_classes classes and n_per_class instances each, builds one
// closed-form hypersphere prototype per class from those instances, and
// emits the (instances x classes) measurement matrix min-max normalized to
// [0, 1] over the whole matrix (a constant matrix becomes all zeros).
Matrix export_distance_matrix(const MlpEncoder& enc, const Dataset& ds,
                              int n_classes, int n_per_class, Rng& rng,
                              const std::string& path);

// Cosine similarities between the same kind of sample, grouped by class:
// an (n*k) x (n*k) symmetric matrix with unit diagonal.
Matrix export_similarity_matrix(const MlpEncoder& enc, const Dataset& ds,
                                int n_classes, int n_per_class, Rng& rng,
                                const std::string& path);

// Header `step,mean_sq_dist,radius,accuracy`.
void write_radius_trace_csv(const std::vector<RadiusTraceRow>& trace,
                            const std::string& path);

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int configs = 0;
  double tolerance = 0.0;
  bool pass = false;
};

// Finite-difference verification of every analytic gradient in the toolkit:
// the three measurements (tolerance 1e-6), the disjointness penalty, the
// encoder backward pass, and the full episode loss per variant (1e-5 each),
// over configs_per_case random configurations per case.
std::vector<GradCheckResult> run_grad_checks(int configs_per_case,
                                             std::uint64_t seed);

// Subcommands: gen-data, train, eval, grad-check, radius-dynamics,
// export-matrices, shot-sweep. Returns the process exit code; failures
// print a one-line diagnostic to stderr.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace fewshot
