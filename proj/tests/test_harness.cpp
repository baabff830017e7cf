#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fewshot/harness.hpp"

using namespace fewshot;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "fewshot_harness_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void spit(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fewshot");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_dispatch(static_cast<int>(argv.size()), argv.data());
}

// Small, fast experiment: 6 loose classes in R^3, identity encoder.
nlohmann::json base_config() {
  return nlohmann::json{
      {"variant", "hypersphere"},
      {"mode", "persistent"},
      {"n_way", 3},
      {"k_shot", 2},
      {"k_query", 4},
      {"steps", 25},
      {"encoder_lr", 0.0},
      {"scale_lr", 0.05},
      {"encoder_opt", "sgd"},
      {"scale_opt", "sgd"},
      {"seed", 7},
      {"eval_episodes", 20},
      {"mixture",
       {{"n_classes", 6},
        {"dim", 3},
        {"samples_per_class", 30},
        {"mean_scale", 2.0},
        {"sigma_lo", 0.4},
        {"sigma_hi", 1.0}}},
      {"encoder", {{"kind", "identity"}}},
  };
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  fs::path p = dir / "config.json";
  spit(p, j.dump(2));
  return p;
}

Dataset tiny_mixture(std::uint64_t seed = 5) {
  MixtureSpec spec;
  spec.n_classes = 6;
  spec.dim = 3;
  spec.samples_per_class = 12;
  spec.mean_scale = 2.0;
  spec.sigma_lo = 0.3;
  spec.sigma_hi = 1.1;
  spec.seed = seed;
  return make_gaussian_mixture(spec);
}

}  // namespace

TEST_CASE("run config: full document parses into the right fields") {
  nlohmann::json j = base_config();
  j["test_classes"] = 2;
  j["jobs"] = 3;
  j["encoder"] = {{"kind", "mlp"}, {"layers", {8, 4}}, {"activation", "tanh"}};
  j["shots"] = {1, 5};
  j["warmup_steps"] = 10;
  j["total_steps"] = 60;
  j["log_every"] = 10;
  j["anchor_class"] = 2;
  j["retry_limit"] = 9;
  j["export_classes"] = 4;
  j["export_per_class"] = 6;
  j["checkpoint"] = "ck.json";

  RunConfig cfg = run_config_from_json(j);
  CHECK(cfg.train.variant == Variant::hypersphere);
  CHECK(cfg.train.mode == TrainMode::persistent);
  CHECK(cfg.train.n_way == 3);
  CHECK(cfg.train.k_shot == 2);
  CHECK(cfg.train.k_query == 4);
  CHECK(cfg.train.steps == 25);
  CHECK(cfg.train.encoder_lr == 0.0);
  CHECK(cfg.train.scale_lr == 0.05);
  CHECK(cfg.train.seed == 7);
  CHECK(cfg.train.eval_episodes == 20);
  CHECK(cfg.has_mixture);
  CHECK(cfg.mixture.n_classes == 6);
  CHECK(cfg.mixture.sigma_hi == 1.0);
  CHECK(cfg.test_classes == 2);
  CHECK(cfg.jobs == 3);
  CHECK(cfg.encoder.kind == "mlp");
  CHECK(cfg.encoder.layers == std::vector<int>{8, 4});
  CHECK(cfg.encoder.activation == Activation::tanh);
  CHECK(cfg.shots == std::vector<int>{1, 5});
  CHECK(cfg.warmup_steps == 10);
  CHECK(cfg.total_steps == 60);
  CHECK(cfg.anchor_class == 2);
  CHECK(cfg.retry_limit == 9);
  CHECK(cfg.export_classes == 4);
  CHECK(cfg.export_per_class == 6);
  CHECK(cfg.checkpoint == "ck.json");

  // defaults
  RunConfig d = run_config_from_json(base_config());
  CHECK(d.jobs == 1);
  CHECK(d.test_classes == 0);
  CHECK(d.export_classes == 5);
  CHECK(d.export_per_class == 5);
  CHECK(d.encoder.kind == "identity");
}

TEST_CASE("run config: unknown keys fail loudly") {
  nlohmann::json j = base_config();
  j["scale_lrr"] = 0.1;
  CHECK_THROWS_WITH_AS(run_config_from_json(j),
                       doctest::Contains("scale_lrr"), std::invalid_argument);

  j = base_config();
  j["mixture"]["seed"] = 1;  // data randomness comes from the run seed only
  CHECK_THROWS_WITH_AS(run_config_from_json(j), doctest::Contains("seed"),
                       std::invalid_argument);

  j = base_config();
  j["encoder"]["widths"] = {4};
  CHECK_THROWS_WITH_AS(run_config_from_json(j), doctest::Contains("widths"),
                       std::invalid_argument);
}

TEST_CASE("run config: value errors") {
  nlohmann::json j = base_config();
  j["variant"] = "cube";
  CHECK_THROWS_AS(run_config_from_json(j), std::invalid_argument);

  j = base_config();
  j["n_way"] = 0;
  CHECK_THROWS_AS(run_config_from_json(j), std::invalid_argument);

  j = base_config();
  j["dataset"] = "also.jsonl";  // two data sources at once
  CHECK_THROWS_AS(run_config_from_json(j), std::invalid_argument);

  j = base_config();
  j["encoder"] = {{"kind", "mlp"}};  // mlp needs layer widths
  CHECK_THROWS_AS(run_config_from_json(j), std::invalid_argument);

  j = base_config();
  j["encoder"] = {{"kind", "cnn"}};
  CHECK_THROWS_AS(run_config_from_json(j), std::invalid_argument);
}

TEST_CASE("dataset jsonl: round trip is exact") {
  fs::path dir = fresh_dir("jsonl_roundtrip");
  Dataset ds = tiny_mixture();
  fs::path p = dir / "data.jsonl";
  save_dataset(ds, p.string());
  Dataset back = load_dataset(p.string());

  REQUIRE(back.items.size() == ds.items.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    CHECK(back.items[i].features == ds.items[i].features);  // bitwise
    CHECK(back.items[i].label == ds.items[i].label);
  }
  CHECK(back.class_index == ds.class_index);
  CHECK(back.true_spread.empty());  // generator ground truth is not persisted

  // byte-identical re-save
  fs::path p2 = dir / "data2.jsonl";
  save_dataset(back, p2.string());
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("dataset jsonl: errors carry the line number") {
  fs::path dir = fresh_dir("jsonl_errors");

  fs::path bad_label = dir / "bad_label.jsonl";
  spit(bad_label,
       "{\"features\": [1.0, 2.0], \"label\": 0}\n"
       "{\"features\": [1, 2], \"label\": \"x\"}\n");
  CHECK_THROWS_WITH_AS(load_dataset(bad_label.string()),
                       doctest::Contains(":2"), std::runtime_error);

  fs::path not_json = dir / "not_json.jsonl";
  spit(not_json,
       "{\"features\": [1.0], \"label\": 0}\n"
       "{\"features\": [2.0], \"label\": 1}\n"
       "wat\n");
  CHECK_THROWS_WITH_AS(load_dataset(not_json.string()),
                       doctest::Contains(":3"), std::runtime_error);

  fs::path mixed = dir / "mixed.jsonl";
  spit(mixed,
       "{\"features\": [1.0, 2.0], \"label\": 0}\n"
       "{\"features\": [1.0], \"label\": 1}\n");
  CHECK_THROWS_AS(load_dataset(mixed.string()), std::exception);

  fs::path unknown = dir / "unknown.jsonl";
  spit(unknown, "{\"features\": [1.0], \"label\": 0, \"weight\": 2}\n");
  CHECK_THROWS_WITH_AS(load_dataset(unknown.string()),
                       doctest::Contains("weight"), std::runtime_error);

  CHECK_THROWS_WITH_AS(load_dataset((dir / "missing.jsonl").string()),
                       doctest::Contains("missing.jsonl"),
                       std::runtime_error);
}

TEST_CASE("multi-label jsonl: round trip and validation") {
  fs::path dir = fresh_dir("multilabel");
  MultiLabelDataset ds;
  ds.items.push_back({0, {{1, 2}, {3, 1}}});
  ds.items.push_back({1, {{2, 1}}});
  ds.items.push_back({2, {{1, 1}, {2, 2}, {3, 1}}});

  fs::path p = dir / "ml.jsonl";
  save_multilabel_dataset(ds, p.string());
  MultiLabelDataset back = load_multilabel_dataset(p.string());
  REQUIRE(back.items.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.items[i].id == ds.items[i].id);
    CHECK(back.items[i].labels == ds.items[i].labels);
  }

  fs::path bad = dir / "bad.jsonl";
  spit(bad, "{\"id\": 0, \"labels\": {\"1\": 0}}\n");  // count below 1
  CHECK_THROWS_WITH_AS(load_multilabel_dataset(bad.string()),
                       doctest::Contains(":1"), std::runtime_error);
}

TEST_CASE("metrics csv: exact bytes, stable order, rerun identical") {
  fs::path dir = fresh_dir("metrics_csv");
  Metrics m;
  m.accuracy = 1.0;
  m.ci95_halfwidth = 0.0;
  m.precision = 1.0;
  m.recall = 1.0;
  m.f1 = 1.0;
  m.n_episodes = 10;

  fs::path p = dir / "metrics.csv";
  write_metrics_csv(m, p.string());
  std::string expected =
      "metric,value,ci95_halfwidth,n\n"
      "accuracy,1.000000,0.000000,10\n"
      "precision,1.000000,0.000000,10\n"
      "recall,1.000000,0.000000,10\n"
      "f1,1.000000,0.000000,10\n";
  CHECK(slurp(p) == expected);

  fs::path p2 = dir / "metrics2.csv";
  write_metrics_csv(m, p2.string());
  CHECK(slurp(p2) == expected);

  Metrics empty;
  CHECK_THROWS_AS(write_metrics_csv(empty, (dir / "x.csv").string()),
                  std::invalid_argument);
}

TEST_CASE("distance matrix: shape, bounds, constant degenerate, csv") {
  fs::path dir = fresh_dir("dist_matrix");
  Dataset ds = tiny_mixture();
  MlpEncoder enc = identity_encoder(3);

  Rng rng(3);
  fs::path p = dir / "dist.csv";
  Matrix m = export_distance_matrix(enc, ds, 5, 5, rng, p.string());
  REQUIRE(m.rows == 25);
  REQUIRE(m.cols == 5);
  double lo = 1e300, hi = -1e300;
  for (double x : m.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  CHECK(lo == 0.0);  // min-max normalization pins the extremes exactly
  CHECK(hi == 1.0);

  // written CSV parses back to the returned values at 6-decimal precision
  auto rows = lines_of(slurp(p));
  REQUIRE(rows.size() == 25);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::istringstream in(rows[r]);
    std::string cell;
    for (std::size_t c = 0; c < m.cols; ++c) {
      REQUIRE(std::getline(in, cell, ','));
      CHECK(std::abs(std::stod(cell) - m.at(r, c)) < 1e-6);
    }
    CHECK_FALSE(std::getline(in, cell, ','));  // no extra columns
  }

  // identical draws: same rng stream, same bytes
  Rng rng_a(3);
  export_distance_matrix(enc, ds, 5, 5, rng_a, (dir / "a.csv").string());
  CHECK(slurp(dir / "a.csv") == slurp(p));

  // all items identical -> every measurement equal -> all-zero matrix
  std::vector<Dataset::Item> same;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) same.push_back({{1.0, 1.0, 1.0}, c});
  Dataset flat = Dataset::from_items(same);
  Rng rng2(5);
  Matrix z =
      export_distance_matrix(enc, flat, 3, 2, rng2, (dir / "z.csv").string());
  for (double x : z.data) CHECK(x == 0.0);

  Rng rng3(7);
  CHECK_THROWS_AS(export_distance_matrix(enc, ds, 9, 5, rng3,
                                         (dir / "no.csv").string()),
                  SamplingError);
}

TEST_CASE("similarity matrix: unit diagonal, symmetry, zero-norm error") {
  fs::path dir = fresh_dir("sim_matrix");
  Dataset ds = tiny_mixture();
  MlpEncoder enc = identity_encoder(3);

  Rng rng(3);
  fs::path p = dir / "sim.csv";
  Matrix m = export_similarity_matrix(enc, ds, 5, 5, rng, p.string());
  REQUIRE(m.rows == 25);
  REQUIRE(m.cols == 25);
  for (std::size_t i = 0; i < m.rows; ++i) {
    CHECK(std::abs(m.at(i, i) - 1.0) <= 1e-12);
    for (std::size_t j = 0; j < i; ++j) {
      CHECK(std::abs(m.at(i, j) - m.at(j, i)) <= 1e-12);
      CHECK(m.at(i, j) <= 1.0 + 1e-12);
      CHECK(m.at(i, j) >= -1.0 - 1e-12);
    }
  }

  std::vector<Dataset::Item> with_zero = {
      {{0.0, 0.0, 0.0}, 0}, {{1.0, 0.0, 0.0}, 0},
      {{0.0, 1.0, 0.0}, 1}, {{0.0, 2.0, 0.0}, 1}};
  Dataset zds = Dataset::from_items(with_zero);
  Rng rng2(5);
  CHECK_THROWS_WITH_AS(
      export_similarity_matrix(enc, zds, 2, 2, rng2,
                               (dir / "zero.csv").string()),
      doctest::Contains("zero"), std::invalid_argument);
}

TEST_CASE("radius trace csv") {
  fs::path dir = fresh_dir("trace_csv");
  std::vector<RadiusTraceRow> trace = {{50, 1.25, 0.5, 0.75},
                                       {100, 2.0, 0.625, 0.5}};
  fs::path p = dir / "trace.csv";
  write_radius_trace_csv(trace, p.string());
  auto rows = lines_of(slurp(p));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "step,mean_sq_dist,radius,accuracy");
  CHECK(rows[1] == "50,1.250000,0.500000,0.750000");
  CHECK(rows[2] == "100,2.000000,0.625000,0.500000");
}

TEST_CASE("gradient check suite passes at its pinned tolerances") {
  auto results = run_grad_checks(8, 2024);
  REQUIRE(results.size() >= 6);
  for (const auto& r : results) {
    INFO(r.name, " max rel err ", r.max_rel_err, " tol ", r.tolerance);
    CHECK(r.pass);
    CHECK(r.max_rel_err < r.tolerance);
    CHECK(r.configs == 8);
  }
}

TEST_CASE("cli: bad invocations exit nonzero") {
  CHECK(run_cli({"frobnicate"}) != 0);
  CHECK(run_cli({}) != 0);
  fs::path dir = fresh_dir("cli_bad");
  CHECK(run_cli({"eval", "--config", (dir / "nope.json").string()}) != 0);
  // config referencing a missing dataset file
  nlohmann::json j = base_config();
  j.erase("mixture");
  j["dataset"] = (dir / "ghost.jsonl").string();
  fs::path cfg = write_config(dir, j);
  CHECK(run_cli({"eval", "--config", cfg.string(), "--out",
                 dir.string()}) != 0);
}

TEST_CASE("cli: gen-data is deterministic and loadable") {
  fs::path a = fresh_dir("cli_gen_a");
  fs::path b = fresh_dir("cli_gen_b");
  fs::path cfg = write_config(a, base_config());

  REQUIRE(run_cli({"gen-data", "--config", cfg.string(), "--out",
                   a.string()}) == 0);
  REQUIRE(run_cli({"gen-data", "--config", cfg.string(), "--out",
                   b.string()}) == 0);
  CHECK(slurp(a / "dataset.jsonl") == slurp(b / "dataset.jsonl"));

  Dataset ds = load_dataset((a / "dataset.jsonl").string());
  CHECK(ds.items.size() == 6 * 30);
  CHECK(ds.n_classes() == 6);

  // a different seed produces different data
  fs::path c = fresh_dir("cli_gen_c");
  REQUIRE(run_cli({"gen-data", "--config", cfg.string(), "--seed", "8",
                   "--out", c.string()}) == 0);
  CHECK(slurp(c / "dataset.jsonl") != slurp(a / "dataset.jsonl"));
}

TEST_CASE("cli: train then eval, byte-identical across reruns") {
  nlohmann::json j = base_config();
  j["test_classes"] = 3;  // 3-way eval episodes need 3 held-out classes
  j["encoder"] = {{"kind", "mlp"}, {"layers", {4, 3}}, {"activation", "tanh"}};
  j["encoder_lr"] = 0.01;

  auto run_pair = [&](const std::string& name) {
    fs::path dir = fresh_dir(name);
    fs::path cfg = write_config(dir, j);
    REQUIRE(run_cli({"train", "--config", cfg.string(), "--out",
                     dir.string()}) == 0);
    REQUIRE(fs::exists(dir / "checkpoint.json"));
    REQUIRE(run_cli({"eval", "--config", cfg.string(), "--out",
                     dir.string()}) == 0);
    REQUIRE(fs::exists(dir / "metrics.csv"));
    return slurp(dir / "metrics.csv");
  };
  std::string m1 = run_pair("cli_te_a");
  std::string m2 = run_pair("cli_te_b");
  CHECK(m1 == m2);

  auto rows = lines_of(m1);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "metric,value,ci95_halfwidth,n");
  // the accuracy row parses and is a probability
  std::istringstream in(rows[1]);
  std::string name, value;
  std::getline(in, name, ',');
  std::getline(in, value, ',');
  CHECK(name == "accuracy");
  double acc = std::stod(value);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_CASE("cli: eval without a checkpoint uses the fresh encoder") {
  fs::path dir = fresh_dir("cli_eval_fresh");
  fs::path cfg = write_config(dir, base_config());
  REQUIRE(run_cli({"eval", "--config", cfg.string(), "--out",
                   dir.string()}) == 0);
  CHECK(fs::exists(dir / "metrics.csv"));

  // but an explicitly configured checkpoint path must exist
  nlohmann::json j = base_config();
  j["checkpoint"] = (dir / "ghost.json").string();
  fs::path cfg2 = write_config(fresh_dir("cli_eval_ghost"), j);
  CHECK(run_cli({"eval", "--config", cfg2.string(), "--out",
                 dir.string()}) != 0);
}

TEST_CASE("cli: radius dynamics trace") {
  fs::path dir = fresh_dir("cli_radius");
  nlohmann::json j = base_config();
  j["warmup_steps"] = 40;
  j["total_steps"] = 120;
  j["log_every"] = 20;
  j["anchor_class"] = 0;
  fs::path cfg = write_config(dir, j);
  REQUIRE(run_cli({"radius-dynamics", "--config", cfg.string(), "--out",
                   dir.string()}) == 0);
  auto rows = lines_of(slurp(dir / "radius_trace.csv"));
  REQUIRE(rows.size() == 1 + 4);  // header + (120-40)/20
  CHECK(rows[0] == "step,mean_sq_dist,radius,accuracy");
  long prev = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    long step = std::stol(rows[i].substr(0, rows[i].find(',')));
    CHECK(step > prev);
    prev = step;
  }
}

TEST_CASE("cli: export matrices") {
  fs::path dir = fresh_dir("cli_export");
  nlohmann::json j = base_config();
  j["export_classes"] = 4;
  j["export_per_class"] = 3;
  fs::path cfg = write_config(dir, j);
  REQUIRE(run_cli({"export-matrices", "--config", cfg.string(), "--out",
                   dir.string()}) == 0);
  auto dist = lines_of(slurp(dir / "distance_matrix.csv"));
  auto sim = lines_of(slurp(dir / "similarity_matrix.csv"));
  CHECK(dist.size() == 12);  // 4*3 instances
  CHECK(sim.size() == 12);
  CHECK(std::count(sim[0].begin(), sim[0].end(), ',') == 11);
  CHECK(std::count(dist[0].begin(), dist[0].end(), ',') == 3);
}

TEST_CASE("cli: shot sweep") {
  fs::path dir = fresh_dir("cli_sweep");
  nlohmann::json j = base_config();
  j["steps"] = 10;
  j["eval_episodes"] = 10;
  j["shots"] = {1, 2};
  fs::path cfg = write_config(dir, j);
  REQUIRE(run_cli({"shot-sweep", "--config", cfg.string(), "--out",
                   dir.string()}) == 0);
  auto rows = lines_of(slurp(dir / "shot_sweep.csv"));
  REQUIRE(rows.size() == 1 + 4);  // 2 variants x 2 shots
  CHECK(rows[0] == "variant,shot,accuracy,ci95_halfwidth,n");
  CHECK(rows[1].substr(0, rows[1].find(',')) == "hypersphere");

  fs::path dir2 = fresh_dir("cli_sweep_b");
  REQUIRE(run_cli({"shot-sweep", "--config", cfg.string(), "--out",
                   dir2.string()}) == 0);
  CHECK(slurp(dir / "shot_sweep.csv") == slurp(dir2 / "shot_sweep.csv"));
}
