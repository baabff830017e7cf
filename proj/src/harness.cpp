// Experiment front end: JSON run configs, JSONL dataset I/O, CSV emission,
// the gradient-check suite, and the CLI dispatcher.
#include "fewshot/harness.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <utility>

namespace fs = std::filesystem;

namespace fewshot {
namespace {

// ---------------------------------------------------------------- config --

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw std::invalid_argument("unknown key \"" + key + "\" in " + where);
  }
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& key,
            const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(where + "." + key + ": " + e.what());
  }
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation \"" + s + "\"");
}

EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config.encoder: expected an object");
  check_keys(j, {"kind", "layers", "activation"}, "config.encoder");
  EncoderSpec spec;
  spec.kind = get_field<std::string>(j, "kind", "config.encoder");
  if (j.contains("layers"))
    spec.layers = get_field<std::vector<int>>(j, "layers", "config.encoder");
  if (j.contains("activation"))
    spec.activation = activation_from_string(
        get_field<std::string>(j, "activation", "config.encoder"));
  if (spec.kind == "identity") {
    require(spec.layers.empty(), "identity encoder takes no layers");
  } else if (spec.kind == "mlp") {
    require(!spec.layers.empty(), "mlp encoder needs a non-empty layers list");
    for (int w : spec.layers)
      require(w >= 1, "mlp encoder: layer widths must be >= 1");
  } else {
    throw std::invalid_argument("unknown encoder kind \"" + spec.kind + "\"");
  }
  return spec;
}

MixtureSpec mixture_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config.mixture: expected an object");
  // no "seed" key on purpose: data randomness flows from the run seed
  check_keys(j,
             {"n_classes", "dim", "samples_per_class", "mean_scale",
              "sigma_lo", "sigma_hi"},
             "config.mixture");
  MixtureSpec spec;
  spec.n_classes = get_field<int>(j, "n_classes", "config.mixture");
  spec.dim = get_field<int>(j, "dim", "config.mixture");
  spec.samples_per_class =
      get_field<int>(j, "samples_per_class", "config.mixture");
  spec.mean_scale = get_field<double>(j, "mean_scale", "config.mixture");
  spec.sigma_lo = get_field<double>(j, "sigma_lo", "config.mixture");
  spec.sigma_hi = get_field<double>(j, "sigma_hi", "config.mixture");
  return spec;
}

// ----------------------------------------------------------------- files --

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good())
    throw std::runtime_error("cannot open " + path + " for writing");
  return out;
}

void finish_out(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out.good()) throw std::runtime_error("write failed: " + path);
}

void write_matrix_csv(const Matrix& m, const std::string& path) {
  std::ofstream out = open_out(path);
  char buf[32];
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", m.at(r, c));
      if (c > 0) out << ',';
      out << buf;
    }
    out << '\n';
  }
  finish_out(out, path);
}

// ------------------------------------------------------ matrix sampling --

struct SampledEmbeddings {
  std::vector<int> classes;                  // ascending
  std::vector<std::vector<Vec>> embeddings;  // [class][instance]
};

SampledEmbeddings sample_embeddings(const MlpEncoder& enc, const Dataset& ds,
                                    int n_classes, int n_per_class, Rng& rng) {
  require(n_classes >= 1 && n_per_class >= 1,
          "matrix export: sample counts must be >= 1");
  std::vector<int> ids;
  for (const auto& [c, idx] : ds.class_index) {
    (void)idx;
    ids.push_back(c);
  }
  if (static_cast<int>(ids.size()) < n_classes)
    throw SamplingError("matrix export needs " + std::to_string(n_classes) +
                        " classes, dataset has " + std::to_string(ids.size()));
  rng.partial_shuffle(ids, static_cast<std::size_t>(n_classes));
  ids.resize(n_classes);
  std::sort(ids.begin(), ids.end());

  SampledEmbeddings s;
  s.classes = ids;
  for (int c : ids) {
    std::vector<std::size_t> pool = ds.class_index.at(c);
    if (static_cast<int>(pool.size()) < n_per_class)
      throw SamplingError("matrix export: class " + std::to_string(c) +
                          " has " + std::to_string(pool.size()) +
                          " items, need " + std::to_string(n_per_class));
    rng.partial_shuffle(pool, static_cast<std::size_t>(n_per_class));
    std::vector<Vec> embs;
    for (int i = 0; i < n_per_class; ++i)
      embs.push_back(forward(enc, ds.items[pool[i]].features).first);
    s.embeddings.push_back(std::move(embs));
  }
  return s;
}

// ------------------------------------------------- gradient-check probes --

Vec rand_vec(Rng& rng, std::size_t dim, double scale) {
  Vec v(dim);
  for (auto& x : v) x = (2.0 * rng.next_double() - 1.0) * scale;
  return v;
}

double angle_between(const Vec& a, const Vec& b) {
  return safe_arccos(clamped_cosine(dot(a, b) / (norm(a) * norm(b))));
}

// Central differences resolve gradients down to ~1e-11 here; a nonzero
// analytic coordinate below that is correct but unverifiable, so such draws
// are rejected rather than asserted on.
bool grad_too_small_to_resolve(const Vec& g) {
  for (double a : g)
    if (a != 0.0 && std::abs(a) < 1e-9) return true;
  return false;
}

constexpr double kFdStep = 1e-5;
constexpr double kRejected = -1.0;  // probe result: config not FD-checkable

double probe_hypersphere(Rng& rng) {
  std::size_t d = 1 + rng.next_below(5);
  Vec f = rand_vec(rng, d, 2.0), z = rand_vec(rng, d, 2.0);
  double eps = 2.0 * rng.next_double() - 1.0;
  auto m = measure_hypersphere(f, {z, eps});

  Vec point = f;
  point.insert(point.end(), z.begin(), z.end());
  point.push_back(eps);
  Vec analytic = m.grad_embedding;
  analytic.insert(analytic.end(), m.grad_center.begin(), m.grad_center.end());
  analytic.push_back(m.grad_scale);
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  auto fn = [&](const Vec& p) {
    Vec pf(p.begin(), p.begin() + d), pz(p.begin() + d, p.begin() + 2 * d);
    return measure_hypersphere(pf, {pz, p[2 * d]}).value;
  };
  return finite_diff_check(fn, point, analytic, kFdStep);
}

double probe_cone(Rng& rng) {
  std::size_t d = 2 + rng.next_below(4);
  Vec f = rand_vec(rng, d, 2.0), z = rand_vec(rng, d, 2.0);
  if (norm(f) < 0.3 || norm(z) < 0.3) return kRejected;
  double eps = (rng.next_double() < 0.5 ? -1.0 : 1.0) *
               (0.05 + 1.2 * rng.next_double());
  double theta = angle_between(f, z);
  // keep clear of the branch point and of the arccos clamp region
  if (std::abs(theta - std::abs(eps)) < 1e-3) return kRejected;
  if (theta < 0.05 || theta > M_PI - 0.05) return kRejected;

  auto m = measure_cone(f, {z, eps});
  Vec point = f;
  point.insert(point.end(), z.begin(), z.end());
  point.push_back(eps);
  Vec analytic = m.grad_embedding;
  analytic.insert(analytic.end(), m.grad_center.begin(), m.grad_center.end());
  analytic.push_back(m.grad_scale);
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  auto fn = [&](const Vec& p) {
    Vec pf(p.begin(), p.begin() + d), pz(p.begin() + d, p.begin() + 2 * d);
    return measure_cone(pf, {pz, p[2 * d]}).value;
  };
  return finite_diff_check(fn, point, analytic, kFdStep);
}

double probe_gaussian(Rng& rng) {
  std::size_t d = 1 + rng.next_below(5);
  Vec f = rand_vec(rng, d, 2.0), mu = rand_vec(rng, d, 2.0);
  double ls = 2.0 * rng.next_double() - 1.0;
  auto m = measure_gaussian(f, {mu, ls});

  Vec point = f;
  point.insert(point.end(), mu.begin(), mu.end());
  point.push_back(ls);
  Vec analytic = m.grad_embedding;
  analytic.insert(analytic.end(), m.grad_center.begin(), m.grad_center.end());
  analytic.push_back(m.grad_scale);
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  auto fn = [&](const Vec& p) {
    Vec pf(p.begin(), p.begin() + d), pm(p.begin() + d, p.begin() + 2 * d);
    return measure_gaussian(pf, {pm, p[2 * d]}).value;
  };
  return finite_diff_check(fn, point, analytic, kFdStep);
}

double probe_disjointness(Rng& rng) {
  std::size_t n = 2 + rng.next_below(3), d = 2 + rng.next_below(3);
  std::vector<ConeProto> protos;
  for (std::size_t i = 0; i < n; ++i) {
    Vec z = rand_vec(rng, d, 2.0);
    if (norm(z) < 0.3) return kRejected;
    double eps = (rng.next_double() < 0.5 ? -1.0 : 1.0) *
                 (0.05 + 0.8 * rng.next_double());
    protos.push_back({z, eps});
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double th = angle_between(protos[i].center, protos[j].center);
      double slack =
          std::abs(protos[i].angle) + std::abs(protos[j].angle) - th;
      if (std::abs(slack) < 1e-3 || th < 0.05 || th > M_PI - 0.05)
        return kRejected;
    }

  auto res = cone_disjointness(protos);
  Vec point, analytic;
  for (std::size_t i = 0; i < n; ++i) {
    point.insert(point.end(), protos[i].center.begin(),
                 protos[i].center.end());
    point.push_back(protos[i].angle);
    analytic.insert(analytic.end(), res.grad_centers[i].begin(),
                    res.grad_centers[i].end());
    analytic.push_back(res.grad_angles[i]);
  }
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  auto fn = [&](const Vec& p) {
    std::vector<ConeProto> probe;
    std::size_t at = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Vec z(p.begin() + at, p.begin() + at + d);
      probe.push_back({z, p[at + d]});
      at += d + 1;
    }
    return cone_disjointness(probe).value;
  };
  return finite_diff_check(fn, point, analytic, kFdStep);
}

double probe_encoder(Rng& rng, Activation act) {
  std::vector<int> dims = {2 + static_cast<int>(rng.next_below(3)),
                           2 + static_cast<int>(rng.next_below(4)),
                           2 + static_cast<int>(rng.next_below(4)),
                           1 + static_cast<int>(rng.next_below(3))};
  Rng init = rng.fork(1);
  MlpEncoder enc = init_mlp(dims, act, init);
  Vec x(dims[0]);
  for (auto& v : x) v = 2.0 * rng.next_double() - 1.0;
  auto [y, tape] = forward(enc, x);
  (void)y;
  if (act == Activation::relu) {
    // finite differences cannot straddle the relu kink
    for (const auto& z : tape.pre_activations)
      for (double v : z)
        if (std::abs(v) < 1e-3) return kRejected;
  }
  Vec gout(enc.output_dim());
  for (auto& v : gout) v = 2.0 * rng.next_double() - 1.0;

  EncoderGrads g = backward(enc, tape, gout);
  Vec point = enc.params_flat();
  point.insert(point.end(), x.begin(), x.end());
  Vec analytic = grads_flat(enc, g);
  analytic.insert(analytic.end(), g.input_grad.begin(), g.input_grad.end());
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  std::size_t np = enc.param_count();
  auto fn = [&](const Vec& p) {
    MlpEncoder probe = enc;
    probe.set_params_flat(Vec(p.begin(), p.begin() + np));
    Vec px(p.begin() + np, p.end());
    return dot(gout, forward(probe, px).first);
  };
  return finite_diff_check(fn, point, analytic, kFdStep);
}

// Flattened [encoder params..., proto params per class in id order] view of
// an episode-loss configuration, for finite-difference probing.
struct LossProbe {
  MlpEncoder enc;
  std::map<int, AnyProto> protos;
  std::vector<std::pair<Vec, int>> queries;
  Variant variant = Variant::hypersphere;

  Vec pack() const {
    Vec p = enc.params_flat();
    for (const auto& [c, pr] : protos) {
      (void)c;
      Vec q = proto_params(pr);
      p.insert(p.end(), q.begin(), q.end());
    }
    return p;
  }

  void unpack(const Vec& p) {
    std::size_t off = enc.param_count();
    enc.set_params_flat(Vec(p.begin(), p.begin() + off));
    for (auto& [c, pr] : protos) {
      (void)c;
      std::size_t k = proto_params(pr).size();
      set_proto_params(pr, Vec(p.begin() + off, p.begin() + off + k));
      off += k;
    }
    require(off == p.size(), "probe: length mismatch");
  }

  double value_at(const Vec& p) const {
    LossProbe tmp = *this;
    tmp.unpack(p);
    return episode_loss(tmp.enc, tmp.protos, tmp.queries, tmp.variant).value;
  }

  Vec analytic_grad() const {
    EpisodeLoss el = episode_loss(enc, protos, queries, variant);
    Vec g = grads_flat(enc, el.encoder_grads);
    for (const auto& [c, pr] : protos) {
      (void)pr;
      const ProtoGrads& pg = el.proto_grads.at(c);
      g.insert(g.end(), pg.center.begin(), pg.center.end());
      g.push_back(pg.scale);
    }
    return g;
  }
};

bool cone_probe_near_boundary(const LossProbe& probe) {
  std::vector<ConeProto> cones;
  for (const auto& [c, pr] : probe.protos) {
    (void)c;
    cones.push_back(std::get<ConeProto>(pr));
    if (norm(cones.back().center) < 0.05) return true;
  }
  for (const auto& [f, label] : probe.queries) {
    (void)label;
    Vec emb = forward(probe.enc, f).first;
    // tiny embeddings put the angle gradient near a 1/||f|| singularity,
    // beyond what central differences can resolve
    if (norm(emb) < 0.05) return true;
    for (const auto& p : cones) {
      double theta = angle_between(emb, p.center);
      if (std::abs(theta - std::abs(p.angle)) < 1e-3) return true;
      if (theta < 0.05 || theta > 3.09) return true;
    }
  }
  for (std::size_t i = 0; i < cones.size(); ++i)
    for (std::size_t j = i + 1; j < cones.size(); ++j) {
      double theta = angle_between(cones[i].center, cones[j].center);
      double gap = std::abs(cones[i].angle) + std::abs(cones[j].angle) - theta;
      if (std::abs(gap) < 1e-3) return true;
      if (theta < 0.05 || theta > 3.09) return true;
    }
  return false;
}

double probe_episode_loss(Rng& rng, Variant variant) {
  LossProbe probe;
  probe.variant = variant;
  bool use_mlp = rng.next_below(2) == 0;
  // tanh keeps the probe away from relu kinks, which finite differences
  // cannot straddle; relu itself is covered by the encoder cases
  probe.enc = use_mlp ? init_mlp({3, 4, 2}, Activation::tanh, rng)
                      : identity_encoder(3);
  int dim = probe.enc.output_dim();
  int n = 2 + static_cast<int>(rng.next_below(2));
  for (int c = 0; c < n; ++c) {
    if (variant == Variant::cone) {
      Vec z = rand_vec(rng, dim, 1.0);
      if (norm(z) < 0.3) z[0] += 1.0;
      probe.protos.emplace(c, ConeProto{z, 0.3 + 0.5 * rng.next_double()});
    } else if (variant == Variant::gaussian) {
      probe.protos.emplace(c,
                           GaussianProto{rand_vec(rng, dim, 2.0),
                                         0.5 * (2.0 * rng.next_double() - 1.0)});
    } else {
      probe.protos.emplace(c, HypersphereProto{rand_vec(rng, dim, 2.0),
                                               2.0 * rng.next_double() - 1.0});
    }
  }
  int n_q = 1 + static_cast<int>(rng.next_below(3));
  for (int q = 0; q < n_q; ++q) {
    Vec x = rand_vec(rng, probe.enc.input_dim(), 1.5);
    if (variant == Variant::cone && !use_mlp && norm(x) < 0.3) x[0] += 1.0;
    probe.queries.emplace_back(x, static_cast<int>(rng.next_below(n)));
  }

  if (variant == Variant::cone && cone_probe_near_boundary(probe))
    return kRejected;
  Vec analytic = probe.analytic_grad();
  if (grad_too_small_to_resolve(analytic)) return kRejected;

  auto fn = [&probe](const Vec& p) { return probe.value_at(p); };
  return finite_diff_check(fn, probe.pack(), analytic, kFdStep);
}

// ------------------------------------------------------------ run plumbing --

Dataset load_source(const RunConfig& cfg, const Rng& root) {
  if (cfg.has_mixture) {
    MixtureSpec spec = cfg.mixture;
    Rng data = root.fork(kStreamData);
    spec.seed = data.next_u64();
    return make_gaussian_mixture(spec);
  }
  if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
  throw std::invalid_argument(
      "config needs a data source: \"mixture\" or \"dataset\"");
}

// test_classes > 0 splits off whole classes: training commands see the first
// half, evaluation/export commands the held-out second half.
std::pair<Dataset, Dataset> train_eval_split(const RunConfig& cfg,
                                             const Dataset& ds,
                                             const Rng& root) {
  if (cfg.test_classes <= 0) return {ds, ds};
  Rng split_rng = root.fork(kStreamData).fork(1);
  return split_train_test_classes(ds, cfg.test_classes, split_rng);
}

MlpEncoder make_encoder(const EncoderSpec& spec, int input_dim, Rng& rng) {
  if (spec.kind == "identity") return identity_encoder(input_dim);
  std::vector<int> dims = {input_dim};
  dims.insert(dims.end(), spec.layers.begin(), spec.layers.end());
  return init_mlp(dims, spec.activation, rng);
}

MlpEncoder build_encoder(const RunConfig& cfg, int input_dim,
                         const Rng& root) {
  Rng enc_rng = root.fork(kStreamInit).fork(0);
  return make_encoder(cfg.encoder, input_dim, enc_rng);
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& out) {
  return cfg.checkpoint.empty() ? fs::path(out) / "checkpoint.json"
                                : fs::path(cfg.checkpoint);
}

// An explicitly configured checkpoint must exist; the implicit
// <out>/checkpoint.json falls back to a freshly seeded encoder so
// evaluation works standalone.
MlpEncoder resolve_encoder(const RunConfig& cfg, const std::string& out,
                           int input_dim, const Rng& root) {
  fs::path ck = checkpoint_path(cfg, out);
  if (fs::exists(ck)) {
    std::ifstream in(ck, std::ios::binary);
    if (!in.good())
      throw std::runtime_error("cannot open checkpoint " + ck.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(ck.string() + ": " + e.what());
    }
    return train_state_from_json(j).encoder;
  }
  if (!cfg.checkpoint.empty())
    throw std::runtime_error("checkpoint file " + cfg.checkpoint +
                             " does not exist");
  return build_encoder(cfg, input_dim, root);
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config: expected a JSON object");
  check_keys(j,
             {"variant", "mode", "n_way", "k_shot", "k_query", "steps",
              "encoder_lr", "scale_lr", "encoder_opt", "scale_opt", "seed",
              "eval_episodes", "mixture", "dataset", "test_classes",
              "encoder", "jobs", "checkpoint", "warmup_steps", "total_steps",
              "log_every", "anchor_class", "retry_limit", "export_classes",
              "export_per_class", "shots"},
             "config");

  RunConfig cfg;
  if (j.contains("variant"))
    cfg.train.variant =
        variant_from_string(get_field<std::string>(j, "variant", "config"));
  if (j.contains("mode"))
    cfg.train.mode =
        mode_from_string(get_field<std::string>(j, "mode", "config"));
  if (j.contains("encoder_opt"))
    cfg.train.encoder_opt = optimizer_from_string(
        get_field<std::string>(j, "encoder_opt", "config"));
  if (j.contains("scale_opt"))
    cfg.train.scale_opt =
        optimizer_from_string(get_field<std::string>(j, "scale_opt", "config"));
  if (j.contains("n_way")) cfg.train.n_way = get_field<int>(j, "n_way", "config");
  if (j.contains("k_shot"))
    cfg.train.k_shot = get_field<int>(j, "k_shot", "config");
  if (j.contains("k_query"))
    cfg.train.k_query = get_field<int>(j, "k_query", "config");
  if (j.contains("steps")) cfg.train.steps = get_field<int>(j, "steps", "config");
  if (j.contains("encoder_lr"))
    cfg.train.encoder_lr = get_field<double>(j, "encoder_lr", "config");
  if (j.contains("scale_lr"))
    cfg.train.scale_lr = get_field<double>(j, "scale_lr", "config");
  if (j.contains("seed"))
    cfg.train.seed = get_field<std::uint64_t>(j, "seed", "config");
  if (j.contains("eval_episodes"))
    cfg.train.eval_episodes = get_field<int>(j, "eval_episodes", "config");
  cfg.train.validate();

  if (j.contains("mixture")) {
    cfg.has_mixture = true;
    cfg.mixture = mixture_from_json(j.at("mixture"));
  }
  if (j.contains("dataset"))
    cfg.dataset_path = get_field<std::string>(j, "dataset", "config");
  require(!(cfg.has_mixture && !cfg.dataset_path.empty()),
          "config: \"mixture\" and \"dataset\" are mutually exclusive");

  if (j.contains("test_classes")) {
    cfg.test_classes = get_field<int>(j, "test_classes", "config");
    require(cfg.test_classes >= 0, "config: test_classes must be >= 0");
  }
  if (j.contains("encoder")) cfg.encoder = encoder_spec_from_json(j.at("encoder"));
  if (j.contains("jobs")) {
    cfg.jobs = get_field<int>(j, "jobs", "config");
    require(cfg.jobs >= 1, "config: jobs must be >= 1");
  }
  if (j.contains("checkpoint"))
    cfg.checkpoint = get_field<std::string>(j, "checkpoint", "config");

  if (j.contains("warmup_steps"))
    cfg.warmup_steps = get_field<int>(j, "warmup_steps", "config");
  if (j.contains("total_steps"))
    cfg.total_steps = get_field<int>(j, "total_steps", "config");
  if (j.contains("log_every"))
    cfg.log_every = get_field<int>(j, "log_every", "config");
  if (j.contains("anchor_class"))
    cfg.anchor_class = get_field<int>(j, "anchor_class", "config");
  if (j.contains("retry_limit"))
    cfg.retry_limit = get_field<int>(j, "retry_limit", "config");

  if (j.contains("export_classes")) {
    cfg.export_classes = get_field<int>(j, "export_classes", "config");
    require(cfg.export_classes >= 1, "config: export_classes must be >= 1");
  }
  if (j.contains("export_per_class")) {
    cfg.export_per_class = get_field<int>(j, "export_per_class", "config");
    require(cfg.export_per_class >= 1,
            "config: export_per_class must be >= 1");
  }
  if (j.contains("shots")) {
    cfg.shots = get_field<std::vector<int>>(j, "shots", "config");
    for (int s : cfg.shots) require(s >= 1, "config: shots must be >= 1");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw std::runtime_error("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw std::runtime_error("cannot open dataset file " + path);
  std::vector<Dataset::Item> items;
  std::string line;
  long line_no = 0;
  auto fail = [&](const std::string& what) -> void {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                             what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded()) fail("not valid JSON");
    if (!obj.is_object()) fail("expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
      (void)value;
      if (key != "features" && key != "label")
        fail("unknown key \"" + key + "\"");
    }
    if (!obj.contains("features") || !obj.at("features").is_array())
      fail("\"features\" must be an array of numbers");
    if (!obj.contains("label") || !obj.at("label").is_number_integer())
      fail("\"label\" must be an integer");
    Dataset::Item item;
    for (const auto& v : obj.at("features")) {
      if (!v.is_number()) fail("\"features\" must be an array of numbers");
      item.features.push_back(v.get<double>());
    }
    item.label = obj.at("label").get<int>();
    items.push_back(std::move(item));
  }
  try {
    return Dataset::from_items(std::move(items));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out = open_out(path);
  for (const auto& item : ds.items) {
    nlohmann::json obj{{"features", item.features}, {"label", item.label}};
    out << obj.dump() << '\n';
  }
  finish_out(out, path);
}

MultiLabelDataset load_multilabel_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw std::runtime_error("cannot open dataset file " + path);
  MultiLabelDataset ds;
  std::string line;
  long line_no = 0;
  auto fail = [&](const std::string& what) -> void {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                             what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded()) fail("not valid JSON");
    if (!obj.is_object()) fail("expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
      (void)value;
      if (key != "id" && key != "labels") fail("unknown key \"" + key + "\"");
    }
    if (!obj.contains("id") || !obj.at("id").is_number_integer())
      fail("\"id\" must be an integer");
    if (!obj.contains("labels") || !obj.at("labels").is_object())
      fail("\"labels\" must be an object");
    MultiLabelDataset::Item item;
    item.id = obj.at("id").get<int>();
    for (const auto& [key, value] : obj.at("labels").items()) {
      int cls = 0;
      try {
        std::size_t pos = 0;
        cls = std::stoi(key, &pos);
        if (pos != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        fail("class key \"" + key + "\" is not an integer");
      }
      if (cls < 0) fail("class key \"" + key + "\" is negative");
      if (!value.is_number_integer() || value.get<long>() < 1)
        fail("count for class \"" + key + "\" must be an integer >= 1");
      item.labels[cls] = value.get<int>();
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

void save_multilabel_dataset(const MultiLabelDataset& ds,
                             const std::string& path) {
  std::ofstream out = open_out(path);
  for (const auto& item : ds.items) {
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [cls, count] : item.labels)
      labels[std::to_string(cls)] = count;
    nlohmann::json obj{{"id", item.id}, {"labels", labels}};
    out << obj.dump() << '\n';
  }
  finish_out(out, path);
}

void write_metrics_csv(const Metrics& m, const std::string& path) {
  require(m.n_episodes >= 1, "metrics over zero episodes cannot be written");
  std::ofstream out = open_out(path);
  char buf[128];
  out << "metric,value,ci95_halfwidth,n\n";
  std::snprintf(buf, sizeof buf, "accuracy,%.6f,%.6f,%ld\n", m.accuracy,
                m.ci95_halfwidth, m.n_episodes);
  out << buf;
  std::snprintf(buf, sizeof buf, "precision,%.6f,0.000000,%ld\n", m.precision,
                m.n_episodes);
  out << buf;
  std::snprintf(buf, sizeof buf, "recall,%.6f,0.000000,%ld\n", m.recall,
                m.n_episodes);
  out << buf;
  std::snprintf(buf, sizeof buf, "f1,%.6f,0.000000,%ld\n", m.f1, m.n_episodes);
  out << buf;
  finish_out(out, path);
}

Matrix export_distance_matrix(const MlpEncoder& enc, const Dataset& ds,
                              int n_classes, int n_per_class, Rng& rng,
                              const std::string& path) {
  SampledEmbeddings s = sample_embeddings(enc, ds, n_classes, n_per_class, rng);
  std::vector<HypersphereProto> protos;
  for (const auto& embs : s.embeddings) protos.push_back(init_hypersphere(embs));

  Matrix m;
  m.rows = static_cast<std::size_t>(n_classes) * n_per_class;
  m.cols = static_cast<std::size_t>(n_classes);
  m.data.assign(m.rows * m.cols, 0.0);
  std::size_t r = 0;
  for (const auto& embs : s.embeddings)
    for (const auto& emb : embs) {
      for (std::size_t c = 0; c < m.cols; ++c)
        m.at(r, c) = measure_hypersphere(emb, protos[c]).value;
      ++r;
    }

  auto [lo_it, hi_it] = std::minmax_element(m.data.begin(), m.data.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi > lo)
    for (auto& x : m.data) x = (x - lo) / (hi - lo);
  else
    for (auto& x : m.data) x = 0.0;

  write_matrix_csv(m, path);
  return m;
}

Matrix export_similarity_matrix(const MlpEncoder& enc, const Dataset& ds,
                                int n_classes, int n_per_class, Rng& rng,
                                const std::string& path) {
  SampledEmbeddings s = sample_embeddings(enc, ds, n_classes, n_per_class, rng);
  std::vector<Vec> flat;
  std::vector<double> norms;
  for (const auto& embs : s.embeddings)
    for (const auto& emb : embs) {
      double n = norm(emb);
      require(n > 0.0, "zero-norm embedding has no cosine similarity");
      flat.push_back(emb);
      norms.push_back(n);
    }

  Matrix m;
  m.rows = m.cols = flat.size();
  m.data.assign(m.rows * m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j)
      m.at(i, j) = dot(flat[i], flat[j]) / (norms[i] * norms[j]);

  write_matrix_csv(m, path);
  return m;
}

void write_radius_trace_csv(const std::vector<RadiusTraceRow>& trace,
                            const std::string& path) {
  std::ofstream out = open_out(path);
  out << "step,mean_sq_dist,radius,accuracy\n";
  char buf[128];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof buf, "%ld,%.6f,%.6f,%.6f\n", row.step,
                  row.mean_sq_dist, row.radius, row.accuracy);
    out << buf;
  }
  finish_out(out, path);
}

std::vector<GradCheckResult> run_grad_checks(int configs_per_case,
                                             std::uint64_t seed) {
  require(configs_per_case >= 1, "grad checks need at least one configuration");
  struct Case {
    std::string name;
    double tol;
    std::function<double(Rng&)> probe;
  };
  const std::vector<Case> cases = {
      {"hypersphere measurement", 1e-6, probe_hypersphere},
      {"cone measurement", 1e-6, probe_cone},
      {"gaussian measurement", 1e-6, probe_gaussian},
      {"cone disjointness", 1e-5, probe_disjointness},
      {"encoder backward relu", 1e-5,
       [](Rng& r) { return probe_encoder(r, Activation::relu); }},
      {"encoder backward tanh", 1e-5,
       [](Rng& r) { return probe_encoder(r, Activation::tanh); }},
      {"episode loss hypersphere", 1e-5,
       [](Rng& r) { return probe_episode_loss(r, Variant::hypersphere); }},
      {"episode loss cone", 1e-5,
       [](Rng& r) { return probe_episode_loss(r, Variant::cone); }},
      {"episode loss gaussian", 1e-5,
       [](Rng& r) { return probe_episode_loss(r, Variant::gaussian); }},
  };

  std::vector<GradCheckResult> out;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    Rng rng(seed, 17 + ci);
    GradCheckResult r;
    r.name = cases[ci].name;
    r.tolerance = cases[ci].tol;
    long attempts = 0;
    while (r.configs < configs_per_case) {
      if (++attempts > 100L * configs_per_case + 1000)
        throw std::runtime_error("gradient check \"" + r.name +
                                 "\" rejected too many configurations");
      Rng trial = rng.fork(static_cast<std::uint64_t>(attempts));
      double err = cases[ci].probe(trial);
      if (err < 0.0) continue;
      r.max_rel_err = std::max(r.max_rel_err, err);
      ++r.configs;
    }
    r.pass = r.max_rel_err < r.tolerance;
    out.push_back(std::move(r));
  }
  return out;
}

int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"prototype-based few-shot learning experiments"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::string out = ".";
    std::uint64_t seed = 0;
    int jobs = 0;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* jobs_opt = nullptr;
  };
  auto add_common = [](CLI::App* sub, Common& c, bool config_required) {
    auto* opt = sub->add_option("--config", c.config, "JSON run config");
    if (config_required) opt->required();
    sub->add_option("--out", c.out, "output directory (default: .)");
    c.seed_opt = sub->add_option("--seed", c.seed, "override the config seed");
    c.jobs_opt =
        sub->add_option("--jobs", c.jobs, "override evaluation parallelism");
  };
  auto resolve = [](const Common& c) {
    RunConfig cfg = load_run_config(c.config);
    if (c.seed_opt->count() > 0) cfg.train.seed = c.seed;
    if (c.jobs_opt->count() > 0) {
      require(c.jobs >= 1, "--jobs must be >= 1");
      cfg.jobs = c.jobs;
    }
    return cfg;
  };
  auto out_file = [](const Common& c, const char* name) {
    fs::create_directories(c.out);
    return (fs::path(c.out) / name).string();
  };

  Common gen_c, train_c, eval_c, grad_c, rd_c, em_c, ss_c;

  CLI::App* gen =
      app.add_subcommand("gen-data", "generate a synthetic mixture dataset");
  add_common(gen, gen_c, true);
  gen->callback([&]() {
    RunConfig cfg = resolve(gen_c);
    require(cfg.has_mixture, "gen-data needs a \"mixture\" config section");
    Rng root(cfg.train.seed);
    Dataset ds = load_source(cfg, root);
    std::string path = out_file(gen_c, "dataset.jsonl");
    save_dataset(ds, path);
    std::cout << "wrote " << ds.items.size() << " items across "
              << ds.n_classes() << " classes to " << path << "\n";
  });

  CLI::App* train =
      app.add_subcommand("train", "train an encoder and prototype store");
  add_common(train, train_c, true);
  train->callback([&]() {
    RunConfig cfg = resolve(train_c);
    Rng root(cfg.train.seed);
    Dataset full = load_source(cfg, root);
    auto [train_ds, eval_ds] = train_eval_split(cfg, full, root);
    (void)eval_ds;
    MlpEncoder enc = build_encoder(cfg, full.feature_dim(), root);
    Rng store_rng = root.fork(kStreamInit).fork(1);
    TrainState st = init_training(train_ds, std::move(enc), cfg.train, store_rng);
    Rng ep_rng = root.fork(kStreamEpisodes);
    double last = 0.0;
    for (int s = 0; s < cfg.train.steps; ++s)
      last = train_step(st, train_ds, cfg.train, ep_rng);
    fs::create_directories(train_c.out);
    fs::path ck = checkpoint_path(cfg, train_c.out);
    std::ofstream out = open_out(ck.string());
    out << train_state_to_json(st).dump(2) << '\n';
    finish_out(out, ck.string());
    std::cout << "trained " << cfg.train.steps << " steps on "
              << train_ds.n_classes() << " classes (last episode loss " << last
              << "), wrote " << ck.string() << "\n";
  });

  CLI::App* ev =
      app.add_subcommand("eval", "episodic evaluation with confidence interval");
  add_common(ev, eval_c, true);
  ev->callback([&]() {
    RunConfig cfg = resolve(eval_c);
    Rng root(cfg.train.seed);
    Dataset full = load_source(cfg, root);
    auto [train_ds, eval_ds] = train_eval_split(cfg, full, root);
    (void)train_ds;
    MlpEncoder enc = resolve_encoder(cfg, eval_c.out, full.feature_dim(), root);
    Metrics m = evaluate(enc, eval_ds, cfg.train, root.fork(kStreamEval),
                         cfg.jobs);
    std::string path = out_file(eval_c, "metrics.csv");
    write_metrics_csv(m, path);
    char buf[128];
    std::snprintf(buf, sizeof buf, "accuracy %.4f +/- %.4f over %ld episodes",
                  m.accuracy, m.ci95_halfwidth, m.n_episodes);
    std::cout << buf << ", wrote " << path << "\n";
  });

  int gc_configs = 50;
  CLI::App* gc = app.add_subcommand(
      "grad-check", "finite-difference verification of all gradients");
  add_common(gc, grad_c, false);
  gc->add_option("--configs", gc_configs, "configurations per case");
  gc->callback([&]() {
    std::uint64_t seed = 0;
    if (!grad_c.config.empty()) seed = load_run_config(grad_c.config).train.seed;
    if (grad_c.seed_opt->count() > 0) seed = grad_c.seed;
    auto results = run_grad_checks(gc_configs, seed);
    bool all = true;
    for (const auto& r : results) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-26s max rel err %.3e (tol %.0e) %s",
                    r.name.c_str(), r.max_rel_err, r.tolerance,
                    r.pass ? "ok" : "FAIL");
      std::cout << buf << "\n";
      all = all && r.pass;
    }
    if (!all) throw std::runtime_error("gradient checks failed");
  });

  CLI::App* rd = app.add_subcommand(
      "radius-dynamics", "track the anchor-class radius against its spread");
  add_common(rd, rd_c, true);
  rd->callback([&]() {
    RunConfig cfg = resolve(rd_c);
    Rng root(cfg.train.seed);
    Dataset full = load_source(cfg, root);
    auto [train_ds, eval_ds] = train_eval_split(cfg, full, root);
    (void)eval_ds;
    RadiusDynamicsConfig rdc;
    rdc.train = cfg.train;
    rdc.warmup_steps = cfg.warmup_steps;
    rdc.total_steps = cfg.total_steps;
    rdc.log_every = cfg.log_every;
    rdc.anchor_class = cfg.anchor_class;
    rdc.retry_limit = cfg.retry_limit;
    MlpEncoder enc = build_encoder(cfg, full.feature_dim(), root);
    Rng run_rng = root.fork(kStreamEpisodes);
    auto trace = radius_dynamics_run(train_ds, std::move(enc), rdc, run_rng);
    std::string path = out_file(rd_c, "radius_trace.csv");
    write_radius_trace_csv(trace, path);
    std::cout << "wrote " << trace.size() << " trace rows to " << path << "\n";
  });

  CLI::App* em = app.add_subcommand(
      "export-matrices", "distance and similarity matrices for plotting");
  add_common(em, em_c, true);
  em->callback([&]() {
    RunConfig cfg = resolve(em_c);
    Rng root(cfg.train.seed);
    Dataset full = load_source(cfg, root);
    auto [train_ds, eval_ds] = train_eval_split(cfg, full, root);
    (void)train_ds;
    MlpEncoder enc = resolve_encoder(cfg, em_c.out, full.feature_dim(), root);
    Rng export_root = root.fork(kStreamExport);
    Rng dist_rng = export_root.fork(0);
    Rng sim_rng = export_root.fork(1);
    std::string dist_path = out_file(em_c, "distance_matrix.csv");
    std::string sim_path = out_file(em_c, "similarity_matrix.csv");
    Matrix d = export_distance_matrix(enc, eval_ds, cfg.export_classes,
                                      cfg.export_per_class, dist_rng,
                                      dist_path);
    Matrix s = export_similarity_matrix(enc, eval_ds, cfg.export_classes,
                                        cfg.export_per_class, sim_rng,
                                        sim_path);
    std::cout << "wrote " << d.rows << "x" << d.cols << " distances to "
              << dist_path << " and " << s.rows << "x" << s.cols
              << " similarities to " << sim_path << "\n";
  });

  CLI::App* ss = app.add_subcommand(
      "shot-sweep", "train and evaluate hypersphere vs vanilla per shot count");
  add_common(ss, ss_c, true);
  ss->callback([&]() {
    RunConfig cfg = resolve(ss_c);
    require(!cfg.shots.empty(), "shot-sweep needs a non-empty \"shots\" list");
    Rng root(cfg.train.seed);
    Dataset full = load_source(cfg, root);
    auto [train_ds, eval_ds] = train_eval_split(cfg, full, root);
    std::string path = out_file(ss_c, "shot_sweep.csv");
    std::ofstream csv = open_out(path);
    csv << "variant,shot,accuracy,ci95_halfwidth,n\n";
    for (std::size_t si = 0; si < cfg.shots.size(); ++si) {
      for (Variant v : {Variant::hypersphere, Variant::vanilla}) {
        TrainConfig tc = cfg.train;
        tc.k_shot = cfg.shots[si];
        tc.variant = v;
        // paired streams: both variants at one shot count share the encoder
        // init, the episode sequence, and the eval episodes, so rows differ
        // only by variant behavior
        Rng enc_rng = root.fork(kStreamInit).fork(2 * si);
        Rng store_rng = root.fork(kStreamInit).fork(2 * si + 1);
        MlpEncoder enc =
            make_encoder(cfg.encoder, full.feature_dim(), enc_rng);
        TrainState st =
            init_training(train_ds, std::move(enc), tc, store_rng);
        Rng ep_rng = root.fork(kStreamEpisodes).fork(si);
        for (int s = 0; s < tc.steps; ++s)
          train_step(st, train_ds, tc, ep_rng);
        Metrics m = evaluate(st.encoder, eval_ds, tc,
                             root.fork(kStreamEval).fork(si), cfg.jobs);
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%ld\n",
                      to_string(v).c_str(), tc.k_shot, m.accuracy,
                      m.ci95_halfwidth, m.n_episodes);
        csv << buf;
        std::cout << to_string(v) << " " << tc.k_shot << "-shot: accuracy "
                  << m.accuracy << "\n";
      }
    }
    finish_out(csv, path);
    std::cout << "wrote " << path << "\n";
  });

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fewshot
