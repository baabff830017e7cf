#include "fewshot/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace fewshot {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

Vec mean_of(const std::vector<Vec>& vs) {
  Vec m(vs[0].size(), 0.0);
  for (const Vec& v : vs)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
  for (auto& x : m) x /= static_cast<double>(vs.size());
  return m;
}

AnyProto init_proto(Variant variant, const std::vector<Vec>& support) {
  switch (variant) {
    case Variant::hypersphere:
      return init_hypersphere(support);
    case Variant::cone:
      return init_cone(support);
    case Variant::gaussian:
      return init_gaussian(support);
    case Variant::vanilla: {
      HypersphereProto p = init_hypersphere(support);
      p.radius = 0.0;
      return p;
    }
  }
  throw std::invalid_argument("init_proto: unknown variant");
}

std::vector<int> all_class_ids(const Dataset& ds) {
  std::vector<int> ids;
  ids.reserve(ds.class_index.size());
  for (const auto& [c, idx] : ds.class_index) ids.push_back(c);
  return ids;
}

// Persistent-mode episode classes: N distinct ids drawn from the dataset.
std::vector<int> sample_classes(const Dataset& ds, int n_way, Rng& rng) {
  if (ds.n_classes() < static_cast<std::size_t>(n_way))
    throw SamplingError("train: need " + std::to_string(n_way) +
                        " classes, dataset has " +
                        std::to_string(ds.n_classes()));
  std::vector<int> ids = all_class_ids(ds);
  rng.partial_shuffle(ids, n_way);
  ids.resize(n_way);
  return ids;
}

// K' distinct queries per class, drawn from the class's full item pool.
std::vector<std::pair<Vec, int>> sample_queries(const Dataset& ds,
                                                const std::vector<int>& classes,
                                                int k_query, Rng& rng) {
  std::vector<std::pair<Vec, int>> queries;
  queries.reserve(classes.size() * k_query);
  for (int c : classes) {
    std::vector<std::size_t> pool = ds.class_index.at(c);
    if (pool.size() < static_cast<std::size_t>(k_query))
      throw SamplingError("train: class " + std::to_string(c) + " has " +
                          std::to_string(pool.size()) + " items, needs " +
                          std::to_string(k_query) + " queries");
    rng.partial_shuffle(pool, k_query);
    for (int i = 0; i < k_query; ++i)
      queries.emplace_back(ds.items[pool[i]].features, c);
  }
  return queries;
}

// Applies the encoder optimizer at encoder_lr and the per-class prototype
// optimizer at scale_lr. Vanilla radii get a zero gradient so they never
// leave their frozen value.
void apply_updates(TrainState& state, const TrainConfig& cfg,
                   const std::vector<int>& classes, const EpisodeLoss& el) {
  if (!state.encoder.is_identity()) {
    Vec params = state.encoder.params_flat();
    Vec grads = grads_flat(state.encoder, el.encoder_grads);
    optimizer_step(params, grads, state.encoder_opt, cfg.encoder_opt,
                   cfg.encoder_lr);
    state.encoder.set_params_flat(params);
  }
  for (int c : classes) {
    AnyProto& proto = state.store.protos.at(c);
    Vec params = proto_params(proto);
    const ProtoGrads& pg = el.proto_grads.at(c);
    Vec grads = pg.center;
    grads.push_back(cfg.variant == Variant::vanilla ? 0.0 : pg.scale);
    optimizer_step(params, grads, state.store.opt_state[c], cfg.scale_opt,
                   cfg.scale_lr);
    set_proto_params(proto, params);
  }
  state.step += 1;
}

struct AnchorStats {
  double accuracy = 0.0;
  double mean_sq_dist = 0.0;
};

AnchorStats anchor_stats(const MlpEncoder& enc,
                         const std::map<int, AnyProto>& protos,
                         const std::vector<std::pair<Vec, int>>& queries,
                         int anchor) {
  const Vec& center = proto_center(protos.at(anchor));
  AnchorStats st;
  long n = 0, correct = 0;
  for (const auto& [x, label] : queries) {
    if (label != anchor) continue;
    Vec emb = forward(enc, x).first;
    st.mean_sq_dist += sq_euclidean(emb, center);
    int best = -1;
    double best_m = 0.0;
    for (const auto& [c, p] : protos) {
      double m = measure_proto(emb, p).value;
      if (best == -1 || m < best_m) {
        best = c;
        best_m = m;
      }
    }
    if (best == anchor) ++correct;
    ++n;
  }
  require(n > 0, "anchor_stats: no anchor queries");
  st.mean_sq_dist /= static_cast<double>(n);
  st.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return st;
}

}  // namespace

Variant variant_from_string(const std::string& s) {
  if (s == "hypersphere") return Variant::hypersphere;
  if (s == "cone") return Variant::cone;
  if (s == "gaussian") return Variant::gaussian;
  if (s == "vanilla") return Variant::vanilla;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

TrainMode mode_from_string(const std::string& s) {
  if (s == "persistent") return TrainMode::persistent;
  if (s == "episodic-reinit") return TrainMode::episodic_reinit;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::hypersphere: return "hypersphere";
    case Variant::cone: return "cone";
    case Variant::gaussian: return "gaussian";
    case Variant::vanilla: return "vanilla";
  }
  return "?";
}

std::string to_string(TrainMode m) {
  return m == TrainMode::persistent ? "persistent" : "episodic-reinit";
}

std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

void TrainConfig::validate() const {
  require(n_way >= 1 && k_shot >= 1 && k_query >= 1,
          "train config: episode shape counts must be >= 1");
  require(steps >= 1, "train config: steps must be >= 1");
  require(eval_episodes >= 1, "train config: eval_episodes must be >= 1");
  require(encoder_lr >= 0.0 && scale_lr >= 0.0,
          "train config: learning rates must be >= 0");
}

void optimizer_step(Vec& params, const Vec& grads, AdamState& state,
                    OptimizerKind kind, double lr) {
  require(params.size() == grads.size(),
          "optimizer: parameter/gradient shape mismatch");
  if (kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
    return;
  }
  if (state.m.empty() && !params.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require(state.m.size() == params.size(), "optimizer: state shape mismatch");
  ++state.t;
  double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * grads[i];
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * grads[i] * grads[i];
    params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + kAdamEps);
  }
}

PrototypeStore init_prototype_store(const Dataset& ds, const MlpEncoder& enc,
                                    int k_shot, Variant variant, Rng& rng) {
  require(k_shot >= 1, "init_prototype_store: K must be >= 1");
  PrototypeStore store;
  for (const auto& [c, idx] : ds.class_index) {
    if (idx.size() < static_cast<std::size_t>(k_shot))
      throw SamplingError("init: class " + std::to_string(c) + " has " +
                          std::to_string(idx.size()) + " items, needs " +
                          std::to_string(k_shot));
    std::vector<std::size_t> pool = idx;
    rng.partial_shuffle(pool, k_shot);
    std::vector<Vec> embs;
    embs.reserve(k_shot);
    for (int i = 0; i < k_shot; ++i)
      embs.push_back(forward(enc, ds.items[pool[i]].features).first);
    store.protos.emplace(c, init_proto(variant, embs));
  }
  return store;
}

EpisodeLoss episode_loss(const MlpEncoder& enc,
                         const std::map<int, AnyProto>& protos,
                         const std::vector<std::pair<Vec, int>>& queries,
                         Variant variant) {
  require(!protos.empty(), "episode_loss: no prototypes");
  require(!queries.empty(), "episode_loss: no queries");

  EpisodeLoss out;
  out.encoder_grads = zero_grads(enc);
  std::vector<int> ids;
  for (const auto& [c, p] : protos) {
    ids.push_back(c);
    out.proto_grads[c].center.assign(proto_center(p).size(), 0.0);
  }

  double inv_q = 1.0 / static_cast<double>(queries.size());
  for (const auto& [x, label] : queries) {
    auto pos = std::lower_bound(ids.begin(), ids.end(), label);
    require(pos != ids.end() && *pos == label,
            "episode_loss: query label " + std::to_string(label) +
                " outside the episode");
    std::size_t ti = static_cast<std::size_t>(pos - ids.begin());

    auto [emb, tape] = forward(enc, x);
    std::vector<MeasureResult> ms;
    Vec values;
    ms.reserve(ids.size());
    for (int c : ids) {
      ms.push_back(measure_proto(emb, protos.at(c)));
      values.push_back(ms.back().value);
    }
    out.cls += (values[ti] + log_sum_exp_of_negated(values)) * inv_q;

    Vec probs = softmax_of_negated(values);
    Vec demb(emb.size(), 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double w = ((i == ti ? 1.0 : 0.0) - probs[i]) * inv_q;
      const MeasureResult& m = ms[i];
      for (std::size_t k = 0; k < demb.size(); ++k)
        demb[k] += w * m.grad_embedding[k];
      ProtoGrads& pg = out.proto_grads[ids[i]];
      for (std::size_t k = 0; k < pg.center.size(); ++k)
        pg.center[k] += w * m.grad_center[k];
      pg.scale += w * m.grad_scale;
    }
    add_into(out.encoder_grads, backward(enc, tape, demb));
  }

  if (variant == Variant::cone) {
    std::vector<ConeProto> cones;
    cones.reserve(ids.size());
    for (int c : ids) {
      require(std::holds_alternative<ConeProto>(protos.at(c)),
              "episode_loss: cone variant given a non-cone prototype");
      cones.push_back(std::get<ConeProto>(protos.at(c)));
    }
    ConeDisjointness dis = cone_disjointness(cones);
    out.disjointness = dis.value;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      ProtoGrads& pg = out.proto_grads[ids[i]];
      for (std::size_t k = 0; k < pg.center.size(); ++k)
        pg.center[k] += dis.grad_centers[i][k];
      pg.scale += dis.grad_angles[i];
    }
  }
  out.value = out.cls + out.disjointness;
  return out;
}

EpisodeLoss reinit_episode_loss(const MlpEncoder& enc,
                                const std::map<int, AnyProto>& stored,
                                const std::vector<std::pair<Vec, int>>& support,
                                const std::vector<std::pair<Vec, int>>& queries,
                                Variant variant) {
  require(!support.empty(), "reinit episode: no support");

  std::map<int, std::vector<std::pair<Vec, ForwardTape>>> sup;
  for (const auto& [x, label] : support) {
    require(stored.count(label) == 1,
            "reinit episode: support label " + std::to_string(label) +
                " outside the episode");
    sup[label].push_back(forward(enc, x));
  }
  require(sup.size() == stored.size(),
          "reinit episode: every episode class needs support items");

  std::map<int, AnyProto> protos = stored;
  for (const auto& [c, embs] : sup) {
    std::vector<Vec> just_embs;
    just_embs.reserve(embs.size());
    for (const auto& [e, tape] : embs) just_embs.push_back(e);
    Vec center = mean_of(just_embs);
    if (variant == Variant::cone)
      require(norm(center) > 0.0,
              "reinit episode: support mean is the zero vector");
    Vec params = center;
    params.push_back(proto_scale(stored.at(c)));
    set_proto_params(protos.at(c), params);
  }

  EpisodeLoss el = episode_loss(enc, protos, queries, variant);

  // The re-estimated center is the support mean, so its gradient reaches the
  // encoder as grad_center / K through every support embedding. The stored
  // center itself is not a variable of this loss.
  for (const auto& [c, embs] : sup) {
    Vec g = el.proto_grads.at(c).center;
    double inv_k = 1.0 / static_cast<double>(embs.size());
    for (auto& x : g) x *= inv_k;
    for (const auto& [e, tape] : embs)
      add_into(el.encoder_grads, backward(enc, tape, g));
    el.proto_grads.at(c).center.assign(g.size(), 0.0);
  }
  return el;
}

TrainState init_training(const Dataset& ds, MlpEncoder encoder,
                         const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  require(encoder.input_dim() == ds.feature_dim(),
          "init_training: encoder input dimension does not match the data");
  TrainState st;
  st.encoder = std::move(encoder);
  st.store =
      init_prototype_store(ds, st.encoder, cfg.k_shot, cfg.variant, rng);
  return st;
}

double train_step(TrainState& state, const Dataset& ds, const TrainConfig& cfg,
                  Rng& rng) {
  cfg.validate();
  EpisodeLoss el;
  std::vector<int> classes;
  if (cfg.mode == TrainMode::persistent) {
    classes = sample_classes(ds, cfg.n_way, rng);
    auto queries = sample_queries(ds, classes, cfg.k_query, rng);
    std::map<int, AnyProto> protos;
    for (int c : classes) protos.emplace(c, state.store.protos.at(c));
    el = episode_loss(state.encoder, protos, queries, cfg.variant);
  } else {
    Episode ep =
        sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.k_query, rng);
    classes = ep.classes;
    std::map<int, AnyProto> protos;
    for (int c : classes) protos.emplace(c, state.store.protos.at(c));
    el = reinit_episode_loss(state.encoder, protos, ep.support, ep.query,
                             cfg.variant);
  }
  apply_updates(state, cfg, classes, el);
  return el.value;
}

EpisodeEval evaluate_episode(const MlpEncoder& enc, const Episode& ep,
                             Variant variant) {
  require(!ep.support.empty() && !ep.query.empty(),
          "evaluate_episode: empty episode");
  std::map<int, std::vector<Vec>> sup;
  for (const auto& [x, label] : ep.support)
    sup[label].push_back(forward(enc, x).first);
  std::map<int, AnyProto> protos;
  for (const auto& [c, embs] : sup) protos.emplace(c, init_proto(variant, embs));

  EpisodeEval out;
  long correct = 0;
  for (const auto& [x, label] : ep.query) {
    Vec emb = forward(enc, x).first;
    int best = -1;
    double best_m = 0.0;
    // ascending id order + strict less: ties land on the lowest class id
    for (const auto& [c, p] : protos) {
      double m = measure_proto(emb, p).value;
      if (best == -1 || m < best_m) {
        best = c;
        best_m = m;
      }
    }
    out.confusion[{label, best}] += 1;
    if (best == label) ++correct;
  }
  out.accuracy =
      static_cast<double>(correct) / static_cast<double>(ep.query.size());
  return out;
}

Metrics evaluate(const MlpEncoder& enc, const Dataset& ds,
                 const TrainConfig& cfg, const Rng& rng, int jobs) {
  cfg.validate();
  require(jobs >= 1, "evaluate: jobs must be >= 1");
  const int n = cfg.eval_episodes;
  std::vector<EpisodeEval> results(n);

  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        Rng ep_rng = rng.fork(static_cast<std::uint64_t>(i));
        Episode ep =
            sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.k_query, ep_rng);
        results[i] = evaluate_episode(enc, ep, cfg.variant);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  Metrics m;
  m.n_episodes = n;
  double sum = 0.0;
  for (const auto& r : results) sum += r.accuracy;
  m.accuracy = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& r : results) {
    double d = r.accuracy - m.accuracy;
    ss += d * d;
  }
  double std_dev = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  m.ci95_halfwidth = 1.96 * std_dev / std::sqrt(static_cast<double>(n));

  // micro averages over the pooled confusion counts
  std::map<std::pair<int, int>, long> pooled;
  for (const auto& r : results)
    for (const auto& [key, count] : r.confusion) pooled[key] += count;
  long tp = 0, fp = 0, fn = 0;
  for (const auto& [key, count] : pooled) {
    if (key.first == key.second)
      tp += count;
    else {
      fn += count;  // counted against the true class
      fp += count;  // and as a false hit on the predicted class
    }
  }
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

void RadiusDynamicsConfig::validate() const {
  train.validate();
  require(warmup_steps >= 0, "radius dynamics: warmup must be >= 0");
  require(total_steps > warmup_steps,
          "radius dynamics: total steps must exceed the warmup");
  require(log_every >= 1, "radius dynamics: log interval must be >= 1");
  require(retry_limit >= 0, "radius dynamics: retry limit must be >= 0");
}

std::vector<RadiusTraceRow> radius_dynamics_run(const Dataset& ds,
                                                MlpEncoder encoder,
                                                const RadiusDynamicsConfig& cfg,
                                                Rng& rng) {
  cfg.validate();
  require(cfg.train.mode == TrainMode::persistent &&
              cfg.train.variant == Variant::hypersphere,
          "radius dynamics: requires persistent mode and the hypersphere "
          "variant");
  require(ds.class_index.count(cfg.anchor_class) == 1,
          "radius dynamics: anchor class " +
              std::to_string(cfg.anchor_class) + " not in the dataset");
  require(ds.n_classes() >= static_cast<std::size_t>(cfg.train.n_way),
          "radius dynamics: not enough classes for the episode shape");

  TrainState state;
  state.encoder = std::move(encoder);
  Rng init_rng = rng.fork(0);
  state.store = init_prototype_store(ds, state.encoder, cfg.train.k_shot,
                                     cfg.train.variant, init_rng);
  Rng step_rng = rng.fork(1);

  std::vector<int> others;
  for (int c : all_class_ids(ds))
    if (c != cfg.anchor_class) others.push_back(c);

  // One episode with the anchor class always included.
  auto sample_anchored = [&](Rng& r) {
    std::vector<int> classes = {cfg.anchor_class};
    std::vector<int> rest = others;
    r.partial_shuffle(rest, cfg.train.n_way - 1);
    classes.insert(classes.end(), rest.begin(),
                   rest.begin() + (cfg.train.n_way - 1));
    return std::make_pair(classes,
                          sample_queries(ds, classes, cfg.train.k_query, r));
  };

  double last_ref = 0.5;
  std::vector<RadiusTraceRow> trace;
  for (long s = 1; s <= cfg.total_steps; ++s) {
    bool warm = s <= cfg.warmup_steps;
    std::vector<int> classes;
    std::vector<std::pair<Vec, int>> queries;
    AnchorStats stats;

    if (warm) {
      std::tie(classes, queries) = sample_anchored(step_rng);
      std::map<int, AnyProto> protos;
      for (int c : classes) protos.emplace(c, state.store.protos.at(c));
      stats = anchor_stats(state.encoder, protos, queries, cfg.anchor_class);
    } else {
      // 50-step blocks alternate: accept episodes whose anchor accuracy is
      // above (good block) or below (bad block) the last logged value.
      long block = (s - cfg.warmup_steps - 1) / cfg.log_every;
      bool want_good = block % 2 == 0;
      int attempt = 0;
      for (;;) {
        std::tie(classes, queries) = sample_anchored(step_rng);
        std::map<int, AnyProto> protos;
        for (int c : classes) protos.emplace(c, state.store.protos.at(c));
        stats = anchor_stats(state.encoder, protos, queries, cfg.anchor_class);
        bool ok = want_good ? stats.accuracy > last_ref
                            : stats.accuracy < last_ref;
        if (ok || attempt >= cfg.retry_limit) break;  // fall back when spent
        ++attempt;
      }
    }

    double radius_before =
        std::get<HypersphereProto>(state.store.protos.at(cfg.anchor_class))
            .radius;

    std::map<int, AnyProto> protos;
    for (int c : classes) protos.emplace(c, state.store.protos.at(c));
    EpisodeLoss el =
        episode_loss(state.encoder, protos, queries, cfg.train.variant);
    apply_updates(state, cfg.train, classes, el);

    if (s == cfg.warmup_steps) last_ref = stats.accuracy;
    if (!warm && (s - cfg.warmup_steps) % cfg.log_every == 0) {
      trace.push_back({s, stats.mean_sq_dist, radius_before, stats.accuracy});
      last_ref = stats.accuracy;
    }
  }
  return trace;
}

namespace {

nlohmann::json adam_to_json(const AdamState& s) {
  return nlohmann::json{{"m", s.m}, {"v", s.v}, {"t", s.t}};
}

AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.m = j.at("m").get<Vec>();
  s.v = j.at("v").get<Vec>();
  s.t = j.at("t").get<long>();
  return s;
}

}  // namespace

nlohmann::json train_state_to_json(const TrainState& s) {
  nlohmann::json protos = nlohmann::json::object();
  for (const auto& [c, p] : s.store.protos)
    protos[std::to_string(c)] = proto_to_json(p);
  nlohmann::json opt = nlohmann::json::object();
  for (const auto& [c, a] : s.store.opt_state)
    opt[std::to_string(c)] = adam_to_json(a);
  return nlohmann::json{{"encoder", encoder_to_json(s.encoder)},
                        {"prototypes", protos},
                        {"prototype_opt", opt},
                        {"encoder_opt", adam_to_json(s.encoder_opt)},
                        {"step", s.step}};
}

TrainState train_state_from_json(const nlohmann::json& j) {
  TrainState s;
  s.encoder = encoder_from_json(j.at("encoder"));
  for (const auto& [key, pj] : j.at("prototypes").items())
    s.store.protos.emplace(std::stoi(key), proto_from_json(pj));
  for (const auto& [key, aj] : j.at("prototype_opt").items())
    s.store.opt_state.emplace(std::stoi(key), adam_from_json(aj));
  s.encoder_opt = adam_from_json(j.at("encoder_opt"));
  s.step = j.at("step").get<long>();
  return s;
}

}  // namespace fewshot
