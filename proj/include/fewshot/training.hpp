// Episodic training end to end: prototype store initialization over all
// training classes, the learning phase with persistent prototype parameters
// and separate encoder/scale learning rates, episodic evaluation with
// confidence intervals, SGD/Adam, and the radius-dynamics experiment.
#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/encoder.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/prototypes.hpp"

namespace fewshot {

enum class Variant { hypersphere, cone, gaussian, vanilla };
// persistent: prototypes are global parameters updated across episodes.
// episodic_reinit: centers are re-estimated from a fresh support every
// episode (gradients reach the encoder through the support mean); scales
// stay persistent.
enum class TrainMode { persistent, episodic_reinit };
enum class OptimizerKind { sgd, adam };

Variant variant_from_string(const std::string& s);
TrainMode mode_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);
std::string to_string(Variant v);
std::string to_string(TrainMode m);
std::string to_string(OptimizerKind k);

struct TrainConfig {
  int n_way = 5;
  int k_shot = 5;
  int k_query = 15;
  int steps = 2000;
  double encoder_lr = 1e-3;  // lambda_f
  double scale_lr = 1e-1;    // lambda_eps; scales tolerate large rates
  Variant variant = Variant::hypersphere;
  TrainMode mode = TrainMode::persistent;
  OptimizerKind encoder_opt = OptimizerKind::sgd;
  OptimizerKind scale_opt = OptimizerKind::adam;
  std::uint64_t seed = 0;
  int eval_episodes = 1000;

  void validate() const;  // counts >= 1, learning rates >= 0
};

// Adam first/second moments; empty until the first step, then sized to the
// parameter vector. Doubles as the (stateless) SGD marker so optimizer
// state serializes uniformly.
struct AdamState {
  Vec m;
  Vec v;
  long t = 0;
};

// One optimizer step in place. SGD: p -= lr*g. Adam: standard bias-corrected
// update with beta1=0.9, beta2=0.999, eps=1e-8.
void optimizer_step(Vec& params, const Vec& grads, AdamState& state,
                    OptimizerKind kind, double lr);

struct PrototypeStore {
  std::map<int, AnyProto> protos;      // one per training class
  std::map<int, AdamState> opt_state;  // per class, over [center..., scale]
};

// One prototype per class from K randomly sampled items, via the variant's
// closed-form initializer. vanilla = hypersphere center with radius frozen 0.
PrototypeStore init_prototype_store(const Dataset& ds, const MlpEncoder& enc,
                                    int k_shot, Variant variant, Rng& rng);

struct ProtoGrads {
  Vec center;
  double scale = 0.0;
};

struct EpisodeLoss {
  double value = 0.0;  // cls + disjointness
  double cls = 0.0;
  double disjointness = 0.0;  // cone only, 0 otherwise
  EncoderGrads encoder_grads;
  std::map<int, ProtoGrads> proto_grads;  // per episode class
};

// Mean over queries of M_target + log sum exp(-M) over the episode classes,
// computed in log-sum-exp form. Cone adds the disjointness penalty over the
// episode's prototypes. Gradients for the encoder (through the query
// embeddings), every center, and every scale.
EpisodeLoss episode_loss(
    const MlpEncoder& enc, const std::map<int, AnyProto>& protos,
    const std::vector<std::pair<Vec, int>>& queries, Variant variant);

// Episodic-reinit loss: centers are re-estimated as the support means
// (scales come from the stored prototypes), so gradients reach the encoder
// through the support embeddings as well as the queries. Center gradients in
// the result are zero — stored centers are not variables of this loss.
EpisodeLoss reinit_episode_loss(
    const MlpEncoder& enc, const std::map<int, AnyProto>& stored,
    const std::vector<std::pair<Vec, int>>& support,
    const std::vector<std::pair<Vec, int>>& queries, Variant variant);

struct TrainState {
  MlpEncoder encoder;
  PrototypeStore store;
  AdamState encoder_opt;
  long step = 0;
};

TrainState init_training(const Dataset& ds, MlpEncoder encoder,
                         const TrainConfig& cfg, Rng& rng);

// One episode: sample N classes and K' queries each (plus a K-shot support in
// episodic_reinit mode), apply the optimizers. Returns the episode loss
// evaluated before the update.
double train_step(TrainState& state, const Dataset& ds, const TrainConfig& cfg,
                  Rng& rng);

struct EpisodeEval {
  double accuracy = 0.0;
  // (true class, predicted class) -> count
  std::map<std::pair<int, int>, long> confusion;
};

// Closed-form prototypes from the support, argmin-M prediction for each
// query, ties broken toward the lowest class id.
EpisodeEval evaluate_episode(const MlpEncoder& enc, const Episode& ep,
                             Variant variant);

struct Metrics {
  double accuracy = 0.0;
  double ci95_halfwidth = 0.0;  // 1.96 * sample std / sqrt(n)
  double precision = 0.0;       // micro-averaged over pooled confusion
  double recall = 0.0;
  double f1 = 0.0;
  long n_episodes = 0;
};

// eval_episodes independent episodes, each on its own forked rng stream.
// jobs > 1 runs them concurrently; aggregation order is fixed, so results
// are identical for any job count.
Metrics evaluate(const MlpEncoder& enc, const Dataset& ds,
                 const TrainConfig& cfg, const Rng& rng, int jobs = 1);

struct RadiusTraceRow {
  long step = 0;
  double mean_sq_dist = 0.0;  // anchor queries to the anchor center, pre-update
  double radius = 0.0;        // anchor radius, pre-update
  double accuracy = 0.0;      // anchor-query accuracy, pre-update
};

struct RadiusDynamicsConfig {
  TrainConfig train;      // persistent mode, hypersphere variant
  int warmup_steps = 500;
  int total_steps = 2000;
  int log_every = 50;
  int anchor_class = 0;
  int retry_limit = 200;  // rejection-sampling bound per episode

  void validate() const;
};

// The anchor class joins every episode. After warmup, 50-step blocks
// alternate between "good" episodes (anchor accuracy above the last logged
// value) and "bad" ones (below), found by bounded rejection sampling. One
// row per log_every steps, logged at block boundaries.
std::vector<RadiusTraceRow> radius_dynamics_run(const Dataset& ds,
                                                MlpEncoder encoder,
                                                const RadiusDynamicsConfig& cfg,
                                                Rng& rng);

// Checkpoint: encoder parameters, prototype store, optimizer state, step.
nlohmann::json train_state_to_json(const TrainState& s);
TrainState train_state_from_json(const nlohmann::json& j);

}  // namespace fewshot
