// MLP feature extractor with an explicit forward tape and hand-derived
// backward pass. Hidden layers take the configured activation, the output
// layer is linear. An identity encoder (no parameters, forward(x) = x) is a
// first-class variant so losses can be probed in input space exactly.
#pragma once

#include <cstdint>
#include <json.hpp>
#include <utility>
#include <vector>

#include "fewshot/numerics.hpp"

namespace fewshot {

enum class Activation { relu, tanh };

struct MlpEncoder {
  // layer_dims = {L, hidden..., D}; identity encoders carry {dim} and no
  // weight matrices at all.
  std::vector<int> layer_dims;
  std::vector<std::vector<double>> weights;  // [l]: dims[l+1] x dims[l], row-major
  std::vector<std::vector<double>> biases;   // [l]: dims[l+1]
  Activation activation = Activation::relu;
  // Bumped on every parameter write; tapes remember the version they saw.
  std::uint64_t version = 0;

  bool is_identity() const { return weights.empty(); }
  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t param_count() const;

  // Flat parameter order: W0 row-major, b0, W1, b1, ...
  Vec params_flat() const;
  void set_params_flat(const Vec& p);
};

struct ForwardTape {
  Vec input;
  std::vector<Vec> pre_activations;  // z_l = W_l a_{l-1} + b_l, per layer
  std::vector<Vec> activations;      // post-activation per hidden layer
  std::uint64_t encoder_version = 0;
};

struct EncoderGrads {
  std::vector<std::vector<double>> weight_grads;
  std::vector<std::vector<double>> bias_grads;
  Vec input_grad;
};

MlpEncoder init_mlp(const std::vector<int>& layer_dims, Activation activation,
                    Rng& rng);
MlpEncoder identity_encoder(int dim);

std::pair<Vec, ForwardTape> forward(const MlpEncoder& enc, const Vec& x);

// Gradients of grad_out . f(x) w.r.t. every parameter and the input.
EncoderGrads backward(const MlpEncoder& enc, const ForwardTape& tape,
                      const Vec& grad_out);

EncoderGrads zero_grads(const MlpEncoder& enc);
EncoderGrads accumulate(const EncoderGrads& a, const EncoderGrads& b);
void add_into(EncoderGrads& into, const EncoderGrads& other);

// Same ordering as MlpEncoder::params_flat (input_grad is not included).
Vec grads_flat(const MlpEncoder& enc, const EncoderGrads& g);

nlohmann::json encoder_to_json(const MlpEncoder& enc);
MlpEncoder encoder_from_json(const nlohmann::json& j);

}  // namespace fewshot
