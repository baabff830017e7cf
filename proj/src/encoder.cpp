#include "fewshot/encoder.hpp"

#include <cmath>

namespace fewshot {

namespace {

void check_shapes(const MlpEncoder& enc) {
  require(!enc.layer_dims.empty(), "encoder: empty layer_dims");
  std::size_t n_layers = enc.layer_dims.size() - 1;
  require(enc.weights.size() == n_layers && enc.biases.size() == n_layers,
          "encoder: layer count mismatch");
}

}  // namespace

std::size_t MlpEncoder::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l)
    n += static_cast<std::size_t>(layer_dims[l]) * layer_dims[l + 1] +
         layer_dims[l + 1];
  return n;
}

Vec MlpEncoder::params_flat() const {
  Vec p;
  p.reserve(param_count());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    p.insert(p.end(), weights[l].begin(), weights[l].end());
    p.insert(p.end(), biases[l].begin(), biases[l].end());
  }
  return p;
}

void MlpEncoder::set_params_flat(const Vec& p) {
  require(p.size() == param_count(), "set_params_flat: length mismatch");
  std::size_t at = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (auto& w : weights[l]) w = p[at++];
    for (auto& b : biases[l]) b = p[at++];
  }
  ++version;
}

MlpEncoder init_mlp(const std::vector<int>& layer_dims, Activation activation,
                    Rng& rng) {
  require(layer_dims.size() >= 2, "init_mlp: need at least input and output dims");
  for (int d : layer_dims) require(d >= 1, "init_mlp: layer dims must be >= 1");

  MlpEncoder enc;
  enc.layer_dims = layer_dims;
  enc.activation = activation;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    int in = layer_dims[l], out = layer_dims[l + 1];
    double scale = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(static_cast<std::size_t>(out) * in);
    for (auto& v : w) v = (2.0 * rng.next_double() - 1.0) * scale;
    enc.weights.push_back(std::move(w));
    enc.biases.emplace_back(out, 0.0);
  }
  return enc;
}

MlpEncoder identity_encoder(int dim) {
  require(dim >= 1, "identity_encoder: dim must be >= 1");
  MlpEncoder enc;
  enc.layer_dims = {dim};
  return enc;
}

std::pair<Vec, ForwardTape> forward(const MlpEncoder& enc, const Vec& x) {
  check_shapes(enc);
  require(static_cast<int>(x.size()) == enc.input_dim(),
          "forward: input dimension mismatch");
  ForwardTape tape;
  tape.input = x;
  tape.encoder_version = enc.version;
  if (enc.is_identity()) return {x, tape};

  Vec a = x;
  std::size_t n_layers = enc.weights.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    int in = enc.layer_dims[l], out = enc.layer_dims[l + 1];
    Vec z(out);
    const auto& w = enc.weights[l];
    for (int r = 0; r < out; ++r) {
      double s = enc.biases[l][r];
      const double* row = &w[static_cast<std::size_t>(r) * in];
      for (int c = 0; c < in; ++c) s += row[c] * a[c];
      z[r] = s;
    }
    tape.pre_activations.push_back(z);
    if (l + 1 < n_layers) {
      if (enc.activation == Activation::relu) {
        for (auto& v : z) v = v > 0.0 ? v : 0.0;
      } else {
        for (auto& v : z) v = std::tanh(v);
      }
      tape.activations.push_back(z);
      a = std::move(z);
    } else {
      a = std::move(z);
    }
  }
  return {a, tape};
}

EncoderGrads backward(const MlpEncoder& enc, const ForwardTape& tape,
                      const Vec& grad_out) {
  check_shapes(enc);
  require(tape.encoder_version == enc.version,
          "backward: tape is stale (parameters changed since forward)");
  require(static_cast<int>(grad_out.size()) == enc.output_dim(),
          "backward: grad_out dimension mismatch");
  require(static_cast<int>(tape.input.size()) == enc.input_dim(),
          "backward: tape input dimension mismatch");

  EncoderGrads g;
  if (enc.is_identity()) {
    g.input_grad = grad_out;
    return g;
  }
  require(tape.pre_activations.size() == enc.weights.size(),
          "backward: tape layer count mismatch");

  std::size_t n_layers = enc.weights.size();
  g.weight_grads.resize(n_layers);
  g.bias_grads.resize(n_layers);

  Vec delta = grad_out;  // dL/dz at the current layer, output layer is linear
  for (std::size_t li = n_layers; li-- > 0;) {
    int in = enc.layer_dims[li], out = enc.layer_dims[li + 1];
    const Vec& a_prev = (li == 0) ? tape.input : tape.activations[li - 1];

    std::vector<double> dw(static_cast<std::size_t>(out) * in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c)
        dw[static_cast<std::size_t>(r) * in + c] = delta[r] * a_prev[c];
    g.weight_grads[li] = std::move(dw);
    g.bias_grads[li] = delta;

    Vec gprev(in, 0.0);  // dL/da_{l-1}
    const auto& w = enc.weights[li];
    for (int r = 0; r < out; ++r) {
      const double* row = &w[static_cast<std::size_t>(r) * in];
      for (int c = 0; c < in; ++c) gprev[c] += row[c] * delta[r];
    }

    if (li == 0) {
      g.input_grad = std::move(gprev);
    } else {
      const Vec& z = tape.pre_activations[li - 1];
      if (enc.activation == Activation::relu) {
        for (int c = 0; c < in; ++c) gprev[c] = z[c] > 0.0 ? gprev[c] : 0.0;
      } else {
        const Vec& a = tape.activations[li - 1];
        for (int c = 0; c < in; ++c) gprev[c] *= 1.0 - a[c] * a[c];
      }
      delta = std::move(gprev);
    }
  }
  return g;
}

EncoderGrads zero_grads(const MlpEncoder& enc) {
  EncoderGrads g;
  for (std::size_t l = 0; l < enc.weights.size(); ++l) {
    g.weight_grads.emplace_back(enc.weights[l].size(), 0.0);
    g.bias_grads.emplace_back(enc.biases[l].size(), 0.0);
  }
  g.input_grad.assign(enc.input_dim(), 0.0);
  return g;
}

void add_into(EncoderGrads& into, const EncoderGrads& other) {
  require(into.weight_grads.size() == other.weight_grads.size() &&
              into.bias_grads.size() == other.bias_grads.size(),
          "accumulate: layer count mismatch");
  for (std::size_t l = 0; l < into.weight_grads.size(); ++l) {
    require(into.weight_grads[l].size() == other.weight_grads[l].size() &&
                into.bias_grads[l].size() == other.bias_grads[l].size(),
            "accumulate: layer shape mismatch");
    for (std::size_t i = 0; i < into.weight_grads[l].size(); ++i)
      into.weight_grads[l][i] += other.weight_grads[l][i];
    for (std::size_t i = 0; i < into.bias_grads[l].size(); ++i)
      into.bias_grads[l][i] += other.bias_grads[l][i];
  }
  require(into.input_grad.size() == other.input_grad.size(),
          "accumulate: input_grad length mismatch");
  for (std::size_t i = 0; i < into.input_grad.size(); ++i)
    into.input_grad[i] += other.input_grad[i];
}

EncoderGrads accumulate(const EncoderGrads& a, const EncoderGrads& b) {
  EncoderGrads out = a;
  add_into(out, b);
  return out;
}

Vec grads_flat(const MlpEncoder& enc, const EncoderGrads& g) {
  require(g.weight_grads.size() == enc.weights.size(),
          "grads_flat: layer count mismatch");
  Vec flat;
  flat.reserve(enc.param_count());
  for (std::size_t l = 0; l < g.weight_grads.size(); ++l) {
    flat.insert(flat.end(), g.weight_grads[l].begin(), g.weight_grads[l].end());
    flat.insert(flat.end(), g.bias_grads[l].begin(), g.bias_grads[l].end());
  }
  return flat;
}

nlohmann::json encoder_to_json(const MlpEncoder& enc) {
  if (enc.is_identity())
    return {{"kind", "identity"}, {"dim", enc.layer_dims.front()}};
  return {{"kind", "mlp"},
          {"layer_dims", enc.layer_dims},
          {"activation", enc.activation == Activation::relu ? "relu" : "tanh"},
          {"weights", enc.weights},
          {"biases", enc.biases}};
}

MlpEncoder encoder_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("kind"), "encoder json: missing kind");
  if (j.at("kind") == "identity") {
    return identity_encoder(j.at("dim").get<int>());
  }
  require(j.at("kind") == "mlp", "encoder json: unknown kind");
  MlpEncoder enc;
  enc.layer_dims = j.at("layer_dims").get<std::vector<int>>();
  std::string act = j.at("activation").get<std::string>();
  require(act == "relu" || act == "tanh", "encoder json: unknown activation");
  enc.activation = act == "relu" ? Activation::relu : Activation::tanh;
  enc.weights = j.at("weights").get<std::vector<std::vector<double>>>();
  enc.biases = j.at("biases").get<std::vector<std::vector<double>>>();
  check_shapes(enc);
  require(enc.params_flat().size() == enc.param_count(),
          "encoder json: parameter shapes inconsistent");
  return enc;
}

}  // namespace fewshot
