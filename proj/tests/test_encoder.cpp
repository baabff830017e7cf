#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fewshot/encoder.hpp"

using namespace fewshot;

namespace {

MlpEncoder random_encoder(const std::vector<int>& dims, Activation act,
                          std::uint64_t seed) {
  Rng rng(seed);
  return init_mlp(dims, act, rng);
}

}  // namespace

TEST_CASE("init_mlp is deterministic and shape-correct") {
  MlpEncoder a = random_encoder({4, 8, 4}, Activation::relu, 99);
  MlpEncoder b = random_encoder({4, 8, 4}, Activation::relu, 99);
  CHECK(a.params_flat() == b.params_flat());

  // weights + biases: 16*32+32 + 32*16+16
  MlpEncoder c = random_encoder({16, 32, 16}, Activation::tanh, 1);
  CHECK(c.param_count() == 16 * 32 + 32 + 32 * 16 + 16);
  CHECK(c.params_flat().size() == c.param_count());
  CHECK(c.input_dim() == 16);
  CHECK(c.output_dim() == 16);
}

TEST_CASE("init_mlp rejects bad layer lists") {
  Rng rng(1);
  CHECK_THROWS_AS(init_mlp({4}, Activation::relu, rng), std::invalid_argument);
  CHECK_THROWS_AS(init_mlp({}, Activation::relu, rng), std::invalid_argument);
  CHECK_THROWS_AS(init_mlp({4, 0, 2}, Activation::relu, rng),
                  std::invalid_argument);
}

TEST_CASE("init_mlp draws zero-bias uniform weights within the fan-in scale") {
  MlpEncoder e = random_encoder({10, 20, 5}, Activation::relu, 3);
  for (double b : e.biases[0]) CHECK(b == 0.0);
  for (double b : e.biases[1]) CHECK(b == 0.0);
  double bound0 = 1.0 / std::sqrt(10.0);
  for (double w : e.weights[0]) CHECK(std::abs(w) <= bound0);
  double bound1 = 1.0 / std::sqrt(20.0);
  for (double w : e.weights[1]) CHECK(std::abs(w) <= bound1);
}

TEST_CASE("identity encoder forwards and backwards exactly") {
  MlpEncoder id = identity_encoder(2);
  CHECK(id.param_count() == 0);
  auto [y, tape] = forward(id, {1.0, 2.0});
  CHECK(y == Vec{1.0, 2.0});
  EncoderGrads g = backward(id, tape, {0.25, -4.0});
  CHECK(g.input_grad == Vec{0.25, -4.0});
  CHECK(g.weight_grads.empty());
}

TEST_CASE("forward handles simple hand-computable nets") {
  MlpEncoder e;
  e.layer_dims = {1, 1};
  e.weights = {{2.0}};
  e.biases = {{1.0}};
  auto [y, tape] = forward(e, {3.0});
  CHECK(y == Vec{7.0});

  MlpEncoder z = random_encoder({3, 4, 2}, Activation::relu, 5);
  for (auto& w : z.weights)
    for (auto& v : w) v = 0.0;
  z.version++;
  auto [zy, ztape] = forward(z, {1.0, -2.0, 3.0});
  CHECK(zy == Vec{0.0, 0.0});
}

TEST_CASE("forward rejects wrong input dimension") {
  MlpEncoder e = random_encoder({3, 4, 2}, Activation::relu, 5);
  CHECK_THROWS_AS(forward(e, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("backward matches hand values on a single linear layer") {
  MlpEncoder e;
  e.layer_dims = {1, 1};
  e.weights = {{2.0}};
  e.biases = {{1.0}};
  auto [y, tape] = forward(e, {3.0});
  EncoderGrads g = backward(e, tape, {1.0});
  CHECK(g.weight_grads[0] == std::vector<double>{3.0});
  CHECK(g.bias_grads[0] == std::vector<double>{1.0});
  CHECK(g.input_grad == Vec{2.0});

  EncoderGrads gz = backward(e, tape, {0.0});
  CHECK(gz.weight_grads[0] == std::vector<double>{0.0});
  CHECK(gz.input_grad == Vec{0.0});
}

TEST_CASE("backward refuses a stale tape") {
  MlpEncoder e = random_encoder({2, 3, 2}, Activation::relu, 8);
  auto [y, tape] = forward(e, {1.0, 1.0});
  Vec p = e.params_flat();
  p[0] += 0.5;
  e.set_params_flat(p);
  CHECK_THROWS_AS(backward(e, tape, {1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("backward gradients match finite differences") {
  for (Activation act : {Activation::relu, Activation::tanh}) {
    Rng rng(act == Activation::relu ? 101 : 202);
    for (int it = 0; it < 100; ++it) {
      // Finite differences are only a valid oracle at differentiable points,
      // so relu configurations whose pre-activations sit on (or hug) the kink
      // are resampled. Zero-init biases make exact z = 0 reachable whenever a
      // whole hidden layer goes dead.
      MlpEncoder enc;
      Vec x;
      ForwardTape tape;
      for (int attempt = 0;; ++attempt) {
        REQUIRE(attempt < 500);
        std::vector<int> dims = {2 + (int)rng.next_below(3),
                                 2 + (int)rng.next_below(4),
                                 2 + (int)rng.next_below(4),
                                 1 + (int)rng.next_below(3)};
        Rng init = rng.fork(1000 + 997 * it + attempt);
        enc = init_mlp(dims, act, init);
        x.assign(dims[0], 0.0);
        for (auto& v : x) v = 2.0 * rng.next_double() - 1.0;
        auto [y, t] = forward(enc, x);
        tape = t;
        if (act == Activation::tanh) break;
        bool near_kink = false;
        for (const auto& z : tape.pre_activations)
          for (double v : z) near_kink |= std::abs(v) < 1e-3;
        if (!near_kink) break;
      }
      Vec gout(enc.output_dim());
      for (auto& v : gout) v = 2.0 * rng.next_double() - 1.0;

      EncoderGrads g = backward(enc, tape, gout);

      // Check all parameters and the input through one flattened probe.
      Vec point = enc.params_flat();
      point.insert(point.end(), x.begin(), x.end());
      Vec analytic = grads_flat(enc, g);
      analytic.insert(analytic.end(), g.input_grad.begin(),
                      g.input_grad.end());

      std::size_t np = enc.param_count();
      auto fn = [&](const Vec& p) {
        MlpEncoder probe = enc;
        probe.set_params_flat(Vec(p.begin(), p.begin() + np));
        Vec px(p.begin() + np, p.end());
        auto [py, ptape] = forward(probe, px);
        return dot(gout, py);
      };
      double err = finite_diff_check(fn, point, analytic, 1e-5);
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("accumulate sums gradients elementwise") {
  MlpEncoder e = random_encoder({2, 3, 2}, Activation::tanh, 4);
  auto [y1, t1] = forward(e, {0.5, -1.0});
  auto [y2, t2] = forward(e, {-0.25, 2.0});
  EncoderGrads a = backward(e, t1, {1.0, 2.0});
  EncoderGrads b = backward(e, t2, {-0.5, 0.75});

  EncoderGrads z = zero_grads(e);
  EncoderGrads az = accumulate(a, z);
  CHECK(grads_flat(e, az) == grads_flat(e, a));

  EncoderGrads aa = accumulate(a, a);
  Vec fa = grads_flat(e, a), faa = grads_flat(e, aa);
  for (std::size_t i = 0; i < fa.size(); ++i)
    CHECK(faa[i] == doctest::Approx(2.0 * fa[i]).epsilon(1e-15));

  Vec ab = grads_flat(e, accumulate(a, b));
  Vec ba = grads_flat(e, accumulate(b, a));
  CHECK(ab == ba);

  EncoderGrads bad = b;
  bad.bias_grads[0].push_back(0.0);
  CHECK_THROWS_AS(accumulate(a, bad), std::invalid_argument);
}

TEST_CASE("relu subgradient at zero pre-activation is zero") {
  // One hidden unit sitting exactly at z = 0: no gradient flows through it.
  MlpEncoder e;
  e.layer_dims = {1, 1, 1};
  e.weights = {{1.0}, {3.0}};
  e.biases = {{0.0}, {0.0}};
  e.activation = Activation::relu;
  auto [y, tape] = forward(e, {0.0});
  CHECK(y == Vec{0.0});
  EncoderGrads g = backward(e, tape, {1.0});
  CHECK(g.input_grad == Vec{0.0});
  CHECK(g.weight_grads[0] == std::vector<double>{0.0});
}

TEST_CASE("encoder json round-trips bit-exactly") {
  MlpEncoder e = random_encoder({3, 5, 2}, Activation::tanh, 77);
  MlpEncoder back = encoder_from_json(encoder_to_json(e));
  CHECK(back.layer_dims == e.layer_dims);
  CHECK(back.activation == e.activation);
  CHECK(back.params_flat() == e.params_flat());

  MlpEncoder id = identity_encoder(6);
  MlpEncoder idb = encoder_from_json(encoder_to_json(id));
  CHECK(idb.is_identity());
  CHECK(idb.input_dim() == 6);
}
