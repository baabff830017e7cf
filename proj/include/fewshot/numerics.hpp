// Shared numeric kernel: vector helpers, stable softmax, clamped arccos,
// central-difference gradient checking, and a splittable counter-based RNG.
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewshot {

using Vec = std::vector<double>;

// Input-contract failures throw std::invalid_argument with a short reason.
inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

double dot(const Vec& a, const Vec& b);
double squared_norm(const Vec& a);
double norm(const Vec& a);

// Squared Euclidean distance between equal-length vectors.
double sq_euclidean(const Vec& a, const Vec& b);

// Given raw scores M, returns p_n = exp(-M_n) / sum_k exp(-M_k), computed
// with a max shift so scores with magnitude up to ~1e6 stay finite.
std::vector<double> softmax_of_negated(const std::vector<double>& scores);

// log(sum_n exp(-M_n)), same shifting as softmax_of_negated.
double log_sum_exp_of_negated(const std::vector<double>& scores);

// Inputs to arccos are clamped into [-1 + kArccosClamp, 1 - kArccosClamp]
// before evaluation; the derivative helper uses the clamped argument too, so
// gradients stay bounded instead of hitting the 1/sqrt(1-u^2) pole.
constexpr double kArccosClamp = 1e-12;
double clamped_cosine(double u);
double safe_arccos(double u);
double safe_arccos_grad(double u);

// Max over coordinates of the relative error between analytic_grad and the
// central difference of fn at point. Relative error of a pair (a, b) is
// |a - b| / max(1e-8, |a| + |b|).
double finite_diff_check(const std::function<double(const Vec&)>& fn,
                         const Vec& point, const Vec& analytic_grad, double h);

// Deterministic splittable RNG. A stream is identified by (seed, stream_id);
// draws are counter-based (splitmix64 finalizer over key + n*gamma), so the
// same stream replays the same sequence on any platform, and fork() derives a
// child stream from the parent's key without consuming parent state.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  explicit Rng(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t next_u64();
  double next_double();               // uniform [0, 1)
  std::size_t next_below(std::size_t n);  // uniform {0, ..., n-1}, unbiased
  double next_normal();               // standard normal (Box-Muller)

  Rng fork(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Fisher-Yates prefix shuffle: permutes v so its first k entries are a
  // uniform draw of k distinct elements.
  template <typename T>
  void partial_shuffle(std::vector<T>& v, std::size_t k) {
    require(k <= v.size(), "partial_shuffle: k exceeds size");
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + next_below(v.size() - i);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t key_ = 0;      // derived stream key
  std::uint64_t counter_ = 0;  // draws consumed
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace fewshot
