#include "fewshot/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace fewshot {

namespace {

// splitmix64 finalizer; the golden-gamma increment below drives the counter.
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

}  // namespace

double dot(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

double norm(const Vec& a) { return std::sqrt(squared_norm(a)); }

double sq_euclidean(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "sq_euclidean: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<double> softmax_of_negated(const std::vector<double>& scores) {
  require(!scores.empty(), "softmax_of_negated: empty score list");
  double lo = scores[0];
  for (double m : scores) {
    require(std::isfinite(m), "softmax_of_negated: non-finite score");
    lo = std::min(lo, m);
  }
  // exp(-(m - lo)) <= 1, so nothing overflows no matter the magnitudes.
  std::vector<double> p(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(-(scores[i] - lo));
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

double log_sum_exp_of_negated(const std::vector<double>& scores) {
  require(!scores.empty(), "log_sum_exp_of_negated: empty score list");
  double lo = scores[0];
  for (double m : scores) {
    require(std::isfinite(m), "log_sum_exp_of_negated: non-finite score");
    lo = std::min(lo, m);
  }
  double sum = 0.0;
  for (double m : scores) sum += std::exp(-(m - lo));
  return -lo + std::log(sum);
}

double clamped_cosine(double u) {
  require(std::isfinite(u), "arccos input must be finite");
  return std::clamp(u, -1.0 + kArccosClamp, 1.0 - kArccosClamp);
}

double safe_arccos(double u) { return std::acos(clamped_cosine(u)); }

double safe_arccos_grad(double u) {
  double c = clamped_cosine(u);
  return -1.0 / std::sqrt(1.0 - c * c);
}

double finite_diff_check(const std::function<double(const Vec&)>& fn,
                         const Vec& point, const Vec& analytic_grad,
                         double h) {
  require(point.size() == analytic_grad.size(),
          "finite_diff_check: gradient length mismatch");
  require(h > 0.0 && std::isfinite(h), "finite_diff_check: h must be > 0");
  Vec probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    double fp = fn(probe);
    probe[i] = point[i] - h;
    double fm = fn(probe);
    probe[i] = point[i];
    double numeric = (fp - fm) / (2.0 * h);
    double denom = std::max(1e-8, std::abs(numeric) + std::abs(analytic_grad[i]));
    worst = std::max(worst, std::abs(numeric - analytic_grad[i]) / denom);
  }
  return worst;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  // Salts are the PCG64 multiplier/increment; any fixed odd constants work,
  // these are just recognizable.
  key_ = mix64(mix64(seed ^ 0x5851F42D4C957F2DULL) ^
               mix64(stream_id ^ 0x14057B7EF767814FULL));
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + kGamma * counter_);
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::size_t Rng::next_below(std::size_t n) {
  require(n > 0, "next_below: n must be positive");
  if (n == 1) return 0;
  // Mask-and-reject keeps the draw unbiased with pure integer ops.
  std::uint64_t mask = std::bit_ceil(static_cast<std::uint64_t>(n)) - 1;
  for (;;) {
    std::uint64_t v = next_u64() & mask;
    if (v < n) return static_cast<std::size_t>(v);
  }
}

double Rng::next_normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u1;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_normal_ = r * std::sin(a);
  has_spare_normal_ = true;
  return r * std::cos(a);
}

Rng Rng::fork(std::uint64_t stream_id) const {
  Rng child;
  child.seed_ = seed_;
  child.stream_id_ = stream_id;
  child.key_ = mix64(key_ ^ mix64(stream_id ^ 0xD1B54A32D192ED03ULL));
  child.counter_ = 0;
  child.has_spare_normal_ = false;
  return child;
}

}  // namespace fewshot
