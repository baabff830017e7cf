// Class prototypes as geometric regions: hyperspheres (squared-distance
// radius), cone-like prototypes (angular radius around a direction), and
// isotropic Gaussians (log-sigma spread). Each variant has a closed-form
// initializer from support embeddings and a measurement M(f, proto) with
// analytic gradients w.r.t. the embedding, the center, and the scale.
#pragma once

#include <json.hpp>
#include <variant>
#include <vector>

#include "fewshot/numerics.hpp"

namespace fewshot {

struct HypersphereProto {
  Vec center;
  double radius = 0.0;  // squared-distance units; sign unconstrained
};

struct ConeProto {
  Vec center;  // direction; never zero
  double angle = 0.0;  // radians
};

struct GaussianProto {
  Vec mean;
  double log_sigma = 0.0;  // sigma = exp(log_sigma) > 0
};

struct MeasureResult {
  double value = 0.0;
  Vec grad_embedding;
  Vec grad_center;
  double grad_scale = 0.0;  // d value / d (radius | angle | log_sigma)
};

// Thrown by init_cone when the support embeddings average to the zero vector
// and no direction can be defined.
class DegenerateSupportError : public std::runtime_error {
 public:
  explicit DegenerateSupportError(const std::string& what)
      : std::runtime_error(what) {}
};

constexpr double kSigmaSqFloor = 1e-4;

// center = mean embedding, radius = mean squared distance to it. A single
// support point gives radius 0.
HypersphereProto init_hypersphere(const std::vector<Vec>& support);

// M = ||f - z||^2 - radius.
MeasureResult measure_hypersphere(const Vec& f, const HypersphereProto& p);

// center = unnormalized mean embedding, angle = mean angle between support
// embeddings and the center.
ConeProto init_cone(const std::vector<Vec>& support);

// theta = angle(f, center). Outside the cone (theta >= |angle|) the
// measurement is -cos(theta - angle); inside it is the constant -1 with zero
// gradients.
MeasureResult measure_cone(const Vec& f, const ConeProto& p);

struct ConeDisjointness {
  double value = 0.0;
  std::vector<Vec> grad_centers;
  std::vector<double> grad_angles;
};

// Mean-over-N of the pairwise overlap penalty max(|e_i| + |e_j| -
// angle(z_i, z_j), 0) over unordered pairs i < j.
ConeDisjointness cone_disjointness(const std::vector<ConeProto>& protos);

// mean = mean embedding; sigma^2 = per-dimension variance of the support
// pooled over dimensions, floored at kSigmaSqFloor.
GaussianProto init_gaussian(const std::vector<Vec>& support);

// Negative log density of N(mean, sigma^2 I) at f, i.e.
// ||f - mean||^2 / (2 sigma^2) + d log sigma + (d/2) log 2pi.
MeasureResult measure_gaussian(const Vec& f, const GaussianProto& p);

using AnyProto = std::variant<HypersphereProto, ConeProto, GaussianProto>;

const Vec& proto_center(const AnyProto& p);
double proto_scale(const AnyProto& p);
void set_proto_scale(AnyProto& p, double scale);

// Flat view [center..., scale] used by the optimizer.
Vec proto_params(const AnyProto& p);
void set_proto_params(AnyProto& p, const Vec& params);

MeasureResult measure_proto(const Vec& f, const AnyProto& p);

nlohmann::json proto_to_json(const AnyProto& p);
AnyProto proto_from_json(const nlohmann::json& j);

}  // namespace fewshot
