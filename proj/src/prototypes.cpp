#include "fewshot/prototypes.hpp"

#include <cmath>

namespace fewshot {

namespace {

Vec mean_of(const std::vector<Vec>& vs) {
  require(!vs.empty(), "prototype init: empty support");
  std::size_t d = vs[0].size();
  Vec m(d, 0.0);
  for (const auto& v : vs) {
    require(v.size() == d, "prototype init: mixed support dimensions");
    for (std::size_t i = 0; i < d; ++i) m[i] += v[i];
  }
  for (auto& x : m) x /= static_cast<double>(vs.size());
  return m;
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

HypersphereProto init_hypersphere(const std::vector<Vec>& support) {
  HypersphereProto p;
  p.center = mean_of(support);
  double s = 0.0;
  for (const auto& f : support) s += sq_euclidean(f, p.center);
  p.radius = s / static_cast<double>(support.size());
  return p;
}

MeasureResult measure_hypersphere(const Vec& f, const HypersphereProto& p) {
  require(f.size() == p.center.size(), "measure_hypersphere: dim mismatch");
  MeasureResult r;
  r.grad_embedding.resize(f.size());
  r.grad_center.resize(f.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    double d = f[i] - p.center[i];
    sq += d * d;
    r.grad_embedding[i] = 2.0 * d;
    r.grad_center[i] = -2.0 * d;
  }
  r.value = sq - p.radius;
  r.grad_scale = -1.0;
  return r;
}

ConeProto init_cone(const std::vector<Vec>& support) {
  require(!support.empty(), "init_cone: empty support");
  for (const auto& f : support)
    require(squared_norm(f) > 0.0, "init_cone: zero support embedding");
  ConeProto p;
  p.center = mean_of(support);
  double nz = norm(p.center);
  if (nz == 0.0)
    throw DegenerateSupportError(
        "init_cone: support embeddings average to the zero vector");
  if (support.size() == 1) {
    p.angle = 0.0;  // the single embedding is its own axis
    return p;
  }
  double sum = 0.0;
  for (const auto& f : support)
    sum += safe_arccos(dot(f, p.center) / (norm(f) * nz));
  p.angle = sum / static_cast<double>(support.size());
  return p;
}

MeasureResult measure_cone(const Vec& f, const ConeProto& p) {
  require(f.size() == p.center.size(), "measure_cone: dim mismatch");
  double nf = norm(f), nz = norm(p.center);
  require(nf > 0.0, "measure_cone: zero-norm embedding");
  require(nz > 0.0, "measure_cone: zero-norm center");

  double c = dot(f, p.center) / (nf * nz);
  double theta = safe_arccos(c);

  MeasureResult r;
  std::size_t d = f.size();
  if (theta < std::abs(p.angle)) {
    // inside the cone: constant region of the measurement
    r.value = -1.0;
    r.grad_embedding.assign(d, 0.0);
    r.grad_center.assign(d, 0.0);
    r.grad_scale = 0.0;
    return r;
  }
  double u = theta - p.angle;
  r.value = -std::cos(u);
  double common = std::sin(u) * safe_arccos_grad(c);
  r.grad_embedding.resize(d);
  r.grad_center.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    double dc_df = p.center[i] / (nf * nz) - c * f[i] / (nf * nf);
    double dc_dz = f[i] / (nf * nz) - c * p.center[i] / (nz * nz);
    r.grad_embedding[i] = common * dc_df;
    r.grad_center[i] = common * dc_dz;
  }
  r.grad_scale = -std::sin(u);
  return r;
}

ConeDisjointness cone_disjointness(const std::vector<ConeProto>& protos) {
  std::size_t n = protos.size();
  require(n >= 2, "cone_disjointness: need at least 2 prototypes");
  for (const auto& p : protos)
    require(squared_norm(p.center) > 0.0, "cone_disjointness: zero center");

  ConeDisjointness out;
  out.grad_angles.assign(n, 0.0);
  for (const auto& p : protos)
    out.grad_centers.emplace_back(p.center.size(), 0.0);

  double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const Vec& zi = protos[i].center;
      const Vec& zj = protos[j].center;
      require(zi.size() == zj.size(), "cone_disjointness: dim mismatch");
      double ni = norm(zi), nj = norm(zj);
      double c = dot(zi, zj) / (ni * nj);
      double theta = safe_arccos(c);
      double overlap =
          std::abs(protos[i].angle) + std::abs(protos[j].angle) - theta;
      if (overlap <= 0.0) continue;  // max(., 0) inactive; subgradient 0 at 0

      out.value += overlap * inv_n;
      out.grad_angles[i] += sign_of(protos[i].angle) * inv_n;
      out.grad_angles[j] += sign_of(protos[j].angle) * inv_n;

      double dtheta_dc = safe_arccos_grad(c);
      for (std::size_t k = 0; k < zi.size(); ++k) {
        double dc_dzi = zj[k] / (ni * nj) - c * zi[k] / (ni * ni);
        double dc_dzj = zi[k] / (ni * nj) - c * zj[k] / (nj * nj);
        out.grad_centers[i][k] -= dtheta_dc * dc_dzi * inv_n;
        out.grad_centers[j][k] -= dtheta_dc * dc_dzj * inv_n;
      }
    }
  }
  return out;
}

GaussianProto init_gaussian(const std::vector<Vec>& support) {
  GaussianProto p;
  p.mean = mean_of(support);
  double ss = 0.0;
  for (const auto& f : support) ss += sq_euclidean(f, p.mean);
  double k_times_d = static_cast<double>(support.size()) *
                     static_cast<double>(p.mean.size());
  double var = std::max(kSigmaSqFloor, ss / k_times_d);
  p.log_sigma = 0.5 * std::log(var);
  return p;
}

MeasureResult measure_gaussian(const Vec& f, const GaussianProto& p) {
  require(f.size() == p.mean.size(), "measure_gaussian: dim mismatch");
  double d = static_cast<double>(f.size());
  double inv_var = std::exp(-2.0 * p.log_sigma);

  MeasureResult r;
  r.grad_embedding.resize(f.size());
  r.grad_center.resize(f.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    double diff = f[i] - p.mean[i];
    sq += diff * diff;
    r.grad_embedding[i] = diff * inv_var;
    r.grad_center[i] = -diff * inv_var;
  }
  r.value = 0.5 * sq * inv_var + d * p.log_sigma + 0.5 * d * std::log(2.0 * M_PI);
  r.grad_scale = -sq * inv_var + d;
  return r;
}

const Vec& proto_center(const AnyProto& p) {
  return std::visit(
      [](const auto& v) -> const Vec& {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianProto>)
          return v.mean;
        else
          return v.center;
      },
      p);
}

double proto_scale(const AnyProto& p) {
  return std::visit(
      [](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, HypersphereProto>)
          return v.radius;
        else if constexpr (std::is_same_v<T, ConeProto>)
          return v.angle;
        else
          return v.log_sigma;
      },
      p);
}

void set_proto_scale(AnyProto& p, double scale) {
  std::visit(
      [scale](auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, HypersphereProto>)
          v.radius = scale;
        else if constexpr (std::is_same_v<T, ConeProto>)
          v.angle = scale;
        else
          v.log_sigma = scale;
      },
      p);
}

Vec proto_params(const AnyProto& p) {
  Vec out = proto_center(p);
  out.push_back(proto_scale(p));
  return out;
}

void set_proto_params(AnyProto& p, const Vec& params) {
  const Vec& center = proto_center(p);
  require(params.size() == center.size() + 1,
          "set_proto_params: length mismatch");
  Vec new_center(params.begin(), params.end() - 1);
  std::visit(
      [&](auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianProto>)
          v.mean = new_center;
        else
          v.center = new_center;
      },
      p);
  set_proto_scale(p, params.back());
}

MeasureResult measure_proto(const Vec& f, const AnyProto& p) {
  return std::visit(
      [&f](const auto& v) -> MeasureResult {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, HypersphereProto>)
          return measure_hypersphere(f, v);
        else if constexpr (std::is_same_v<T, ConeProto>)
          return measure_cone(f, v);
        else
          return measure_gaussian(f, v);
      },
      p);
}

nlohmann::json proto_to_json(const AnyProto& p) {
  const char* variant = std::holds_alternative<HypersphereProto>(p)
                            ? "hypersphere"
                            : (std::holds_alternative<ConeProto>(p) ? "cone"
                                                                    : "gaussian");
  return {{"variant", variant},
          {"center", proto_center(p)},
          {"scale", proto_scale(p)}};
}

AnyProto proto_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("variant") && j.contains("center") &&
              j.contains("scale"),
          "proto json: missing fields");
  Vec center = j.at("center").get<Vec>();
  double scale = j.at("scale").get<double>();
  std::string variant = j.at("variant").get<std::string>();
  if (variant == "hypersphere") return HypersphereProto{center, scale};
  if (variant == "cone") return ConeProto{center, scale};
  if (variant == "gaussian") return GaussianProto{center, scale};
  throw std::invalid_argument("proto json: unknown variant " + variant);
}

}  // namespace fewshot
