#include "weberline/registration.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "weberline/kdtree.hpp"

namespace weberline {

namespace {

Eigen::Vector3d to_eigen(const Vec3& v) { return {v[0], v[1], v[2]}; }

// Nearest-neighbor resampling of `m` onto `target` through an inverse map.
Mask warp(const Mask& m, const Grid& target,
          const std::function<Eigen::Vector3d(const Eigen::Vector3d&)>& inverse_map) {
  Mask out(target);
  const auto& d = target.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const Eigen::Vector3d q = inverse_map(to_eigen(target.center(i, j, k)));
        const Vec3 u = m.grid.continuous_index({q.x(), q.y(), q.z()});
        const int si = static_cast<int>(std::floor(u[0] + 0.5));
        const int sj = static_cast<int>(std::floor(u[1] + 0.5));
        const int sk = static_cast<int>(std::floor(u[2] + 0.5));
        if (m.grid.contains(si, sj, sk)) out.at(i, j, k) = m.at(si, sj, sk);
      }
  return out;
}

bool selected(std::uint8_t v, SurfaceLabel label) {
  switch (label) {
    case SurfaceLabel::Tibia: return v == kTibia;
    case SurfaceLabel::Fibula: return v == kFibula;
    case SurfaceLabel::Both: return v != kBackground;
  }
  return false;
}

}  // namespace

Eigen::Vector3d PointCloud::centroid() const {
  if (points.empty()) throw RegistrationError("centroid of empty point cloud");
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& p : points) c += p;
  return c / static_cast<double>(points.size());
}

PointCloud RigidTransform::apply(const PointCloud& c) const {
  PointCloud out;
  out.points.reserve(c.size());
  for (const auto& p : c.points) out.points.push_back(apply(p));
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.scale = 1.0 / scale;
  inv.translation = -inv.scale * (inv.rotation * translation);
  return inv;
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform c;
  c.rotation = a.rotation * b.rotation;
  c.scale = a.scale * b.scale;
  c.translation = a.scale * (a.rotation * b.translation) + a.translation;
  return c;
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = scale * rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

void RigidTransform::validate(double tol) const {
  if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm() > tol)
    throw RegistrationError("rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > tol)
    throw RegistrationError("rotation determinant is not +1");
  if (!(scale > 0.0)) throw RegistrationError("scale must be positive");
}

void IcpConfig::validate() const {
  if (max_iterations < 1) throw RegistrationError("max_iterations must be >= 1");
  if (!(convergence_epsilon > 0.0)) throw RegistrationError("convergence_epsilon must be > 0");
  if (max_correspondence_mm && !(*max_correspondence_mm > 0.0))
    throw RegistrationError("correspondence cap must be positive");
}

PointCloud extract_surface_points(const Mask& m, SurfaceLabel label) {
  static constexpr int kN[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  PointCloud out;
  const auto& d = m.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (!selected(m.at(i, j, k), label)) continue;
        bool surface = false;
        for (const auto& n : kN) {
          const int a = i + n[0], b = j + n[1], c = k + n[2];
          if (!m.grid.contains(a, b, c) || !selected(m.at(a, b, c), label)) {
            surface = true;
            break;
          }
        }
        if (surface) out.points.push_back(to_eigen(m.grid.center(i, j, k)));
      }
  if (out.empty()) throw RegistrationError("empty label region");
  return out;
}

PointCloud mirror_cloud(const PointCloud& c, double plane_x) {
  PointCloud out = c;
  for (auto& p : out.points) p.x() = 2.0 * plane_x - p.x();
  return out;
}

RigidTransform estimate_transform(const PointCloud& src, const PointCloud& dst, bool allow_scale) {
  if (src.size() != dst.size()) throw RegistrationError("point clouds differ in size");
  if (src.size() < 3) throw RegistrationError("need at least 3 correspondences");
  const Eigen::Vector3d mu_s = src.centroid();
  const Eigen::Vector3d mu_d = dst.centroid();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector3d a = src.points[i] - mu_s;
    cov += (dst.points[i] - mu_d) * a.transpose();
    var_s += a.squaredNorm();
  }
  const double n = static_cast<double>(src.size());
  cov /= n;
  var_s /= n;

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0])
    throw RegistrationError("degenerate configuration: cross-covariance rank < 2");

  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d s(1.0, 1.0, 1.0);
  if (u.determinant() * v.determinant() < 0.0) s[2] = -1.0;

  RigidTransform t;
  t.rotation = u * s.asDiagonal() * v.transpose();
  if (allow_scale) t.scale = sv.dot(s) / var_s;
  t.translation = mu_d - t.scale * (t.rotation * mu_s);
  return t;
}

IcpResult icp(const PointCloud& src, const PointCloud& dst, const IcpConfig& cfg) {
  cfg.validate();
  if (src.size() < 3 || dst.size() < 3) throw RegistrationError("empty clouds");
  const KdTree tree(dst.points);

  IcpResult res;
  if (cfg.centroid_init) res.transform.translation = dst.centroid() - src.centroid();

  PointCloud matched_src, matched_dst;
  auto correspond = [&](const RigidTransform& t) {
    matched_src.points.clear();
    matched_dst.points.clear();
    double sum = 0.0;
    for (const auto& p : src.points) {
      const auto hit = tree.nearest(t.apply(p));
      if (cfg.max_correspondence_mm &&
          hit.squared_distance > *cfg.max_correspondence_mm * *cfg.max_correspondence_mm)
        continue;
      matched_src.points.push_back(p);
      matched_dst.points.push_back(dst.points[hit.index]);
      sum += hit.squared_distance;
    }
    return sum;
  };

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    res.objective.push_back(correspond(res.transform));
    if (matched_src.size() < 3) throw RegistrationError("too few correspondences within cap");
    const RigidTransform next = estimate_transform(matched_src, matched_dst, cfg.allow_scale);
    const double delta = (next.matrix() - res.transform.matrix()).norm();
    res.transform = next;
    res.iterations = it;
    if (delta < cfg.convergence_epsilon) break;
  }
  const double final_sum = correspond(res.transform);
  res.objective.push_back(final_sum);
  res.rms_residual =
      matched_src.empty() ? 0.0 : std::sqrt(final_sum / static_cast<double>(matched_src.size()));
  return res;
}

Mask apply_transform(const Mask& m, const RigidTransform& t) {
  return apply_transform(m, t, m.grid);
}

Mask apply_transform(const Mask& m, const RigidTransform& t, const Grid& target) {
  const RigidTransform inv = t.inverse();
  return warp(m, target, [&](const Eigen::Vector3d& p) { return inv.apply(p); });
}

RegistrationResult register_pair(const Mask& fractured, const Mask& healthy,
                                 const RegistrationOptions& opts) {
  const PointCloud moving = extract_surface_points(fractured);
  const PointCloud fixed = extract_surface_points(healthy);

  RegistrationResult out;
  PointCloud source = moving;
  if (opts.mirror) {
    out.mirror_plane_x = moving.centroid().x();
    source = mirror_cloud(moving, *out.mirror_plane_x);
  }
  const IcpResult r = icp(source, fixed, opts.icp);
  out.transform = r.transform;
  out.rms_residual = r.rms_residual;
  out.iterations = r.iterations;

  const RigidTransform inv = r.transform.inverse();
  const std::optional<double> plane = out.mirror_plane_x;
  out.transformed = warp(fractured, healthy.grid, [&](const Eigen::Vector3d& p) {
    Eigen::Vector3d q = inv.apply(p);
    if (plane) q.x() = 2.0 * *plane - q.x();
    return q;
  });
  return out;
}

BBox syndesmosis_box(const Mask& healthy, int lo, int hi, int below, int above, int xy_margin) {
  const auto& d = healthy.grid.dims;
  if (lo > hi || below < 0 || above < 0 || xy_margin < 0)
    throw RegistrationError("invalid syndesmosis range");
  BBox box;
  box.min[2] = std::max(0, lo - below);
  box.max[2] = std::min(d[2], hi + above + 1);
  if (box.min[2] >= box.max[2]) throw RegistrationError("syndesmosis range outside volume");
  int x0 = d[0], x1 = -1, y0 = d[1], y1 = -1;
  for (int k = box.min[2]; k < box.max[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i)
        if (healthy.at(i, j, k) != kBackground) {
          x0 = std::min(x0, i);
          x1 = std::max(x1, i);
          y0 = std::min(y0, j);
          y1 = std::max(y1, j);
        }
  if (x1 < 0) throw RegistrationError("template has no foreground in the syndesmosis range");
  box.min[0] = std::max(0, x0 - xy_margin);
  box.max[0] = std::min(d[0], x1 + 1 + xy_margin);
  box.min[1] = std::max(0, y0 - xy_margin);
  box.max[1] = std::min(d[1], y1 + 1 + xy_margin);
  return box;
}

Mask crop_syndesmosis(const Mask& transformed, const BBox& healthy_box) {
  return crop(transformed, healthy_box);
}

}  // namespace weberline
