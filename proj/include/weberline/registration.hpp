#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "weberline/volume.hpp"

namespace weberline {

class RegistrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PointCloud {
  std::vector<Eigen::Vector3d> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  Eigen::Vector3d centroid() const;
};

/// x -> scale * R x + t, mapping source physical coordinates onto the target.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double scale = 1.0;

  static RigidTransform identity() { return {}; }
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return scale * (rotation * p) + translation;
  }
  PointCloud apply(const PointCloud& c) const;
  RigidTransform inverse() const;
  // (a * b)(p) = a(b(p))
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);
  Eigen::Matrix4d matrix() const;

  // Throws if R is not a proper rotation within 1e-9 or scale <= 0.
  void validate(double tol = 1e-9) const;
};

enum class SurfaceLabel { Tibia, Fibula, Both };

struct IcpConfig {
  int max_iterations = 50;
  double convergence_epsilon = 1e-8;
  bool allow_scale = false;
  std::optional<double> max_correspondence_mm;
  // Start from the translation aligning the two centroids instead of identity.
  bool centroid_init = true;

  void validate() const;
};

struct IcpResult {
  RigidTransform transform;
  double rms_residual = 0.0;
  int iterations = 0;
  // Sum of squared correspondence distances at the start of each round,
  // followed by the value after the final update.
  std::vector<double> objective;
};

/// Voxel-center coordinates of selected voxels having at least one
/// 6-neighbor outside the selection (out-of-volume counts as outside).
PointCloud extract_surface_points(const Mask& m, SurfaceLabel label = SurfaceLabel::Both);

PointCloud mirror_cloud(const PointCloud& c, double plane_x);

/// Least-squares alignment of index-paired points (Umeyama); det(R) = +1.
RigidTransform estimate_transform(const PointCloud& src, const PointCloud& dst,
                                  bool allow_scale = false);

IcpResult icp(const PointCloud& src, const PointCloud& dst, const IcpConfig& cfg = {});

/// Nearest-neighbor warp by inverse mapping; output shares the input grid.
Mask apply_transform(const Mask& m, const RigidTransform& t);
/// Samples `m` on `target` at t^-1(p) for each target voxel center p.
Mask apply_transform(const Mask& m, const RigidTransform& t, const Grid& target);

struct RegistrationOptions {
  IcpConfig icp;
  bool mirror = true;
};

struct RegistrationResult {
  RigidTransform transform;  // mirrored-fractured -> healthy
  std::optional<double> mirror_plane_x;
  double rms_residual = 0.0;
  int iterations = 0;
  Mask transformed;  // on the healthy grid
};

/// Mirrors the fractured surface about its centroid x-plane, registers it onto
/// the healthy template with ICP and warps the fractured mask accordingly.
RegistrationResult register_pair(const Mask& fractured, const Mask& healthy,
                                 const RegistrationOptions& opts = {});

/// Template crop window: the x/y footprint of the template's foreground over
/// slices [lo - below, hi + above], padded by `xy_margin` voxels and clipped.
BBox syndesmosis_box(const Mask& healthy, int syndesmosis_lo, int syndesmosis_hi, int below = 7,
                     int above = 7, int xy_margin = 2);

Mask crop_syndesmosis(const Mask& transformed, const BBox& healthy_box);

}  // namespace weberline
