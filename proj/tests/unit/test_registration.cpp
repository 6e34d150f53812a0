#include <cmath>
#include <random>

#include <Eigen/Geometry>

#include "doctest.h"
#include "weberline/kdtree.hpp"
#include "weberline/metrics.hpp"
#include "weberline/phantom.hpp"
#include "weberline/registration.hpp"

using namespace weberline;

namespace {

constexpr double kPi = 3.14159265358979323846;

RigidTransform random_rigid(std::mt19937_64& rng, double max_deg, double max_mm, const Eigen::Vector3d& pivot) {
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  const Eigen::Vector3d dir = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  RigidTransform t;
  t.rotation = Eigen::AngleAxisd(max_deg * u(rng) * kPi / 180, axis).toRotationMatrix();
  t.translation = pivot - t.rotation * pivot + max_mm * u(rng) * dir;
  return t;
}

void check_proper(const RigidTransform& t) {
  CHECK((t.rotation.transpose() * t.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
  CHECK(std::abs(t.rotation.determinant() - 1.0) < 1e-9);
  CHECK(t.scale > 0);
}

double cloud_rmse(const PointCloud& c, const RigidTransform& a, const RigidTransform& b) {
  double s = 0;
  for (const auto& p : c.points) s += (a.apply(p) - b.apply(p)).squaredNorm();
  return std::sqrt(s / c.size());
}

Mask cube(int n, int side, int at) {
  Grid g;
  g.dims = {n, n, n};
  Mask m(g);
  for (int k = at; k < at + side; ++k)
    for (int j = at; j < at + side; ++j)
      for (int i = at; i < at + side; ++i) m.at(i, j, k) = kTibia;
  return m;
}

}  // namespace

TEST_SUITE("registration") {

TEST_CASE("surface extraction") {
  CHECK(extract_surface_points(cube(5, 3, 1)).size() == 26);
  // A cube touching the volume edge still exposes its boundary faces.
  CHECK(extract_surface_points(cube(3, 3, 0)).size() == 26);

  Grid g;
  g.dims = {4, 4, 4};
  g.spacing = {2.0, 1.0, 0.5};
  g.origin = {10, 0, 0};
  Mask one(g);
  one.at(1, 2, 3) = kFibula;
  const PointCloud c = extract_surface_points(one);
  REQUIRE(c.size() == 1);
  CHECK(c.points[0].isApprox(Eigen::Vector3d(13.0, 2.5, 1.75)));
  CHECK_THROWS_AS(extract_surface_points(one, SurfaceLabel::Tibia), RegistrationError);
  CHECK_THROWS_AS(extract_surface_points(Mask(g)), RegistrationError);

  // Brute-force 6-neighbour scan on random phantoms.
  const Mask m = generate_healthy(PhantomParams{});
  std::size_t want = 0;
  const auto& d = m.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (m.at(i, j, k) != kFibula) continue;
        const int nb[6][3] = {{i + 1, j, k}, {i - 1, j, k}, {i, j + 1, k}, {i, j - 1, k}, {i, j, k + 1}, {i, j, k - 1}};
        bool surface = false;
        for (const auto& q : nb)
          surface |= !m.grid.contains(q[0], q[1], q[2]) || m.at(q[0], q[1], q[2]) != kFibula;
        want += surface;
      }
  CHECK(extract_surface_points(m, SurfaceLabel::Fibula).size() == want);
}

TEST_CASE("mirror cloud") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 5);
  PointCloud c;
  for (int i = 0; i < 30; ++i) c.points.emplace_back(n(rng), n(rng), n(rng));
  c.points.emplace_back(3.5, 1, 1);
  const PointCloud m = mirror_cloud(c, 3.5);
  CHECK(m.points.back().isApprox(c.points.back()));
  CHECK(m.centroid().x() == doctest::Approx(7.0 - c.centroid().x()));
  const PointCloud back = mirror_cloud(m, 3.5);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK((back.points[i] - c.points[i]).norm() < 1e-12);
}

TEST_CASE("estimate_transform") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 10);
  PointCloud src;
  for (int i = 0; i < 40; ++i) src.points.emplace_back(n(rng), n(rng), n(rng));

  const RigidTransform id = estimate_transform(src, src);
  CHECK((id.matrix() - Eigen::Matrix4d::Identity()).norm() < 1e-9);

  RigidTransform gt;
  gt.rotation = Eigen::AngleAxisd(10 * kPi / 180, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  gt.translation = {5, 0, 0};
  const RigidTransform est = estimate_transform(src, gt.apply(src));
  CHECK(cloud_rmse(src, est, gt) < 1e-9);

  for (int rep = 0; rep < 100; ++rep) {
    const RigidTransform t = random_rigid(rng, 180, 50, Eigen::Vector3d::Zero());
    const RigidTransform e = estimate_transform(src, t.apply(src));
    check_proper(e);
    CHECK(cloud_rmse(src, e, t) < 1e-9);
  }

  // A mirrored target forces the reflection fix; the result must stay proper.
  const RigidTransform r = estimate_transform(src, mirror_cloud(src, 0.0));
  check_proper(r);

  RigidTransform sim = random_rigid(rng, 30, 5, Eigen::Vector3d::Zero());
  sim.scale = 1.07;
  const RigidTransform es = estimate_transform(src, sim.apply(src), true);
  CHECK(es.scale == doctest::Approx(1.07).epsilon(1e-10));
  CHECK(cloud_rmse(src, es, sim) < 1e-9);

  PointCloud line;
  for (int i = 0; i < 5; ++i) line.points.emplace_back(i, 2.0 * i, -i);
  CHECK_THROWS_AS(estimate_transform(line, line), RegistrationError);
  PointCloud two;
  two.points = {Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()};
  CHECK_THROWS_AS(estimate_transform(two, two), RegistrationError);
  CHECK_THROWS_AS(estimate_transform(src, line), RegistrationError);
}

TEST_CASE("kd-tree matches brute force") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-10, 10);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 500; ++i) pts.emplace_back(std::round(u(rng)), std::round(u(rng)), std::round(u(rng)));
  const KdTree tree(pts);
  for (int q = 0; q < 300; ++q) {
    const Eigen::Vector3d p(u(rng), u(rng), u(rng));
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if ((pts[i] - p).squaredNorm() < (pts[best] - p).squaredNorm()) best = i;
    const auto hit = tree.nearest(p);
    CHECK(hit.index == best);
    CHECK(hit.squared_distance == doctest::Approx((pts[best] - p).squaredNorm()));
  }
}

TEST_CASE("icp") {
  const Mask h = generate_healthy(PhantomParams{});
  const PointCloud cloud = extract_surface_points(h);

  const IcpResult same = icp(cloud, cloud);
  CHECK((same.transform.matrix() - Eigen::Matrix4d::Identity()).norm() < 1e-8);
  CHECK(same.iterations <= 2);
  CHECK(same.rms_residual < 1e-9);

  IcpConfig one;
  one.max_iterations = 1;
  const IcpResult r1 = icp(cloud, RigidTransform{Eigen::Matrix3d::Identity(), {1, 0, 0}, 1}.apply(cloud), one);
  CHECK(r1.iterations == 1);
  CHECK(r1.objective.size() == 2);

  std::mt19937_64 rng(12);
  const Eigen::Vector3d centre = cloud.centroid();
  for (int rep = 0; rep < 10; ++rep) {
    const RigidTransform gt = random_rigid(rng, 15, 10, centre);
    const IcpResult r = icp(cloud, gt.apply(cloud));
    check_proper(r.transform);
    CHECK(cloud_rmse(cloud, r.transform, gt) < 0.1);
    for (std::size_t i = 1; i < r.objective.size(); ++i)
      CHECK(r.objective[i] <= r.objective[i - 1] * (1 + 1e-12) + 1e-12);
  }

  PointCloud tiny;
  tiny.points = {Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX()};
  CHECK_THROWS_AS(icp(tiny, cloud), RegistrationError);
  CHECK_THROWS_AS(icp(cloud, PointCloud{}), RegistrationError);

  IcpConfig bad;
  bad.max_iterations = 0;
  CHECK_THROWS(icp(cloud, cloud, bad));
  bad = {};
  bad.convergence_epsilon = 0;
  CHECK_THROWS(icp(cloud, cloud, bad));
  CHECK(IcpConfig{}.max_iterations == 50);
  CHECK(IcpConfig{}.convergence_epsilon == 1e-8);
  CHECK_FALSE(IcpConfig{}.allow_scale);
}

TEST_CASE("apply_transform") {
  const Mask h = generate_healthy(PhantomParams{});
  CHECK(apply_transform(h, RigidTransform::identity()) == h);

  // Shift by whole voxels: out(i) = in(i - s).
  RigidTransform t;
  t.translation = {2 * h.grid.spacing[0], -1 * h.grid.spacing[1], 3 * h.grid.spacing[2]};
  const Mask s = apply_transform(h, t);
  const auto& d = h.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const int si = i - 2, sj = j + 1, sk = k - 3;
        const std::uint8_t want = h.grid.contains(si, sj, sk) ? h.at(si, sj, sk) : kBackground;
        CHECK(s.at(i, j, k) == want);
      }

  std::mt19937_64 rng(6);
  const Eigen::Vector3d centre = extract_surface_points(h).centroid();
  for (int rep = 0; rep < 5; ++rep) {
    const RigidTransform r = random_rigid(rng, 15, 3, centre);
    const Mask back = apply_transform(apply_transform(h, r), r.inverse());
    CHECK(dice(back, h) >= 0.95);
  }
}

TEST_CASE("register_pair") {
  PhantomParams p;
  const Mask h = generate_healthy(p);
  const Mask mirrored = flip(h, Axis::X);

  const RegistrationResult self = register_pair(mirrored, h);
  CHECK(self.mirror_plane_x.has_value());
  CHECK(dice(self.transformed, h) >= 0.98);
  CHECK(self.rms_residual < 1e-6);

  RigidTransform rot;
  rot.rotation = Eigen::AngleAxisd(10 * kPi / 180, Eigen::Vector3d(0.3, 1, 0.2).normalized()).toRotationMatrix();
  const Eigen::Vector3d c = extract_surface_points(mirrored).centroid();
  rot.translation = c - rot.rotation * c;
  const RegistrationResult tilted = register_pair(apply_transform(mirrored, rot), h);
  CHECK(dice(tilted.transformed, h) >= 0.95);
  check_proper(tilted.transform);

  RegistrationOptions plain;
  plain.mirror = false;
  const RegistrationResult id = register_pair(h, h, plain);
  CHECK_FALSE(id.mirror_plane_x.has_value());
  CHECK((id.transform.matrix() - Eigen::Matrix4d::Identity()).norm() < 1e-8);
  CHECK(id.transformed == h);

  // Mirror + register against itself over assorted phantom shapes.
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 6; ++rep) {
    PhantomParams q;
    q.tibia_radius = 5.5 + (rng() % 20) * 0.1;
    q.fibula_radius = 2.2 + (rng() % 10) * 0.08;
    const Mask hq = generate_healthy(q);
    CHECK(dice(register_pair(flip(hq, Axis::X), hq).transformed, hq) >= 0.98);
  }
}

TEST_CASE("syndesmosis box and crop") {
  PhantomParams p;
  const Mask h = generate_healthy(p);
  const BBox b = syndesmosis_box(h, p.syndesmosis_lo, p.syndesmosis_hi, 7, 7, 2);
  CHECK(b.min[2] == p.syndesmosis_lo - 7);
  CHECK(b.max[2] == p.syndesmosis_hi + 7 + 1);
  // The box covers every foreground voxel inside its slab.
  for (int k = b.min[2]; k < b.max[2]; ++k)
    for (int j = 0; j < h.grid.dims[1]; ++j)
      for (int i = 0; i < h.grid.dims[0]; ++i)
        if (h.at(i, j, k)) {
          CHECK(i >= b.min[0] + 2);
          CHECK(i < b.max[0] - 2);
          CHECK(j >= b.min[1]);
          CHECK(j < b.max[1]);
        }
  const Mask c = crop_syndesmosis(h, b);
  CHECK(c == crop(h, b));
  CHECK_THROWS_AS(syndesmosis_box(h, 5, 3), RegistrationError);
  BBox outside{{0, 0, 0}, {h.grid.dims[0] + 1, 4, 4}};
  CHECK_THROWS(crop_syndesmosis(h, outside));
}

TEST_CASE("transform algebra") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    RigidTransform a = random_rigid(rng, 90, 20, Eigen::Vector3d::Zero());
    a.scale = 0.8 + (rng() % 5) * 0.1;
    const RigidTransform b = random_rigid(rng, 90, 20, Eigen::Vector3d::Zero());
    const Eigen::Vector3d p(1, -2, 3);
    CHECK(((a * b).apply(p) - a.apply(b.apply(p))).norm() < 1e-9);
    CHECK((a.inverse().apply(a.apply(p)) - p).norm() < 1e-9);
  }
  RigidTransform bad;
  bad.rotation(0, 0) = -1;
  CHECK_THROWS(bad.validate());
}

}  // TEST_SUITE
