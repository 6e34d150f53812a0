#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "weberline/volume.hpp"

using namespace weberline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "weberline_unit";
  fs::create_directories(dir);
  return dir / name;
}

Mask random_mask(std::mt19937_64& rng, Index3 dims) {
  Grid g;
  g.dims = dims;
  g.spacing = {0.5 + rng() % 4 * 0.25, 1.0, 1.5};
  g.origin = {-3.0, 2.5, 0.0};
  Mask m(g);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng() % 3);
  return m;
}

}  // namespace

TEST_SUITE("volume") {

TEST_CASE("save/load round trip is bit exact") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(-3000.0f, 3000.0f);
  for (int rep = 0; rep < 20; ++rep) {
    Grid g;
    g.dims = {1 + int(rng() % 6), 1 + int(rng() % 6), 1 + int(rng() % 6)};
    g.spacing = {0.7, 1.5, 10.0};
    g.origin = {1.25, -4.0, 9.5};
    Volume v(g);
    // Disk storage is f32, so draw f32-representable values.
    for (auto& x : v.data) x = u(rng);
    save_volume(v, scratch("v.rvol"));
    CHECK(load_volume(scratch("v.rvol")) == v);

    const Mask m = random_mask(rng, g.dims);
    save_mask(m, scratch("m.rvol"));
    const Mask back = load_mask(scratch("m.rvol"));
    CHECK(back == m);
    CHECK(back.count(kTibia) == m.count(kTibia));
  }
}

TEST_CASE("1-voxel and 4x4x4 files") {
  Grid g;
  Volume one(g, 42.0);
  save_volume(one, scratch("one.rvol"));
  CHECK(load_volume(scratch("one.rvol")).data.size() == 1);

  g.dims = {4, 4, 4};
  save_volume(Volume(g, 1.0), scratch("four.rvol"));
  CHECK(load_volume(scratch("four.rvol")).data.size() == 64);
}

TEST_CASE("malformed files are rejected") {
  Grid g;
  g.dims = {4, 4, 4};
  save_volume(Volume(g, 1.0), scratch("trunc.rvol"));
  const auto size = fs::file_size(scratch("trunc.rvol"));
  fs::resize_file(scratch("trunc.rvol"), size - 8);
  CHECK_THROWS_WITH_AS(load_volume(scratch("trunc.rvol")), "truncated payload", VolumeError);

  {
    std::ofstream os(scratch("zero.rvol"), std::ios::binary);
    const std::string header =
        R"({"dims":[0,4,4],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","kind":"volume"})";
    const auto n = static_cast<std::uint32_t>(header.size());
    os.write("RVOL0001", 8);
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((n >> (8 * i)) & 0xFF));
    os << header;
  }
  CHECK_THROWS_WITH_AS(load_volume(scratch("zero.rvol")), doctest::Contains("nonpositive dimension"),
                       VolumeError);

  {
    std::ofstream os(scratch("junk.rvol"), std::ios::binary);
    os << "not a volume at all";
  }
  CHECK_THROWS_WITH_AS(load_volume(scratch("junk.rvol")), doctest::Contains("malformed header"),
                       VolumeError);
  CHECK_THROWS_AS(load_volume(scratch("does_not_exist.rvol")), VolumeError);
}

TEST_CASE("HU window") {
  Grid g;
  g.dims = {3, 1, 1};
  Volume v(g);
  v.data = {-1000.0, 0.0, -2000.0};
  const Volume n = hu_window_normalize(v);
  CHECK(n.data[0] == 0.0);
  CHECK(n.data[1] == 0.5);
  CHECK(n.data[2] == 0.0);
  CHECK_THROWS_AS(hu_window_normalize(v, 5.0, 5.0), VolumeError);
  CHECK_THROWS_AS(hu_window_normalize(v, 6.0, 5.0), VolumeError);
}

TEST_CASE("HU window is bounded and monotone") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5000, 5000);
  Grid g;
  g.dims = {500, 1, 1};
  Volume v(g);
  for (auto& x : v.data) x = u(rng);
  std::sort(v.data.begin(), v.data.end());
  const Volume n = hu_window_normalize(v, -400.0, 1200.0);
  for (std::size_t i = 0; i < n.data.size(); ++i) {
    CHECK(n.data[i] >= 0.0);
    CHECK(n.data[i] <= 1.0);
    if (i) CHECK(n.data[i] >= n.data[i - 1]);
  }
}

TEST_CASE("resample") {
  Grid g;
  g.dims = {8, 8, 8};
  Volume c(g, 3.25);
  CHECK(resample(c, g.spacing) == c);
  const Volume half = resample(c, {2.0, 2.0, 2.0});
  CHECK(half.grid.dims == Index3{4, 4, 4});
  for (double x : half.data) CHECK(x == doctest::Approx(3.25).epsilon(1e-15));

  // Nearest-neighbor oracle: the source voxel whose center is closest, ties upward.
  Mask checker(g);
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 8; ++i) checker.at(i, j, k) = (i + j + k) % 2 ? kTibia : kFibula;
  const Mask sub = resample(checker, {2.0, 2.0, 2.0});
  REQUIRE(sub.grid.dims == Index3{4, 4, 4});
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        const Vec3 p = sub.grid.center(i, j, k);
        Index3 best{};
        for (int a = 0; a < 3; ++a) {
          double bd = INFINITY;
          for (int s = 0; s < 8; ++s) {
            const double d = std::abs(g.origin[a] + (s + 0.5) * g.spacing[a] - p[a]);
            if (d <= bd) bd = d, best[a] = s;
          }
        }
        CHECK(sub.at(i, j, k) == checker.at(best[0], best[1], best[2]));
      }
  CHECK(sub.at(0, 0, 0) == checker.at(1, 1, 1));
}

TEST_CASE("resample preserves physical extent") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> sp(0.3, 3.0);
  for (int rep = 0; rep < 50; ++rep) {
    Grid g;
    g.dims = {2 + int(rng() % 20), 2 + int(rng() % 20), 2 + int(rng() % 20)};
    g.spacing = {sp(rng), sp(rng), sp(rng)};
    const Vec3 target{sp(rng), sp(rng), sp(rng)};
    Mask m(g, kTibia);
    Mask out;
    try {
      out = resample(m, target);
    } catch (const VolumeError&) {
      continue;  // rounds to zero dims
    }
    const double tol = std::max({target[0], target[1], target[2]});
    for (int a = 0; a < 3; ++a)
      CHECK(std::abs(out.grid.dims[a] * out.grid.spacing[a] - g.dims[a] * g.spacing[a]) <= tol);
  }
  Grid tiny;
  tiny.dims = {1, 1, 1};
  CHECK_THROWS_AS(resample(Mask(tiny), {10.0, 1.0, 1.0}), VolumeError);
  CHECK_THROWS_AS(resample(Mask(tiny), {0.0, 1.0, 1.0}), VolumeError);
}

TEST_CASE("flip") {
  Grid g;
  g.dims = {4, 4, 4};
  Mask m(g);
  m.at(0, 0, 0) = kFibula;
  const Mask f = flip(m, Axis::X);
  CHECK(f.at(3, 0, 0) == kFibula);
  CHECK(f.foreground_count() == 1);

  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Mask r = random_mask(rng, {1 + int(rng() % 7), 1 + int(rng() % 7), 1 + int(rng() % 7)});
    for (Axis a : {Axis::X, Axis::Y, Axis::Z}) {
      const Mask once = flip(r, a);
      CHECK(flip(once, a) == r);
      for (std::uint8_t l : {kBackground, kTibia, kFibula}) CHECK(once.count(l) == r.count(l));
    }
  }
}

TEST_CASE("crop") {
  std::mt19937_64 rng(9);
  const Mask m = random_mask(rng, {6, 7, 8});
  CHECK(crop(m, BBox{{0, 0, 0}, {6, 7, 8}}) == m);

  const BBox b{{2, 3, 4}, {4, 5, 6}};
  const Mask c = crop(m, b);
  CHECK(c.grid.dims == Index3{2, 2, 2});
  for (int a = 0; a < 3; ++a)
    CHECK(c.grid.origin[a] == doctest::Approx(m.grid.origin[a] + b.min[a] * m.grid.spacing[a]));
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) CHECK(c.at(i, j, k) == m.at(i + 2, j + 3, k + 4));

  // crop(crop(m, outer), inner) == crop(m, outer.min + inner)
  for (int rep = 0; rep < 30; ++rep) {
    BBox outer, inner, composed;
    for (int a = 0; a < 3; ++a) {
      const int n = m.grid.dims[a];
      outer.min[a] = int(rng() % (n - 1));
      outer.max[a] = outer.min[a] + 1 + int(rng() % (n - outer.min[a]));
      const int w = outer.max[a] - outer.min[a];
      inner.min[a] = int(rng() % w);
      inner.max[a] = inner.min[a] + 1 + int(rng() % (w - inner.min[a]));
      composed.min[a] = outer.min[a] + inner.min[a];
      composed.max[a] = outer.min[a] + inner.max[a];
    }
    const Mask twice = crop(crop(m, outer), inner);
    const Mask once = crop(m, composed);
    CHECK(twice.data == once.data);
    CHECK(twice.grid.dims == once.grid.dims);
    for (int a = 0; a < 3; ++a) CHECK(twice.grid.origin[a] == doctest::Approx(once.grid.origin[a]));
  }
  CHECK_THROWS_AS(crop(m, BBox{{0, 0, 0}, {7, 7, 8}}), VolumeError);
  CHECK_THROWS_AS(crop(m, BBox{{2, 0, 0}, {2, 7, 8}}), VolumeError);
  CHECK_THROWS_AS(crop(m, BBox{{-1, 0, 0}, {3, 7, 8}}), VolumeError);
}

TEST_CASE("resize_slice") {
  Image2D img(2, 2);
  img.data = {1.0, 2.0, 3.0, 5.0};
  CHECK(resize_slice(img, 2, 2) == img);

  Image2D flat(3, 5, 0.75);
  for (double x : resize_slice(flat, 7, 2).data) CHECK(x == doctest::Approx(0.75));

  // Sample positions (r + 0.5) / 2 - 0.5 clamp to {0, 0.25, 0.75, 1}.
  const double t[4] = {0.0, 0.25, 0.75, 1.0};
  const Image2D up = resize_slice(img, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const double a = img.at(0, 0), b = img.at(0, 1), cc = img.at(1, 0), d = img.at(1, 1);
      const double want = (1 - t[r]) * ((1 - t[c]) * a + t[c] * b) + t[r] * ((1 - t[c]) * cc + t[c] * d);
      CHECK(up.at(r, c) == doctest::Approx(want).epsilon(1e-14));
    }

  const Image2D nn = resize_slice(img, 4, 4, Interpolation::Nearest);
  for (double x : nn.data) CHECK((x == 1.0 || x == 2.0 || x == 3.0 || x == 5.0));
  CHECK(nn.at(0, 0) == 1.0);
  CHECK(nn.at(3, 3) == 5.0);
  CHECK_THROWS_AS(resize_slice(img, 0, 4), VolumeError);
}

}  // TEST_SUITE
