#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace weberline {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;

enum class Axis { X = 0, Y = 1, Z = 2 };

// Mask labels.
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kTibia = 1;
inline constexpr std::uint8_t kFibula = 2;

class VolumeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Voxel lattice geometry. Voxel (i,j,k) has its center at
/// origin + (index + 0.5) * spacing, in millimetres.
struct Grid {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  // x-fastest linear index.
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 center(int i, int j, int k) const {
    return {origin[0] + (i + 0.5) * spacing[0], origin[1] + (j + 0.5) * spacing[1],
            origin[2] + (k + 0.5) * spacing[2]};
  }
  // Continuous voxel coordinate of a physical point (voxel centers are integers).
  Vec3 continuous_index(const Vec3& p) const {
    return {(p[0] - origin[0]) / spacing[0] - 0.5, (p[1] - origin[1]) / spacing[1] - 0.5,
            (p[2] - origin[2]) / spacing[2] - 0.5};
  }
  Vec3 extent() const {
    return {dims[0] * spacing[0], dims[1] * spacing[1], dims[2] * spacing[2]};
  }

  void validate() const;
  bool operator==(const Grid&) const = default;
};

/// Scalar volume (intensities, HU or normalized).
struct Volume {
  Grid grid;
  std::vector<double> data;

  Volume() = default;
  explicit Volume(const Grid& g, double fill = 0.0) : grid(g), data(g.voxel_count(), fill) {}

  double& at(int i, int j, int k) { return data[grid.index(i, j, k)]; }
  double at(int i, int j, int k) const { return data[grid.index(i, j, k)]; }
  void validate() const;
  bool operator==(const Volume&) const = default;
};

/// Label volume with values in {0 background, 1 tibia, 2 fibula}.
struct Mask {
  Grid grid;
  std::vector<std::uint8_t> data;

  Mask() = default;
  explicit Mask(const Grid& g, std::uint8_t fill = kBackground)
      : grid(g), data(g.voxel_count(), fill) {}

  std::uint8_t& at(int i, int j, int k) { return data[grid.index(i, j, k)]; }
  std::uint8_t at(int i, int j, int k) const { return data[grid.index(i, j, k)]; }
  std::size_t count(std::uint8_t label) const;
  std::size_t foreground_count() const;
  void validate() const;
  bool operator==(const Mask&) const = default;
};

/// Half-open voxel box [min, max).
struct BBox {
  Index3 min{0, 0, 0};
  Index3 max{0, 0, 0};

  Index3 size() const { return {max[0] - min[0], max[1] - min[1], max[2] - min[2]}; }
  bool operator==(const BBox&) const = default;
};

/// 2D scalar image, row-major (row = first index).
struct Image2D {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Image2D() = default;
  Image2D(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  bool operator==(const Image2D&) const = default;
};

enum class Interpolation { Nearest, Linear };

// RVOL v1 file I/O. Volumes are stored as f32, masks as u8.
Volume load_volume(const std::filesystem::path& path);
Mask load_mask(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
void save_mask(const Mask& m, const std::filesystem::path& path);

inline constexpr double kDefaultHuLow = -1000.0;
inline constexpr double kDefaultHuHigh = 1000.0;

Volume hu_window_normalize(const Volume& v, double lo = kDefaultHuLow, double hi = kDefaultHuHigh);

// Output dims = round(dims * spacing / target_spacing). Origin is kept.
Volume resample(const Volume& v, const Vec3& target_spacing);
Mask resample(const Mask& m, const Vec3& target_spacing);

Mask flip(const Mask& m, Axis axis);
Mask crop(const Mask& m, const BBox& box);
Volume crop(const Volume& v, const BBox& box);

// Half-pixel-center sampling with edge clamping.
Image2D resize_slice(const Image2D& img, int rows, int cols,
                     Interpolation interp = Interpolation::Linear);

}  // namespace weberline
