#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "weberline/volume.hpp"

namespace weberline {

/// Weber type of a lateral malleolar fracture relative to the syndesmosis.
enum class WeberLabel : int { A = 0, B = 1, C = 2 };
inline constexpr int kNumClasses = 3;

std::string to_string(WeberLabel l);
WeberLabel weber_label_from_string(const std::string& s);

/// A below, B at, C above the syndesmosis z-range [lo, hi] (voxel indices).
WeberLabel weber_label(int fracture_z, int syndesmosis_lo, int syndesmosis_hi);

/// Geometry of one synthetic healthy/fractured pair. Lengths in mm unless noted.
/// The tibia and fibula are vertical tapered cylinders; the fibula is split by
/// `fracture_gap` empty slices starting at voxel slice `fracture_z`.
struct PhantomParams {
  Index3 dims{32, 32, 32};
  Vec3 spacing{1.5, 1.5, 1.5};
  double tibia_radius = 6.5;
  double fibula_radius = 2.6;
  // Bone axes relative to the grid center in the x/y plane.
  double tibia_dx = -4.0, tibia_dy = -1.0;
  double fibula_dx = 9.5, fibula_dy = 1.5;
  int syndesmosis_lo = 10;
  int syndesmosis_hi = 16;
  int fracture_z = 13;
  int fracture_gap = 2;
  double plane_tilt_deg = 0.0;
  // Distal fragment displacement ranges.
  double fragment_rotation_deg = 2.0;
  double fragment_shift_mm = 0.5;
  // Pose of the fractured (contralateral) scan relative to the healthy one.
  double pose_rotation_deg = 0.0;
  double pose_shift_mm = 0.0;
  bool contralateral = true;
  // Probability of dropping a surface voxel, emulating segmentation noise.
  double surface_dropout = 0.0;
  // Empty slices kept above both bones.
  int top_margin = 3;

  void validate() const;
  // Voxel slices occupied by the fibula: [fibula_bottom(), top()).
  int tibia_bottom() const { return syndesmosis_lo - 2; }
  int fibula_bottom() const { return syndesmosis_lo - 7; }
  int top() const { return dims[2] - top_margin; }
};

struct PhantomPair {
  Mask healthy;
  Mask fractured;
  WeberLabel label = WeberLabel::A;
  // Ground-truth pose applied to the (mirrored) fractured anatomy.
  Eigen::Isometry3d pose = Eigen::Isometry3d::Identity();
};

PhantomPair generate_pair(const PhantomParams& p, std::uint64_t seed);

/// Rasterizes only the healthy anatomy.
Mask generate_healthy(const PhantomParams& p);

struct AugmentParams {
  double rotation_deg = 0.0;  // about the grid z axis through the grid center
  double scale = 1.0;
  bool flip_x = false;
  bool flip_y = false;
};

AugmentParams sample_augment(std::uint64_t seed);
Mask augment(const Mask& m, const AugmentParams& a);
Mask augment(const Mask& m, std::uint64_t seed);

/// Number of 6-connected components of voxels carrying `label`.
int connected_components(const Mask& m, std::uint8_t label);

enum class Split { Labeled, Unlabeled, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Per-sample variation drawn by make_dataset.
struct DatasetRanges {
  PhantomParams base;
  int class_depth = 6;       // slices of A/C planes beyond the band
  int boundary_margin = 1;   // slices excluded next to each class boundary
  int gap_min = 2;
  int gap_max = 3;
  double max_tilt_deg = 0.0;
  double radius_jitter = 0.1;  // relative
  double max_fragment_rotation_deg = 3.0;
  double max_fragment_shift_mm = 1.0;
  double max_pose_rotation_deg = 8.0;
  double max_pose_shift_mm = 5.0;
  double surface_dropout = 0.0;

  static DatasetRanges easy();
  static DatasetRanges hard();
  // Inclusive [lo, hi] fracture-plane slices drawn for a class.
  std::pair<int, int> plane_range(WeberLabel l) const;
  void validate() const;
};

struct PhantomSample {
  std::string id;
  Split split = Split::Labeled;
  PhantomParams params;
  std::uint64_t seed = 0;
  WeberLabel label = WeberLabel::A;  // hidden for unlabeled samples
  Mask healthy;
  Mask fractured;
};

struct Dataset {
  std::vector<PhantomSample> samples;
  std::vector<const PhantomSample*> split(Split s) const;
};

/// Labeled and unlabeled splits are stratified round-robin over {A,B,C};
/// the test split is exactly balanced, so n_test must be a multiple of 3.
Dataset make_dataset(int n_labeled, int n_unlabeled, int n_test, const DatasetRanges& ranges,
                     std::uint64_t seed);

/// Manifest row written next to the RVOL files.
struct ManifestRow {
  std::string path;  // fractured mask; the template is <stem>.healthy.rvol
  Split split = Split::Labeled;
  std::optional<WeberLabel> label;
  int fracture_z = 0;
  int syndesmosis_lo = 0;
  int syndesmosis_hi = 0;
  // Ground truth kept for oracle evaluation of unlabeled samples only.
  std::optional<WeberLabel> hidden_label;
};

std::string healthy_path_for(const std::string& fractured_path);
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir);

}  // namespace weberline
