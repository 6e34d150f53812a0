#include "weberline/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace weberline {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

using Eigen::Vector3d;

Vector3d to_eigen(const Vec3& v) { return {v[0], v[1], v[2]}; }

Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector3d v;
  do {
    v = {n(rng), n(rng), n(rng)};
  } while (v.norm() < 1e-9);
  return v.normalized();
}

// Rotation about `pivot` by a uniform angle in [0, max_deg] about a random axis,
// followed by a shift of length uniform in [0, max_mm] in a random direction.
Eigen::Isometry3d random_rigid(std::mt19937_64& rng, const Vector3d& pivot, double max_deg,
                               double max_mm) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vector3d axis = random_unit(rng);
  const double angle = u(rng) * max_deg * kDeg;
  const Vector3d dir = random_unit(rng);
  const double shift = u(rng) * max_mm;
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.translate(pivot + dir * shift);
  t.rotate(Eigen::AngleAxisd(angle, axis));
  t.translate(-pivot);
  return t;
}

/// Implicit healthy/fractured anatomy in the healthy frame.
class Anatomy {
 public:
  explicit Anatomy(const PhantomParams& p) : p_(p) {
    Grid g{p.dims, p.spacing, {0, 0, 0}};
    const Vec3 ext = g.extent();
    center_ = {ext[0] / 2, ext[1] / 2, ext[2] / 2};
    tibia_axis_ = {center_.x() + p.tibia_dx, center_.y() + p.tibia_dy};
    fibula_axis_ = {center_.x() + p.fibula_dx, center_.y() + p.fibula_dy};
    const double sz = p.spacing[2];
    tibia_z_ = {p.tibia_bottom() * sz, p.top() * sz};
    fibula_z_ = {p.fibula_bottom() * sz, p.top() * sz};
    gap_lo_ = p.fracture_z * sz;
    gap_hi_ = (p.fracture_z + p.fracture_gap) * sz;
    tilt_ = std::tan(p.plane_tilt_deg * kDeg);
  }

  const Vector3d& center() const { return center_; }
  Vector3d fracture_pivot() const { return {fibula_axis_.x(), fibula_axis_.y(), gap_lo_}; }

  bool in_tibia(const Vector3d& q) const {
    return in_tapered(q, tibia_axis_, tibia_z_, p_.tibia_radius, 0.75);
  }
  bool in_fibula(const Vector3d& q) const {
    return in_tapered(q, fibula_axis_, fibula_z_, p_.fibula_radius, 0.8);
  }
  // Height of q measured perpendicular to the (possibly tilted) fracture plane.
  double plane_height(const Vector3d& q) const {
    return q.z() - tilt_ * (q.x() - fibula_axis_.x());
  }
  bool proximal(const Vector3d& q) const { return plane_height(q) >= gap_hi_; }
  bool distal(const Vector3d& q) const { return plane_height(q) < gap_lo_; }

 private:
  static bool in_tapered(const Vector3d& q, const Eigen::Vector2d& axis,
                         const Eigen::Vector2d& zr, double r_bottom, double top_ratio) {
    if (q.z() < zr[0] || q.z() >= zr[1]) return false;
    const double t = (q.z() - zr[0]) / (zr[1] - zr[0]);
    const double r = r_bottom * (1.0 - (1.0 - top_ratio) * t);
    const double dx = q.x() - axis.x();
    const double dy = q.y() - axis.y();
    return dx * dx + dy * dy <= r * r;
  }

  PhantomParams p_;
  Vector3d center_;
  Eigen::Vector2d tibia_axis_, fibula_axis_, tibia_z_, fibula_z_;
  double gap_lo_ = 0, gap_hi_ = 0, tilt_ = 0;
};

void apply_dropout(Mask& m, double prob, std::mt19937_64& rng) {
  if (prob <= 0.0) return;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Mask src = m;
  const auto& d = m.grid.dims;
  static constexpr int kN[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (src.at(i, j, k) == kBackground) continue;
        bool surface = false;
        for (const auto& n : kN) {
          const int a = i + n[0], b = j + n[1], c = k + n[2];
          if (!src.grid.contains(a, b, c) || src.at(a, b, c) == kBackground) {
            surface = true;
            break;
          }
        }
        if (surface && u(rng) < prob) m.at(i, j, k) = kBackground;
      }
}

Grid phantom_grid(const PhantomParams& p) { return Grid{p.dims, p.spacing, {0.0, 0.0, 0.0}}; }

}  // namespace

std::string to_string(WeberLabel l) {
  switch (l) {
    case WeberLabel::A: return "A";
    case WeberLabel::B: return "B";
    case WeberLabel::C: return "C";
  }
  return "?";
}

WeberLabel weber_label_from_string(const std::string& s) {
  if (s == "A") return WeberLabel::A;
  if (s == "B") return WeberLabel::B;
  if (s == "C") return WeberLabel::C;
  throw std::invalid_argument("unknown Weber label: " + s);
}

WeberLabel weber_label(int fracture_z, int syndesmosis_lo, int syndesmosis_hi) {
  if (fracture_z < syndesmosis_lo) return WeberLabel::A;
  if (fracture_z <= syndesmosis_hi) return WeberLabel::B;
  return WeberLabel::C;
}

void PhantomParams::validate() const {
  phantom_grid(*this).validate();
  if (!(tibia_radius > 0) || !(fibula_radius > 0))
    throw std::invalid_argument("phantom radii must be positive");
  if (fracture_gap < 1) throw std::invalid_argument("fracture gap must be >= 1");
  if (top_margin < 0) throw std::invalid_argument("top margin must be >= 0");
  if (!(syndesmosis_lo < syndesmosis_hi) || syndesmosis_lo < 0 || syndesmosis_hi >= dims[2])
    throw std::invalid_argument("syndesmosis range must satisfy 0 <= lo < hi < dims.z");
  if (fibula_bottom() < 1 || top() <= syndesmosis_hi)
    throw std::invalid_argument("syndesmosis range leaves no room for the bones");
  if (fracture_z <= fibula_bottom() || fracture_z + fracture_gap >= top())
    throw std::invalid_argument("fracture plane outside fibula extent");
}

Mask generate_healthy(const PhantomParams& p) {
  p.validate();
  const Anatomy anatomy(p);
  Mask m(phantom_grid(p));
  const auto& d = p.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const Vector3d q = to_eigen(m.grid.center(i, j, k));
        if (anatomy.in_tibia(q))
          m.at(i, j, k) = kTibia;
        else if (anatomy.in_fibula(q))
          m.at(i, j, k) = kFibula;
      }
  return m;
}

PhantomPair generate_pair(const PhantomParams& p, std::uint64_t seed) {
  p.validate();
  std::mt19937_64 rng(seed);
  const Anatomy anatomy(p);

  PhantomPair out;
  out.healthy = generate_healthy(p);
  out.label = weber_label(p.fracture_z, p.syndesmosis_lo, p.syndesmosis_hi);

  const Eigen::Isometry3d fragment =
      random_rigid(rng, anatomy.fracture_pivot(), p.fragment_rotation_deg, p.fragment_shift_mm);
  const Eigen::Isometry3d fragment_inv = fragment.inverse();
  out.pose = random_rigid(rng, anatomy.center(), p.pose_rotation_deg, p.pose_shift_mm);
  const Eigen::Isometry3d pose_inv = out.pose.inverse();

  Mask& f = out.fractured;
  f = Mask(phantom_grid(p));
  const double cx = anatomy.center().x();
  const auto& d = p.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        Vector3d q = pose_inv * to_eigen(f.grid.center(i, j, k));
        if (p.contralateral) q.x() = 2.0 * cx - q.x();
        if (anatomy.in_tibia(q)) {
          f.at(i, j, k) = kTibia;
          continue;
        }
        const bool prox = anatomy.in_fibula(q) && anatomy.proximal(q);
        const Vector3d r = fragment_inv * q;
        const bool dist = anatomy.in_fibula(r) && anatomy.distal(r);
        if (prox || dist) f.at(i, j, k) = kFibula;
      }
  apply_dropout(f, p.surface_dropout, rng);
  return out;
}

AugmentParams sample_augment(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-15.0, 15.0);
  std::uniform_real_distribution<double> scale(0.9, 1.1);
  std::bernoulli_distribution coin(0.5);
  AugmentParams a;
  a.rotation_deg = angle(rng);
  a.scale = scale(rng);
  a.flip_x = coin(rng);
  a.flip_y = coin(rng);
  return a;
}

Mask augment(const Mask& m, const AugmentParams& a) {
  if (!(a.scale > 0)) throw std::invalid_argument("augment scale must be positive");
  Mask out(m.grid);
  const Vec3 ext = m.grid.extent();
  const double cx = m.grid.origin[0] + ext[0] / 2;
  const double cy = m.grid.origin[1] + ext[1] / 2;
  const double c = std::cos(a.rotation_deg * kDeg), s = std::sin(a.rotation_deg * kDeg);
  const auto& d = m.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const int ii = a.flip_x ? d[0] - 1 - i : i;
        const int jj = a.flip_y ? d[1] - 1 - j : j;
        const Vec3 p = m.grid.center(ii, jj, k);
        // Inverse map: undo scale, then rotate by -theta.
        const double x = (p[0] - cx) / a.scale, y = (p[1] - cy) / a.scale;
        const double zc = m.grid.origin[2] + ext[2] / 2;
        const Vec3 q{cx + c * x + s * y, cy - s * x + c * y, zc + (p[2] - zc) / a.scale};
        const Vec3 u = m.grid.continuous_index(q);
        const int si = static_cast<int>(std::floor(u[0] + 0.5));
        const int sj = static_cast<int>(std::floor(u[1] + 0.5));
        const int sk = static_cast<int>(std::floor(u[2] + 0.5));
        if (m.grid.contains(si, sj, sk)) out.at(i, j, k) = m.at(si, sj, sk);
      }
  return out;
}

Mask augment(const Mask& m, std::uint64_t seed) { return augment(m, sample_augment(seed)); }

int connected_components(const Mask& m, std::uint8_t label) {
  const auto& d = m.grid.dims;
  std::vector<char> seen(m.data.size(), 0);
  std::vector<Index3> stack;
  int components = 0;
  static constexpr int kN[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const auto idx = m.grid.index(i, j, k);
        if (seen[idx] || m.data[idx] != label) continue;
        ++components;
        seen[idx] = 1;
        stack.push_back({i, j, k});
        while (!stack.empty()) {
          const Index3 v = stack.back();
          stack.pop_back();
          for (const auto& n : kN) {
            const int a = v[0] + n[0], b = v[1] + n[1], c = v[2] + n[2];
            if (!m.grid.contains(a, b, c)) continue;
            const auto nidx = m.grid.index(a, b, c);
            if (seen[nidx] || m.data[nidx] != label) continue;
            seen[nidx] = 1;
            stack.push_back({a, b, c});
          }
        }
      }
  return components;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Labeled: return "labeled";
    case Split::Unlabeled: return "unlabeled";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "labeled") return Split::Labeled;
  if (s == "unlabeled") return Split::Unlabeled;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

DatasetRanges DatasetRanges::easy() {
  DatasetRanges r;
  r.boundary_margin = 1;
  r.gap_min = 3;
  r.gap_max = 4;
  r.max_tilt_deg = 0.0;
  r.radius_jitter = 0.05;
  r.max_fragment_rotation_deg = 1.0;
  r.max_fragment_shift_mm = 0.3;
  return r;
}

DatasetRanges DatasetRanges::hard() {
  DatasetRanges r;
  r.boundary_margin = 0;
  r.gap_min = 1;
  r.gap_max = 2;
  r.max_tilt_deg = 25.0;
  r.radius_jitter = 0.15;
  r.max_fragment_rotation_deg = 4.0;
  r.max_fragment_shift_mm = 1.5;
  r.surface_dropout = 0.1;
  return r;
}

std::pair<int, int> DatasetRanges::plane_range(WeberLabel l) const {
  const int lo = base.syndesmosis_lo, hi = base.syndesmosis_hi, m = boundary_margin;
  switch (l) {
    // Keep at least two slices of distal fragment below the plane.
    case WeberLabel::A: return {std::max(lo - class_depth, base.fibula_bottom() + 2), lo - 1 - m};
    case WeberLabel::B: return {lo + m, hi - m};
    case WeberLabel::C: return {hi + 1 + m, hi + class_depth};
  }
  return {0, 0};
}

void DatasetRanges::validate() const {
  if (gap_min < 1 || gap_max < gap_min) throw std::invalid_argument("invalid gap range");
  if (boundary_margin < 0 || class_depth < 1) throw std::invalid_argument("invalid class ranges");
  for (int c = 0; c < kNumClasses; ++c) {
    const auto [lo, hi] = plane_range(static_cast<WeberLabel>(c));
    if (lo > hi) throw std::invalid_argument("empty fracture-plane range");
    PhantomParams p = base;
    p.fracture_gap = gap_max;
    p.fracture_z = lo;
    p.validate();
    p.fracture_z = hi;
    p.validate();
  }
}

std::vector<const PhantomSample*> Dataset::split(Split s) const {
  std::vector<const PhantomSample*> out;
  for (const auto& x : samples)
    if (x.split == s) out.push_back(&x);
  return out;
}

Dataset make_dataset(int n_labeled, int n_unlabeled, int n_test, const DatasetRanges& ranges,
                     std::uint64_t seed) {
  if (n_labeled < 0 || n_unlabeled < 0 || n_test < 0)
    throw std::invalid_argument("sample counts must be nonnegative");
  if (n_test % kNumClasses != 0)
    throw std::invalid_argument("counts not representable with balance constraint");
  ranges.validate();

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Dataset d;
  int serial = 0;
  auto emit = [&](Split split, int n) {
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % kNumClasses;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int i = 0; i < n; ++i) {
      PhantomSample s;
      s.split = split;
      s.label = static_cast<WeberLabel>(labels[i]);
      const auto [zlo, zhi] = ranges.plane_range(s.label);
      PhantomParams& p = s.params;
      p = ranges.base;
      p.fracture_z = std::uniform_int_distribution<int>(zlo, zhi)(rng);
      p.fracture_gap = std::uniform_int_distribution<int>(ranges.gap_min, ranges.gap_max)(rng);
      p.plane_tilt_deg = (2.0 * u01(rng) - 1.0) * ranges.max_tilt_deg;
      p.tibia_radius *= 1.0 + (2.0 * u01(rng) - 1.0) * ranges.radius_jitter;
      p.fibula_radius *= 1.0 + (2.0 * u01(rng) - 1.0) * ranges.radius_jitter;
      p.fragment_rotation_deg = ranges.max_fragment_rotation_deg;
      p.fragment_shift_mm = ranges.max_fragment_shift_mm;
      p.pose_rotation_deg = ranges.max_pose_rotation_deg;
      p.pose_shift_mm = ranges.max_pose_shift_mm;
      p.surface_dropout = ranges.surface_dropout;
      s.seed = rng();
      char id[32];
      std::snprintf(id, sizeof(id), "case_%04d", serial++);
      s.id = id;
      PhantomPair pair = generate_pair(p, s.seed);
      s.healthy = std::move(pair.healthy);
      s.fractured = std::move(pair.fractured);
      d.samples.push_back(std::move(s));
    }
  };
  emit(Split::Labeled, n_labeled);
  emit(Split::Unlabeled, n_unlabeled);
  emit(Split::Test, n_test);
  return d;
}

std::string healthy_path_for(const std::string& fractured_path) {
  const std::string suffix = ".fractured.rvol";
  if (fractured_path.size() < suffix.size() ||
      fractured_path.compare(fractured_path.size() - suffix.size(), suffix.size(), suffix) != 0)
    throw std::invalid_argument("fractured mask path must end in .fractured.rvol: " +
                                fractured_path);
  return fractured_path.substr(0, fractured_path.size() - suffix.size()) + ".healthy.rvol";
}

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  std::ofstream hidden(dir / "hidden_labels.csv");
  if (!manifest || !hidden) throw std::runtime_error("cannot write manifest in " + dir.string());
  manifest << "path,split,label,fracture_z,syndesmosis_lo,syndesmosis_hi\n";
  hidden << "path,label\n";
  for (const auto& s : d.samples) {
    const std::string rel = s.id + ".fractured.rvol";
    save_mask(s.fractured, dir / rel);
    save_mask(s.healthy, dir / healthy_path_for(rel));
    const std::string label = s.split == Split::Unlabeled ? "" : to_string(s.label);
    manifest << rel << ',' << to_string(s.split) << ',' << label << ',' << s.params.fracture_z
             << ',' << s.params.syndesmosis_lo << ',' << s.params.syndesmosis_hi << '\n';
    if (s.split == Split::Unlabeled) hidden << rel << ',' << to_string(s.label) << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("data directory not found: " + dir.string());
  std::ifstream is(dir / "manifest.csv");
  if (!is) throw std::runtime_error("manifest not found: " + (dir / "manifest.csv").string());

  auto split_csv = [](const std::string& line) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    return cols;
  };

  std::vector<ManifestRow> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() != 6) throw std::runtime_error("malformed manifest row: " + line);
    ManifestRow r;
    r.path = cols[0];
    r.split = split_from_string(cols[1]);
    if (!cols[2].empty()) r.label = weber_label_from_string(cols[2]);
    r.fracture_z = std::stoi(cols[3]);
    r.syndesmosis_lo = std::stoi(cols[4]);
    r.syndesmosis_hi = std::stoi(cols[5]);
    rows.push_back(std::move(r));
  }

  std::ifstream hidden(dir / "hidden_labels.csv");
  if (hidden) {
    std::getline(hidden, line);
    while (std::getline(hidden, line)) {
      const auto cols = split_csv(line);
      if (cols.size() != 2) continue;
      for (auto& r : rows)
        if (r.path == cols[0]) r.hidden_label = weber_label_from_string(cols[1]);
    }
  }
  return rows;
}

}  // namespace weberline
