#include "weberline/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace weberline {

namespace {

constexpr char kMagic[8] = {'R', 'V', 'O', 'L', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "RVOL payloads are written in native order; big-endian hosts need byte swapping");

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

struct RawFile {
  Grid grid;
  std::string dtype;
  std::string kind;
  std::vector<char> payload;
};

void write_file(const std::filesystem::path& path, const Grid& grid, const std::string& dtype,
                const std::string& kind, const char* payload, std::size_t payload_bytes) {
  nlohmann::json header = {
      {"dims", grid.dims}, {"spacing", grid.spacing}, {"origin", grid.origin},
      {"dtype", dtype},    {"kind", kind},
  };
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeError("cannot open for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload, static_cast<std::streamsize>(payload_bytes));
  if (!os) throw VolumeError("write failed: " + path.string());
}

RawFile read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolumeError("cannot open: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw VolumeError("malformed header: bad magic in " + path.string());
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i)
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const std::size_t header_end = 12 + static_cast<std::size_t>(len);
  if (header_end > bytes.size()) throw VolumeError("malformed header: truncated header");

  RawFile out;
  try {
    auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + header_end);
    out.grid.dims = header.at("dims").get<Index3>();
    out.grid.spacing = header.at("spacing").get<Vec3>();
    out.grid.origin = header.at("origin").get<Vec3>();
    out.dtype = header.at("dtype").get<std::string>();
    out.kind = header.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw VolumeError(std::string("malformed header: ") + e.what());
  }
  out.grid.validate();
  if (out.dtype != "f32" && out.dtype != "u8")
    throw VolumeError("malformed header: unknown dtype " + out.dtype);
  if (out.kind != "volume" && out.kind != "mask")
    throw VolumeError("malformed header: unknown kind " + out.kind);

  const std::size_t elem = out.dtype == "f32" ? 4 : 1;
  const std::size_t expected = out.grid.voxel_count() * elem;
  const std::size_t actual = bytes.size() - header_end;
  if (actual < expected) throw VolumeError("truncated payload");
  if (actual > expected) throw VolumeError("dims/payload mismatch");
  out.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header_end), bytes.end());
  return out;
}

template <typename T>
void check_box(const T& v, const BBox& b) {
  for (int a = 0; a < 3; ++a) {
    if (b.min[a] < 0 || b.max[a] > v.grid.dims[a] || b.min[a] >= b.max[a])
      throw VolumeError("out-of-range bbox");
  }
}

template <typename T>
T crop_impl(const T& v, const BBox& b) {
  check_box(v, b);
  Grid g = v.grid;
  g.dims = b.size();
  for (int a = 0; a < 3; ++a) g.origin[a] += b.min[a] * v.grid.spacing[a];
  T out(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        out.at(i, j, k) = v.at(i + b.min[0], j + b.min[1], k + b.min[2]);
  return out;
}

Grid resampled_grid(const Grid& in, const Vec3& target) {
  Grid g = in;
  for (int a = 0; a < 3; ++a) {
    if (!(target[a] > 0.0)) throw VolumeError("target spacing must be positive");
    g.dims[a] = static_cast<int>(std::lround(in.dims[a] * in.spacing[a] / target[a]));
    if (g.dims[a] <= 0) throw VolumeError("degenerate output dims");
  }
  g.spacing = target;
  return g;
}

int nearest_index(double u, int n) {
  return std::clamp(static_cast<int>(std::floor(u + 0.5)), 0, n - 1);
}

}  // namespace

void Grid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0) throw VolumeError("nonpositive dimension");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw VolumeError("spacing must be positive");
    if (!std::isfinite(origin[a])) throw VolumeError("origin must be finite");
  }
}

void Volume::validate() const {
  grid.validate();
  if (data.size() != grid.voxel_count()) throw VolumeError("dims/payload mismatch");
}

std::size_t Mask::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), label));
}

std::size_t Mask::foreground_count() const { return data.size() - count(kBackground); }

void Mask::validate() const {
  grid.validate();
  if (data.size() != grid.voxel_count()) throw VolumeError("dims/payload mismatch");
  for (auto v : data)
    if (v > kFibula) throw VolumeError("mask label outside {0,1,2}");
}

Volume load_volume(const std::filesystem::path& path) {
  RawFile raw = read_file(path);
  Volume v(raw.grid);
  if (raw.dtype == "f32") {
    for (std::size_t n = 0; n < v.data.size(); ++n) {
      float f;
      std::memcpy(&f, raw.payload.data() + 4 * n, 4);
      v.data[n] = f;
    }
  } else {
    for (std::size_t n = 0; n < v.data.size(); ++n)
      v.data[n] = static_cast<unsigned char>(raw.payload[n]);
  }
  return v;
}

Mask load_mask(const std::filesystem::path& path) {
  RawFile raw = read_file(path);
  if (raw.dtype != "u8") throw VolumeError("mask files must use dtype u8");
  Mask m(raw.grid);
  std::memcpy(m.data.data(), raw.payload.data(), m.data.size());
  m.validate();
  return m;
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  std::vector<float> payload(v.data.begin(), v.data.end());
  write_file(path, v.grid, "f32", "volume", reinterpret_cast<const char*>(payload.data()),
             payload.size() * sizeof(float));
}

void save_mask(const Mask& m, const std::filesystem::path& path) {
  m.validate();
  write_file(path, m.grid, "u8", "mask", reinterpret_cast<const char*>(m.data.data()),
             m.data.size());
}

Volume hu_window_normalize(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw VolumeError("HU window requires lo < hi");
  Volume out = v;
  const double width = hi - lo;
  for (auto& x : out.data) x = std::clamp((x - lo) / width, 0.0, 1.0);
  return out;
}

Volume resample(const Volume& v, const Vec3& target_spacing) {
  const Grid g = resampled_grid(v.grid, target_spacing);
  if (g == v.grid) return v;
  Volume out(g);
  const auto& d = v.grid.dims;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 u = v.grid.continuous_index(g.center(i, j, k));
        int lo[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
          const double c = std::clamp(u[a], 0.0, static_cast<double>(d[a] - 1));
          lo[a] = std::min(static_cast<int>(std::floor(c)), d[a] - 1);
          t[a] = c - lo[a];
        }
        double acc = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
          int idx[3];
          double w = 1.0;
          for (int a = 0; a < 3; ++a) {
            const bool up = (corner >> a) & 1;
            idx[a] = std::min(lo[a] + (up ? 1 : 0), d[a] - 1);
            w *= up ? t[a] : 1.0 - t[a];
          }
          if (w != 0.0) acc += w * v.at(idx[0], idx[1], idx[2]);
        }
        out.at(i, j, k) = acc;
      }
  return out;
}

Mask resample(const Mask& m, const Vec3& target_spacing) {
  const Grid g = resampled_grid(m.grid, target_spacing);
  if (g == m.grid) return m;
  Mask out(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 u = m.grid.continuous_index(g.center(i, j, k));
        out.at(i, j, k) = m.at(nearest_index(u[0], m.grid.dims[0]),
                               nearest_index(u[1], m.grid.dims[1]),
                               nearest_index(u[2], m.grid.dims[2]));
      }
  return out;
}

Mask flip(const Mask& m, Axis axis) {
  Mask out(m.grid);
  const int a = static_cast<int>(axis);
  const auto& d = m.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        Index3 src{i, j, k};
        src[a] = d[a] - 1 - src[a];
        out.at(i, j, k) = m.at(src[0], src[1], src[2]);
      }
  return out;
}

Mask crop(const Mask& m, const BBox& box) { return crop_impl(m, box); }
Volume crop(const Volume& v, const BBox& box) { return crop_impl(v, box); }

Image2D resize_slice(const Image2D& img, int rows, int cols, Interpolation interp) {
  if (rows <= 0 || cols <= 0) throw VolumeError("nonpositive target size");
  if (img.rows <= 0 || img.cols <= 0) throw VolumeError("empty source image");
  if (rows == img.rows && cols == img.cols) return img;
  Image2D out(rows, cols);
  const double sr = static_cast<double>(img.rows) / rows;
  const double sc = static_cast<double>(img.cols) / cols;
  for (int r = 0; r < rows; ++r) {
    const double ur = std::clamp((r + 0.5) * sr - 0.5, 0.0, img.rows - 1.0);
    for (int c = 0; c < cols; ++c) {
      const double uc = std::clamp((c + 0.5) * sc - 0.5, 0.0, img.cols - 1.0);
      if (interp == Interpolation::Nearest) {
        out.at(r, c) = img.at(nearest_index(ur, img.rows), nearest_index(uc, img.cols));
        continue;
      }
      const int r0 = std::min(static_cast<int>(ur), img.rows - 1);
      const int c0 = std::min(static_cast<int>(uc), img.cols - 1);
      const int r1 = std::min(r0 + 1, img.rows - 1);
      const int c1 = std::min(c0 + 1, img.cols - 1);
      const double tr = ur - r0;
      const double tc = uc - c0;
      out.at(r, c) = (1 - tr) * ((1 - tc) * img.at(r0, c0) + tc * img.at(r0, c1)) +
                     tr * ((1 - tc) * img.at(r1, c0) + tc * img.at(r1, c1));
    }
  }
  return out;
}

}  // namespace weberline
