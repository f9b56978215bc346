#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spinectx {

enum class VolumeKind { Intensity, Probability, Mask };

inline std::string kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::Intensity: return "intensity";
    case VolumeKind::Probability: return "probability";
    case VolumeKind::Mask: return "mask";
  }
  return "intensity";
}

inline VolumeKind kind_from_name(const std::string& s) {
  if (s == "intensity") return VolumeKind::Intensity;
  if (s == "probability") return VolumeKind::Probability;
  if (s == "mask") return VolumeKind::Mask;
  throw std::invalid_argument("volume kind: unknown name \"" + s + "\"");
}

/// A scalar 3-D grid with physical voxel spacing and origin (mm). Data is
/// row-major (d,h,w), i.e. x fastest, matching NIfTI voxel order. Axis order
/// of dims/spacing/origin is (d,h,w) = (z,y,x) throughout.
struct Volume {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::vector<float> data;
  VolumeKind kind = VolumeKind::Intensity;

  Volume() = default;
  Volume(std::array<std::int64_t, 3> d, std::array<double, 3> sp,
         VolumeKind k = VolumeKind::Intensity)
      : dims(d), spacing(sp), kind(k) {
    validate_geometry();
    data.assign(static_cast<size_t>(voxels()), 0.0f);
  }

  std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<size_t>(index(z, y, x))];
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<size_t>(index(z, y, x))];
  }

  std::string dims_str() const {
    std::ostringstream os;
    os << "(" << dims[0] << "," << dims[1] << "," << dims[2] << ")";
    return os.str();
  }

  void validate_geometry() const {
    for (double s : spacing)
      if (!(s > 0.0))
        throw std::invalid_argument("Volume: non-positive spacing " + std::to_string(s));
    for (std::int64_t d : dims)
      if (d <= 0) throw std::invalid_argument("Volume: non-positive dim in " + dims_str());
  }
};

namespace detail {

inline float sample_trilinear_clamped(const Volume& v, double z, double y, double x) {
  auto clamp_i = [](std::int64_t i, std::int64_t n) {
    return std::min(std::max<std::int64_t>(i, 0), n - 1);
  };
  const std::int64_t z0 = static_cast<std::int64_t>(std::floor(z));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
  const double fz = z - static_cast<double>(z0);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const std::int64_t za = clamp_i(z0, v.dims[0]), zb = clamp_i(z0 + 1, v.dims[0]);
  const std::int64_t ya = clamp_i(y0, v.dims[1]), yb = clamp_i(y0 + 1, v.dims[1]);
  const std::int64_t xa = clamp_i(x0, v.dims[2]), xb = clamp_i(x0 + 1, v.dims[2]);
  const double v000 = v.at(za, ya, xa), v001 = v.at(za, ya, xb);
  const double v010 = v.at(za, yb, xa), v011 = v.at(za, yb, xb);
  const double v100 = v.at(zb, ya, xa), v101 = v.at(zb, ya, xb);
  const double v110 = v.at(zb, yb, xa), v111 = v.at(zb, yb, xb);
  const double r = (1 - fz) * ((1 - fy) * ((1 - fx) * v000 + fx * v001) +
                               fy * ((1 - fx) * v010 + fx * v011)) +
                   fz * ((1 - fy) * ((1 - fx) * v100 + fx * v101) +
                         fy * ((1 - fx) * v110 + fx * v111));
  return static_cast<float>(r);
}

}  // namespace detail

/// Trilinear resample onto an isotropic target_mm grid; output dims are
/// round(dims * spacing / target_mm). A volume already on the target grid is
/// copied exactly (the index map is the identity).
inline Volume resample_isotropic(const Volume& v, double target_mm = 1.0) {
  v.validate_geometry();
  Volume out;
  out.kind = v.kind;
  out.origin = v.origin;
  for (int a = 0; a < 3; ++a) {
    out.dims[a] = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(
               std::llround(static_cast<double>(v.dims[a]) * v.spacing[a] / target_mm)));
    out.spacing[a] = target_mm;
  }
  out.data.assign(static_cast<size_t>(out.voxels()), 0.0f);
  const double rz = target_mm / v.spacing[0];
  const double ry = target_mm / v.spacing[1];
  const double rx = target_mm / v.spacing[2];
  const bool identity = out.dims == v.dims && rz == 1.0 && ry == 1.0 && rx == 1.0;
  if (identity) {
    out.data = v.data;
    return out;
  }
  for (std::int64_t z = 0; z < out.dims[0]; ++z) {
    const double sz = (static_cast<double>(z) + 0.5) * rz - 0.5;
    for (std::int64_t y = 0; y < out.dims[1]; ++y) {
      const double sy = (static_cast<double>(y) + 0.5) * ry - 0.5;
      for (std::int64_t x = 0; x < out.dims[2]; ++x) {
        const double sx = (static_cast<double>(x) + 0.5) * rx - 0.5;
        out.at(z, y, x) = detail::sample_trilinear_clamped(v, sz, sy, sx);
      }
    }
  }
  return out;
}

inline constexpr double kHuClipLo = -1000.0;
inline constexpr double kHuClipHi = 2000.0;

/// Resample to 1 mm^3, clip HU to [-1000, 2000], rescale to [0,1].
inline Volume preprocess(const Volume& v) {
  Volume out = resample_isotropic(v, 1.0);
  for (float& f : out.data) {
    const double c = std::clamp(static_cast<double>(f), kHuClipLo, kHuClipHi);
    f = static_cast<float>((c - kHuClipLo) / (kHuClipHi - kHuClipLo));
  }
  out.kind = VolumeKind::Intensity;
  return out;
}

/// mask = 1 where p > threshold (strict), else 0.
inline Volume binarize(const Volume& p, double threshold = 0.5) {
  if (threshold < 0.0 || threshold > 1.0)
    throw std::invalid_argument("binarize: threshold " + std::to_string(threshold) +
                                " outside [0,1]");
  Volume m = p;
  m.kind = VolumeKind::Mask;
  for (float& f : m.data) f = f > static_cast<float>(threshold) ? 1.0f : 0.0f;
  return m;
}

/// Zero-pads v at the high end of each axis up to at least `min_dims`.
inline Volume pad_to(const Volume& v, const std::array<std::int64_t, 3>& min_dims) {
  std::array<std::int64_t, 3> nd{std::max(v.dims[0], min_dims[0]),
                                 std::max(v.dims[1], min_dims[1]),
                                 std::max(v.dims[2], min_dims[2])};
  if (nd == v.dims) return v;
  Volume out(nd, v.spacing, v.kind);
  out.origin = v.origin;
  for (std::int64_t z = 0; z < v.dims[0]; ++z)
    for (std::int64_t y = 0; y < v.dims[1]; ++y)
      for (std::int64_t x = 0; x < v.dims[2]; ++x) out.at(z, y, x) = v.at(z, y, x);
  return out;
}

/// Crops the leading corner block of the given dims.
inline Volume crop_to(const Volume& v, const std::array<std::int64_t, 3>& nd) {
  if (nd == v.dims) return v;
  if (nd[0] > v.dims[0] || nd[1] > v.dims[1] || nd[2] > v.dims[2])
    throw std::invalid_argument("crop_to: target exceeds volume " + v.dims_str());
  Volume out(nd, v.spacing, v.kind);
  out.origin = v.origin;
  for (std::int64_t z = 0; z < nd[0]; ++z)
    for (std::int64_t y = 0; y < nd[1]; ++y)
      for (std::int64_t x = 0; x < nd[2]; ++x) out.at(z, y, x) = v.at(z, y, x);
  return out;
}

}  // namespace spinectx
