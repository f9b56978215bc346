#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "spinectx/tensor.hpp"
#include "spinectx/volume.hpp"

namespace spinectx {

/// Procedural spine phantom: stacked ellipsoidal vertebral bodies along a
/// sinusoidally curved craniocaudal axis, optional bone-intensity distractors
/// (rib arcs, pelvic blobs) off the column, soft-tissue background, and
/// additive HU noise. The mask is exactly the union of vertebral-body voxels;
/// distractors are never in the mask. Same seed, same bytes.
struct PhantomSpec {
  std::array<std::int64_t, 3> dims{32, 64, 64};  // (d,h,w), 1 mm spacing
  std::uint64_t seed = 0;
  std::int64_t vertebra_count = 6;
  double body_radius_min_mm = 5.0;
  double body_radius_max_mm = 8.0;
  double disc_gap_mm = 2.0;
  double curve_amplitude_mm = 4.0;  // lordosis/kyphosis sinusoid
  bool rib_arcs = true;
  bool pelvic_blobs = true;
  double bone_mean_hu = 700.0;
  double bone_std_hu = 150.0;
  double tissue_mean_hu = 40.0;
  double tissue_std_hu = 20.0;
  double noise_std_hu = 15.0;

  void validate() const {
    for (auto d : dims)
      if (d < 32)
        throw std::invalid_argument("PhantomSpec: dim " + std::to_string(d) + " < 32");
    if (vertebra_count < 1) throw std::invalid_argument("PhantomSpec: vertebra count < 1");
    if (body_radius_min_mm <= 0 || body_radius_max_mm < body_radius_min_mm)
      throw std::invalid_argument("PhantomSpec: bad body radius range");
    const double usable = static_cast<double>(std::min({dims[1], dims[2]})) / 2.0;
    if (body_radius_max_mm + curve_amplitude_mm >= usable)
      throw std::invalid_argument("PhantomSpec: bodies larger than volume cross-section");
    const double body_len = static_cast<double>(dims[0]) /
                            static_cast<double>(vertebra_count);
    if (body_len <= disc_gap_mm + 2.0)
      throw std::invalid_argument("PhantomSpec: bodies do not fit along the z axis");
  }
};

inline void to_json(nlohmann::ordered_json& j, const PhantomSpec& s) {
  j = nlohmann::ordered_json{{"dims", s.dims},
                             {"seed", s.seed},
                             {"vertebra_count", s.vertebra_count},
                             {"body_radius_min_mm", s.body_radius_min_mm},
                             {"body_radius_max_mm", s.body_radius_max_mm},
                             {"disc_gap_mm", s.disc_gap_mm},
                             {"curve_amplitude_mm", s.curve_amplitude_mm},
                             {"rib_arcs", s.rib_arcs},
                             {"pelvic_blobs", s.pelvic_blobs},
                             {"bone_mean_hu", s.bone_mean_hu},
                             {"bone_std_hu", s.bone_std_hu},
                             {"tissue_mean_hu", s.tissue_mean_hu},
                             {"tissue_std_hu", s.tissue_std_hu},
                             {"noise_std_hu", s.noise_std_hu}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  if (j.contains("dims"))
    for (int a = 0; a < 3; ++a) s.dims[a] = j["dims"].at(a).get<std::int64_t>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.vertebra_count = j.value("vertebra_count", s.vertebra_count);
  s.body_radius_min_mm = j.value("body_radius_min_mm", s.body_radius_min_mm);
  s.body_radius_max_mm = j.value("body_radius_max_mm", s.body_radius_max_mm);
  s.disc_gap_mm = j.value("disc_gap_mm", s.disc_gap_mm);
  s.curve_amplitude_mm = j.value("curve_amplitude_mm", s.curve_amplitude_mm);
  s.rib_arcs = j.value("rib_arcs", s.rib_arcs);
  s.pelvic_blobs = j.value("pelvic_blobs", s.pelvic_blobs);
  s.bone_mean_hu = j.value("bone_mean_hu", s.bone_mean_hu);
  s.bone_std_hu = j.value("bone_std_hu", s.bone_std_hu);
  s.tissue_mean_hu = j.value("tissue_mean_hu", s.tissue_mean_hu);
  s.tissue_std_hu = j.value("tissue_std_hu", s.tissue_std_hu);
  s.noise_std_hu = j.value("noise_std_hu", s.noise_std_hu);
  s.validate();
  return s;
}

struct PhantomPair {
  Volume intensity;  // HU
  Volume mask;       // {0,1}
};

namespace detail {

struct Ellipsoid {
  double cz, cy, cx;
  double rz, ry, rx;

  bool contains(double z, double y, double x) const {
    const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

}  // namespace detail

inline PhantomPair generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto [D, H, W] = spec.dims;
  NormalSampler rng(spec.seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);

  // Vertebral bodies: evenly spaced along z, centers on a sinusoidal curve in y.
  const double cy0 = static_cast<double>(H) / 2.0;
  const double cx0 = static_cast<double>(W) / 2.0;
  const double body_len =
      static_cast<double>(D) / static_cast<double>(spec.vertebra_count) - spec.disc_gap_mm;
  std::vector<detail::Ellipsoid> bodies;
  for (std::int64_t i = 0; i < spec.vertebra_count; ++i) {
    const double cz = (static_cast<double>(i) + 0.5) * static_cast<double>(D) /
                      static_cast<double>(spec.vertebra_count);
    const double phase = cz / static_cast<double>(D) * M_PI;
    const double cy = cy0 + spec.curve_amplitude_mm * std::sin(phase * 2.0);
    const double r = spec.body_radius_min_mm +
                     rng.uniform01() * (spec.body_radius_max_mm - spec.body_radius_min_mm);
    bodies.push_back({cz, cy, cx0, body_len / 2.0, r, r});
  }

  // Distractors: bone-intensity shapes away from the column.
  std::vector<detail::Ellipsoid> distractors;
  if (spec.rib_arcs) {
    // Flattened lateral ellipsoids on both sides at a few z stations.
    const int stations = 3;
    for (int s = 0; s < stations; ++s) {
      const double cz = (static_cast<double>(s) + 0.7) * static_cast<double>(D) /
                        (stations + 1);
      const double off = spec.body_radius_max_mm + 6.0 + 4.0 * rng.uniform01();
      for (int side = -1; side <= 1; side += 2) {
        const double cx = cx0 + side * std::min(off, static_cast<double>(W) / 2.0 - 3.0);
        distractors.push_back({cz, cy0 + 2.0 * rng.uniform01(), cx, 1.5, 6.0, 2.5});
      }
    }
  }
  if (spec.pelvic_blobs) {
    const double cz = static_cast<double>(D) - 4.0;
    const double off = spec.body_radius_max_mm + 7.0;
    for (int side = -1; side <= 1; side += 2) {
      const double cx = cx0 + side * std::min(off, static_cast<double>(W) / 2.0 - 4.0);
      distractors.push_back({cz, cy0, cx, 4.0, 7.0, 6.0});
    }
  }

  PhantomPair out{Volume(spec.dims, {1.0, 1.0, 1.0}, VolumeKind::Intensity),
                  Volume(spec.dims, {1.0, 1.0, 1.0}, VolumeKind::Mask)};

  // Soft-tissue trunk fills an axial ellipse; outside it is air.
  const double trunk_ry = 0.45 * static_cast<double>(H);
  const double trunk_rx = 0.45 * static_cast<double>(W);

  // Voxel pass in fixed row-major order keeps the noise stream deterministic;
  // every voxel consumes exactly two normal draws.
  size_t idx = 0;
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x, ++idx) {
        const double pz = static_cast<double>(z) + 0.5;
        const double py = static_cast<double>(y) + 0.5;
        const double px = static_cast<double>(x) + 0.5;
        bool in_body = false;
        for (const auto& b : bodies)
          if (b.contains(pz, py, px)) {
            in_body = true;
            break;
          }
        bool in_distractor = false;
        if (!in_body)
          for (const auto& d : distractors)
            if (d.contains(pz, py, px)) {
              in_distractor = true;
              break;
            }
        const double ey = (py - cy0) / trunk_ry;
        const double ex = (px - cx0) / trunk_rx;
        const bool in_trunk = ey * ey + ex * ex <= 1.0;

        const double material = rng.next();
        const double noise = spec.noise_std_hu * rng.next();
        double hu;
        if (in_body || in_distractor)
          hu = spec.bone_mean_hu + spec.bone_std_hu * material + noise;
        else if (in_trunk)
          hu = spec.tissue_mean_hu + spec.tissue_std_hu * material + noise;
        else
          hu = -1000.0 + noise;
        out.intensity.data[idx] = static_cast<float>(hu);
        out.mask.data[idx] = in_body ? 1.0f : 0.0f;
      }
  return out;
}

}  // namespace spinectx
