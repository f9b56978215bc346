#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spinectx/volume.hpp"

namespace spinectx {

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

namespace nifti1 {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;    // 348
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

}  // namespace nifti1

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

/// Reads the whole file through zlib, which transparently handles both plain
/// and gzip-compressed payloads.
inline std::vector<unsigned char> read_all_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("nifti: cannot open " + path);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool err = n < 0;
  gzclose(f);
  if (err) throw std::runtime_error("nifti: decompression failed for " + path);
  return out;
}

}  // namespace detail

/// Parses a NIfTI-1 volume (plain or gzipped), applying scl_slope/scl_inter.
inline Volume read_nifti(const std::string& path) {
  const auto bytes = detail::read_all_maybe_gz(path);
  if (bytes.size() < sizeof(nifti1::Header))
    throw std::runtime_error("nifti: " + path + " truncated before end of header");
  nifti1::Header hdr;
  std::memcpy(&hdr, bytes.data(), sizeof(hdr));
  if (hdr.sizeof_hdr != 348)
    throw std::runtime_error("nifti: sizeof_hdr=" + std::to_string(hdr.sizeof_hdr) +
                             " (expected 348; byte-swapped files are not supported)");
  if (!(hdr.magic[0] == 'n' && hdr.magic[1] == '+' && hdr.magic[2] == '1'))
    throw std::runtime_error("nifti: magic is not \"n+1\" (detached .hdr/.img unsupported)");
  if (hdr.dim[0] < 3)
    throw std::runtime_error("nifti: dim[0]=" + std::to_string(hdr.dim[0]) +
                             " (need a 3-D volume)");
  for (int a = 4; a <= hdr.dim[0] && a < 8; ++a)
    if (hdr.dim[a] > 1)
      throw std::runtime_error("nifti: dim[" + std::to_string(a) + "]=" +
                               std::to_string(hdr.dim[a]) + " (only 3-D volumes supported)");

  const std::int64_t nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  if (nx <= 0 || ny <= 0 || nz <= 0)
    throw std::runtime_error("nifti: non-positive dim " + std::to_string(nx) + "x" +
                             std::to_string(ny) + "x" + std::to_string(nz));
  for (int a = 1; a <= 3; ++a)
    if (!(hdr.pixdim[a] > 0.0f))
      throw std::runtime_error("nifti: pixdim[" + std::to_string(a) + "]=" +
                               std::to_string(hdr.pixdim[a]) + " must be positive");

  int bpv;
  switch (hdr.datatype) {
    case nifti1::kDtUint8: bpv = 1; break;
    case nifti1::kDtInt16: bpv = 2; break;
    case nifti1::kDtFloat32: bpv = 4; break;
    default:
      throw std::runtime_error("nifti: unsupported datatype " + std::to_string(hdr.datatype) +
                               " (supported: 2 uint8, 4 int16, 16 float32)");
  }

  const std::int64_t nvox = nx * ny * nz;
  const size_t offset = static_cast<size_t>(hdr.vox_offset);
  if (offset < sizeof(nifti1::Header))
    throw std::runtime_error("nifti: vox_offset " + std::to_string(offset) + " inside header");
  if (bytes.size() < offset + static_cast<size_t>(nvox) * bpv)
    throw std::runtime_error("nifti: " + path + " payload truncated (need " +
                             std::to_string(nvox * bpv) + " bytes)");

  const float slope = hdr.scl_slope == 0.0f ? 1.0f : hdr.scl_slope;
  const float inter = hdr.scl_inter;

  Volume v;
  v.dims = {nz, ny, nx};
  v.spacing = {hdr.pixdim[3], hdr.pixdim[2], hdr.pixdim[1]};
  v.origin = {hdr.qoffset_z, hdr.qoffset_y, hdr.qoffset_x};
  v.data.resize(static_cast<size_t>(nvox));
  const unsigned char* p = bytes.data() + offset;
  bool binary = true;
  for (std::int64_t i = 0; i < nvox; ++i) {
    float raw;
    switch (hdr.datatype) {
      case nifti1::kDtUint8: raw = static_cast<float>(p[i]); break;
      case nifti1::kDtInt16: {
        std::int16_t s;
        std::memcpy(&s, p + 2 * i, 2);
        raw = static_cast<float>(s);
        break;
      }
      default: std::memcpy(&raw, p + 4 * i, 4); break;
    }
    const float val = raw * slope + inter;
    v.data[static_cast<size_t>(i)] = val;
    if (val != 0.0f && val != 1.0f) binary = false;
  }
  v.kind = (hdr.datatype == nifti1::kDtUint8 && binary) ? VolumeKind::Mask
                                                        : VolumeKind::Intensity;
  return v;
}

/// Writes a NIfTI-1 file; masks as uint8, everything else as float32.
/// A path ending in .gz is gzip-compressed.
inline void write_nifti(const std::string& path, const Volume& v) {
  v.validate_geometry();
  nifti1::Header hdr{};
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<std::int16_t>(v.dims[2]);
  hdr.dim[2] = static_cast<std::int16_t>(v.dims[1]);
  hdr.dim[3] = static_cast<std::int16_t>(v.dims[0]);
  for (int a = 4; a < 8; ++a) hdr.dim[a] = 1;
  const bool as_u8 = v.kind == VolumeKind::Mask;
  hdr.datatype = as_u8 ? nifti1::kDtUint8 : nifti1::kDtFloat32;
  hdr.bitpix = as_u8 ? 8 : 32;
  hdr.pixdim[0] = 1.0f;
  hdr.pixdim[1] = static_cast<float>(v.spacing[2]);
  hdr.pixdim[2] = static_cast<float>(v.spacing[1]);
  hdr.pixdim[3] = static_cast<float>(v.spacing[0]);
  hdr.vox_offset = 352.0f;
  hdr.scl_slope = 1.0f;
  hdr.scl_inter = 0.0f;
  hdr.xyzt_units = 2;  // mm
  std::snprintf(hdr.descrip, sizeof(hdr.descrip), "spinectx %s", kind_name(v.kind).c_str());
  hdr.qform_code = 0;
  hdr.sform_code = 1;
  hdr.qoffset_x = static_cast<float>(v.origin[2]);
  hdr.qoffset_y = static_cast<float>(v.origin[1]);
  hdr.qoffset_z = static_cast<float>(v.origin[0]);
  hdr.srow_x[0] = static_cast<float>(v.spacing[2]);
  hdr.srow_x[3] = static_cast<float>(v.origin[2]);
  hdr.srow_y[1] = static_cast<float>(v.spacing[1]);
  hdr.srow_y[3] = static_cast<float>(v.origin[1]);
  hdr.srow_z[2] = static_cast<float>(v.spacing[0]);
  hdr.srow_z[3] = static_cast<float>(v.origin[0]);
  hdr.magic[0] = 'n';
  hdr.magic[1] = '+';
  hdr.magic[2] = '1';
  hdr.magic[3] = '\0';

  std::vector<unsigned char> payload;
  if (as_u8) {
    payload.resize(v.data.size());
    for (size_t i = 0; i < v.data.size(); ++i)
      payload[i] = v.data[i] > 0.5f ? 1 : 0;
  } else {
    payload.resize(v.data.size() * 4);
    std::memcpy(payload.data(), v.data.data(), payload.size());
  }
  const char ext[4] = {0, 0, 0, 0};

  if (detail::ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("nifti: cannot open " + path + " for writing");
    bool ok = gzwrite(f, &hdr, sizeof(hdr)) == static_cast<int>(sizeof(hdr)) &&
              gzwrite(f, ext, 4) == 4 &&
              (payload.empty() ||
               gzwrite(f, payload.data(), static_cast<unsigned>(payload.size())) ==
                   static_cast<int>(payload.size()));
    gzclose(f);
    if (!ok) throw std::runtime_error("nifti: short write to " + path);
  } else {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("nifti: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    f.write(ext, 4);
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    if (!f) throw std::runtime_error("nifti: short write to " + path);
  }
}

// ---------------------------------------------------------------------------
// Native raw format: <base>.json sidecar + <base>.f32 little-endian payload.
// Round-trips bit-exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string raw_base(const std::string& path) {
  if (ends_with(path, ".json")) return path.substr(0, path.size() - 5);
  if (ends_with(path, ".f32")) return path.substr(0, path.size() - 4);
  return path;
}

}  // namespace detail

inline void write_volume_raw(const std::string& path, const Volume& v) {
  v.validate_geometry();
  const std::string base = detail::raw_base(path);
  nlohmann::ordered_json j;
  j["dims"] = v.dims;
  j["spacing"] = v.spacing;
  j["origin"] = v.origin;
  j["kind"] = kind_name(v.kind);
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  {
    std::ofstream f(base + ".json");
    if (!f) throw std::runtime_error("raw: cannot write " + base + ".json");
    f << j.dump(2) << "\n";
  }
  std::ofstream f(base + ".f32", std::ios::binary);
  if (!f) throw std::runtime_error("raw: cannot write " + base + ".f32");
  f.write(reinterpret_cast<const char*>(v.data.data()),
          static_cast<std::streamsize>(v.data.size() * 4));
  if (!f) throw std::runtime_error("raw: short write to " + base + ".f32");
}

inline Volume read_volume_raw(const std::string& path) {
  const std::string base = detail::raw_base(path);
  std::ifstream jf(base + ".json");
  if (!jf) throw std::runtime_error("raw: cannot open " + base + ".json");
  nlohmann::json j = nlohmann::json::parse(jf);
  if (j.value("dtype", "float32") != "float32")
    throw std::runtime_error("raw: unsupported dtype \"" + j.value("dtype", "") + "\"");
  if (j.value("byte_order", "little") != "little")
    throw std::runtime_error("raw: unsupported byte_order \"" + j.value("byte_order", "") + "\"");
  Volume v;
  auto dims = j.at("dims");
  auto sp = j.at("spacing");
  for (int a = 0; a < 3; ++a) {
    v.dims[a] = dims.at(a).get<std::int64_t>();
    v.spacing[a] = sp.at(a).get<double>();
  }
  if (j.contains("origin"))
    for (int a = 0; a < 3; ++a) v.origin[a] = j["origin"].at(a).get<double>();
  v.kind = kind_from_name(j.value("kind", "intensity"));
  v.validate_geometry();
  std::ifstream f(base + ".f32", std::ios::binary);
  if (!f) throw std::runtime_error("raw: cannot open " + base + ".f32");
  v.data.resize(static_cast<size_t>(v.voxels()));
  f.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * 4));
  if (f.gcount() != static_cast<std::streamsize>(v.data.size() * 4))
    throw std::runtime_error("raw: " + base + ".f32 truncated (expected " +
                             std::to_string(v.data.size() * 4) + " bytes)");
  return v;
}

/// Format dispatch by extension: .nii/.nii.gz or the raw .json/.f32 pair.
inline Volume read_volume(const std::string& path) {
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz"))
    return read_nifti(path);
  return read_volume_raw(path);
}

inline void write_volume(const std::string& path, const Volume& v) {
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    write_nifti(path, v);
    return;
  }
  write_volume_raw(path, v);
}

}  // namespace spinectx
