#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spinectx {

/// Logical shape of a rank-5 tensor in (batch, channel, depth, height, width) order.
struct Shape5 {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t d = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return n * c * d * h * w; }
  std::int64_t spatial() const { return d * h * w; }

  bool operator==(const Shape5& o) const = default;

  bool same_spatial(const Shape5& o) const { return d == o.d && h == o.h && w == o.w; }

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << d << "," << h << "," << w << ")";
    return os.str();
  }
};

/// Dense rank-5 array, row-major (n,c,d,h,w), with an optional gradient buffer
/// of identical shape. The universal carrier of activations and weights.
template <typename Scalar>
class Tensor5 {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Array>;
  using ConstMap = Eigen::Map<const Array>;

  Shape5 shape{};
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until ensure_grad()

  Tensor5() = default;
  explicit Tensor5(const Shape5& s) : shape(s), data(static_cast<size_t>(s.numel()), Scalar(0)) {
    if (s.n <= 0 || s.c <= 0 || s.d <= 0 || s.h <= 0 || s.w <= 0)
      throw std::invalid_argument("Tensor5: non-positive dimension in shape " + s.str());
  }

  static Tensor5 zeros(const Shape5& s) { return Tensor5(s); }
  static Tensor5 full(const Shape5& s, Scalar v) {
    Tensor5 t(s);
    t.array() = v;
    return t;
  }

  std::int64_t numel() const { return shape.numel(); }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y,
                     std::int64_t x) const {
    return (((n * shape.c + c) * shape.d + z) * shape.h + y) * shape.w + x;
  }

  Scalar& at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<size_t>(index(n, c, z, y, x))];
  }
  Scalar at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<size_t>(index(n, c, z, y, x))];
  }

  Map array() { return Map(data.data(), static_cast<Eigen::Index>(data.size())); }
  ConstMap array() const { return ConstMap(data.data(), static_cast<Eigen::Index>(data.size())); }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), Scalar(0));
  }
  Map grad_array() {
    ensure_grad();
    return Map(grad.data(), static_cast<Eigen::Index>(grad.size()));
  }
};

template <typename Scalar>
using TensorPtr = std::shared_ptr<Tensor5<Scalar>>;

template <typename Scalar>
TensorPtr<Scalar> make_tensor(const Shape5& s) {
  return std::make_shared<Tensor5<Scalar>>(s);
}

template <typename Scalar>
bool all_finite(const Tensor5<Scalar>& t) {
  for (Scalar v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

/// Deterministic standard-normal sampler (Box-Muller over mt19937_64), so
/// seeded initialization does not depend on the standard library's
/// distribution internals.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform in (0,1], never returns 0 so log() above is safe.
  double uniform01() {
    return (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
  }

  std::uint64_t raw() { return rng_(); }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace spinectx
