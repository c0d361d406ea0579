#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace exmap {

static_assert(std::endian::native == std::endian::little,
              "file and wire formats are little-endian; big-endian hosts are unsupported");

inline constexpr int kBlendshapeCount = 51;
inline constexpr int kExprCount = 50;
inline constexpr int kJointCount = 3;         // jaw, left eye, right eye
inline constexpr int kParamCount = 68;        // 50 expression + 3 x 6D rotations
inline constexpr int kPoseFeatureCount = 27;  // 3 joints x 9 rotation-matrix entries

template <typename T> using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T> using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec6 = Eigen::Matrix<T, 6, 1>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;

using BlendshapeVec = Eigen::Matrix<double, kBlendshapeCount, 1>;
using ParamVec = Eigen::Matrix<double, kParamCount, 1>;

/// Runtime failure carrying a stable machine-parsable class tag
/// ("io-error", "bad-input", "version-mismatch", ...). The CLI prints the
/// tag verbatim so scripts can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(std::string cls, const std::string& message)
      : std::runtime_error(message), cls_(std::move(cls)) {}
  const std::string& cls() const noexcept { return cls_; }

 private:
  std::string cls_;
};

// splitmix64 finalizer; used to derive independent RNG substreams from one
// user-facing seed without correlated low bits.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(mix64(seed, stream));
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace exmap
