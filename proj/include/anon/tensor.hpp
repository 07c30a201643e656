#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace anon {

// Row-major so that a [tokens x d] clip is contiguous token by token, which
// is also the on-disk layout of the feature store.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;

// 64-bit FNV-1a. Used for encoder fingerprints and checkpoint hashes, where
// we need a stable, platform-independent digest rather than security.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename Derived>
  void update_matrix(const Eigen::MatrixBase<Derived>& m) {
    const std::int64_t shape[2] = {static_cast<std::int64_t>(m.rows()),
                                   static_cast<std::int64_t>(m.cols())};
    update(shape, sizeof(shape));
    // Hash in row-major order regardless of the storage order.
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const auto v = m(r, c);
        update(&v, sizeof(v));
      }
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << state_;
    return os.str();
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace anon
