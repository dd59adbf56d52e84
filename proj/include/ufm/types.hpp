#ifndef UFM_TYPES_HPP
#define UFM_TYPES_HPP

#include <Eigen/Dense>

namespace ufm {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

/// Half-open range [begin, end) of row or column indices.
struct IndexRange {
  Index begin = 0;
  Index end = 0;

  Index size() const { return end - begin; }
  bool contains(Index i) const { return i >= begin && i < end; }
  bool overlaps(const IndexRange& other) const {
    return begin < other.end && other.begin < end;
  }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

}  // namespace ufm

#endif  // UFM_TYPES_HPP
