#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace convtran {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using Index = Eigen::Index;

// Integer lookup table; a negative entry means "no source" and reads as zero.
using IndexMap = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace convtran
