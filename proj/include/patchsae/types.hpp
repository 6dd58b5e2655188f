#pragma once

#include <Eigen/Dense>

namespace patchsae {

/// Rows are tokens (or samples), columns are features.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixf = RowMatrix<float>;
using RowMatrixd = RowMatrix<double>;
using Vectorf = Vector<float>;
using Vectord = Vector<double>;

using LatentId = int;

} // namespace patchsae
