#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace radd {

// Row-major dense storage shared by every module. Values are held in 64-bit,
// and trainer-owned tensors are kept representable in 32-bit (see
// round_to_storage) so checkpoints written as float32 reload exactly.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Matrix* tensor;
};

inline std::span<double> row_span(Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline void round_to_storage(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace radd
