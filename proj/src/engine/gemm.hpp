#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace tcl::detail {

// Row-major C[m x n] (+)= op(A) * op(B), where op(A) is m x k and op(B) is k x n.
// Single-threaded Eigen keeps results deterministic for a given shape.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat>;
  using Index = Eigen::Index;
  Eigen::Map<Mat> out(c, static_cast<Index>(m), static_cast<Index>(n));
  if (k == 0) {
    if (!accumulate) out.setZero();
    return;
  }
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  const auto mi = static_cast<Index>(m), ni = static_cast<Index>(n), ki = static_cast<Index>(k);
  if (!trans_a && !trans_b) {
    run(ConstMap(a, mi, ki), ConstMap(b, ki, ni));
  } else if (!trans_a && trans_b) {
    run(ConstMap(a, mi, ki), ConstMap(b, ni, ki).transpose());
  } else if (trans_a && !trans_b) {
    run(ConstMap(a, ki, mi).transpose(), ConstMap(b, ki, ni));
  } else {
    run(ConstMap(a, ki, mi).transpose(), ConstMap(b, ni, ki).transpose());
  }
}

}  // namespace tcl::detail
