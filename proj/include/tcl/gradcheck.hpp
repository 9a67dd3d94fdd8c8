#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tcl/tape.hpp"
#include "tcl/tensor.hpp"

namespace tcl::gradcheck {

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
template <typename T>
BasicTensor<T> finite_difference_gradient(const std::function<T(const BasicTensor<T>&)>& f,
                                          const BasicTensor<T>& x, T epsilon);

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-4);

struct CheckResult {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  std::size_t kinks = 0;  // coordinates left out because +-eps straddles a kink
  bool passed = false;
};

using Builder = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

// Checks d(loss)/d(inputs) where loss = sum(out * R) for a fixed random R.
// Every input is treated as a differentiable leaf.
CheckResult check_function(const std::string& name, std::vector<Tensor64> inputs,
                           const Builder& build, double epsilon, double tolerance,
                           std::uint64_t seed);

inline constexpr double kOpTolerance = 1e-3;
inline constexpr double kOpEpsilon = 1e-3;

// One result per differentiable op in tcl::ops, in a fixed order.
std::vector<CheckResult> check_all_ops(std::uint64_t seed = 7);

std::vector<std::string> op_names();

}  // namespace tcl::gradcheck
