#pragma once

#include <cstdint>
#include <vector>

#include "tcl/gradcheck.hpp"
#include "tcl/netarch.hpp"

namespace tcl::gradcheck {

inline constexpr double kNetworkTolerance = 3e-3;
inline constexpr double kNetworkEpsilon = 1e-5;
// A check with more than this share of its coordinates on kinks fails.
inline constexpr double kMaxKinkFraction = 0.1;

// 12x16 input, widths / 64: small enough to difference every parameter.
ArchConfig reduced_arch();

// Cross-entropy of each network on a tiny batch (dropout active with a fixed
// mask), differentiated against every coordinate of every parameter, or
// against per_param random coordinates of each parameter when nonzero.
std::vector<CheckResult> check_networks(std::uint64_t seed = 11, const ArchConfig& arch = reduced_arch(),
                                        std::size_t per_param = 0, double epsilon = kNetworkEpsilon);

// Desk-scale check: sampled coordinates and a smaller step, since a bias
// feeds every spatial position and 1e-5 already crosses many ReLU kinks.
inline constexpr std::size_t kDeskCoordinates = 24;
inline constexpr double kDeskEpsilon = 1e-7;

}  // namespace tcl::gradcheck
