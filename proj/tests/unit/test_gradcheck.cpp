#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "tcl/gradcheck.hpp"
#include "tcl/ops.hpp"

using namespace tcl;

TEST_CASE("finite differences of x^2 at 3") {
  std::function<double(const Tensor64&)> f = [](const Tensor64& x) { return x[0] * x[0]; };
  Tensor64 g = gradcheck::finite_difference_gradient(f, Tensor64({1}, {3.0}), 1e-3);
  CHECK(std::abs(g[0] - 6.0) < 1e-5);

  std::function<float(const Tensor&)> ff = [](const Tensor& x) { return x[0] * x[0]; };
  Tensor gf = gradcheck::finite_difference_gradient(ff, Tensor({1}, {3.0f}), 1e-3f);
  CHECK(std::abs(gf[0] - 6.0f) < 2e-2f);  // 32-bit rounding dominates here
}

TEST_CASE("finite differences of a constant are zero") {
  std::function<double(const Tensor64&)> f = [](const Tensor64&) { return 4.25; };
  Tensor64 g = gradcheck::finite_difference_gradient(f, Tensor64({5}, 1.0), 1e-3);
  for (double v : g.data()) CHECK(v == 0.0);
}

TEST_CASE("finite differences of a sum of squares equal 2x") {
  Rng rng(5);
  Tensor64 x({20});
  for (double& v : x.data()) v = rng.normal();
  std::function<double(const Tensor64&)> f = [](const Tensor64& v) {
    double s = 0;
    for (double e : v.data()) s += e * e;
    return s;
  };
  Tensor64 g = gradcheck::finite_difference_gradient(f, x, 1e-3);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(g[i] - 2 * x[i]) < 1e-4);
}

TEST_CASE("finite differences reject a nonpositive epsilon") {
  std::function<double(const Tensor64&)> f = [](const Tensor64&) { return 0.0; };
  CHECK_THROWS_AS(gradcheck::finite_difference_gradient(f, Tensor64({1}), 0.0), ConfigError);
}

TEST_CASE("relative error uses a floored denominator") {
  std::vector<double> a = {1.0, 0.0, 1e-6};
  std::vector<double> n = {1.001, 5e-9, 0.0};
  CHECK(gradcheck::max_relative_error(a, n) == doctest::Approx(1e-2));
  std::vector<double> bad = {std::nan("")};
  std::vector<double> ok = {0.0};
  CHECK(!(gradcheck::max_relative_error(bad, ok) < 1.0));
}

TEST_CASE("every op passes its finite-difference check") {
  const auto results = gradcheck::check_all_ops();
  std::set<std::string> names;
  for (const auto& r : results) {
    INFO(r.name << " max rel error " << r.max_relative_error);
    CHECK(r.passed);
    CHECK(r.max_relative_error < 1e-3);
    CHECK(names.insert(r.name).second);
  }
  const auto expected = gradcheck::op_names();
  CHECK(names == std::set<std::string>(expected.begin(), expected.end()));
}

TEST_CASE("a sign flip in one backward kernel is detected") {
  for (const std::string op : {"conv2d", "local_response_norm", "gru_sequence", "dense"}) {
    testing::ScopedBackwardFault fault(op);
    const auto results = gradcheck::check_all_ops();
    auto it = std::find_if(results.begin(), results.end(), [&](const auto& r) { return r.name == op; });
    REQUIRE(it != results.end());
    INFO(op);
    CHECK_FALSE(it->passed);
  }
  // The fault is scoped.
  for (const auto& r : gradcheck::check_all_ops()) CHECK(r.passed);
}
