#include "tcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tcl/ops.hpp"
#include "tcl/rng.hpp"

namespace tcl::gradcheck {

template <typename T>
BasicTensor<T> finite_difference_gradient(const std::function<T(const BasicTensor<T>&)>& f,
                                          const BasicTensor<T>& x, T epsilon) {
  if (!(epsilon > T{0})) throw ConfigError("finite_difference_gradient: epsilon must be positive");
  BasicTensor<T> grad(x.shape());
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + epsilon;
    const T up = f(probe);
    probe[i] = orig - epsilon;
    const T down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (T{2} * epsilon);
  }
  return grad;
}

template Tensor finite_difference_gradient(const std::function<float(const Tensor&)>&,
                                           const Tensor&, float);
template Tensor64 finite_difference_gradient(const std::function<double(const Tensor64&)>&,
                                             const Tensor64&, double);

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) {
    throw InvalidShapeError("max_relative_error: size mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    const double err = std::abs(a - n) / denom;
    if (!(err <= worst)) worst = err;  // NaN propagates as failure
  }
  return worst;
}

namespace {

Tensor64 random_normal(Shape shape, Rng& rng) {
  Tensor64 t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// Keeps inputs away from kinks so central differences stay one-sided-free.
Tensor64 random_away_from_zero(Shape shape, Rng& rng, double margin) {
  Tensor64 t(std::move(shape));
  for (double& v : t.data()) {
    do {
      v = rng.normal();
    } while (std::abs(v) < margin);
  }
  return t;
}

bool pool_has_near_tie(const Tensor64& x, int window, int stride, double margin) {
  const Shape& s = x.shape();
  const std::size_t h = s[2], w = s[3];
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo) {
        std::vector<double> vals;
        for (int i = 0; i < window; ++i) {
          for (int j = 0; j < window; ++j) {
            vals.push_back(x[plane * h * w + (y * stride + i) * w + xo * stride + j]);
          }
        }
        std::sort(vals.begin(), vals.end(), std::greater<>());
        if (vals[0] - vals[1] < margin) return true;
      }
    }
  }
  return false;
}

}  // namespace

CheckResult check_function(const std::string& name, std::vector<Tensor64> inputs,
                           const Builder& build, double epsilon, double tolerance,
                           std::uint64_t seed) {
  Tensor64 projection;
  {
    Tape<double> probe;
    std::vector<Var<double>> vars;
    for (const Tensor64& t : inputs) vars.push_back(probe.constant(t));
    Var<double> out = build(probe, vars);
    Rng rng(derive_seed(seed, "projection"));
    projection = random_normal(out.shape(), rng);
  }
  auto loss_of = [&](const std::vector<Tensor64>& values) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const Tensor64& t : values) vars.push_back(tape.constant(t));
    Var<double> out = build(tape, vars);
    return ops::weighted_sum(out, projection).value().item();
  };

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const Tensor64& t : inputs) vars.push_back(tape.variable(t));
  Var<double> loss = ops::weighted_sum(build(tape, vars), projection);
  tape.backward(loss);

  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor64 g = tape.grad(vars[i]);
    analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    std::vector<Tensor64> values = inputs;
    std::function<double(const Tensor64&)> f = [&](const Tensor64& x) {
      values[i] = x;
      return loss_of(values);
    };
    const Tensor64 n = finite_difference_gradient(f, inputs[i], epsilon);
    numeric.insert(numeric.end(), n.data().begin(), n.data().end());
  }
  CheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  r.coordinates = analytic.size();
  r.max_relative_error = max_relative_error(analytic, numeric);
  r.passed = r.max_relative_error < tolerance;
  return r;
}

std::vector<std::string> op_names() {
  return {"conv2d",  "max_pool2d",   "local_response_norm", "dense",
          "relu",    "softmax",      "dropout",             "concat",
          "gru_sequence", "categorical_cross_entropy", "reshape", "gather_rows",
          "add",     "sum",          "weighted_sum"};
}

std::vector<CheckResult> check_all_ops(std::uint64_t seed) {
  using V = Var<double>;
  using Span = std::span<const V>;
  Rng rng(derive_seed(seed, "op-inputs"));
  const double eps = kOpEpsilon, tol = kOpTolerance;
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor64> inputs, const Builder& b) {
    out.push_back(check_function(name, std::move(inputs), b, eps, tol, derive_seed(seed, name)));
  };

  run("conv2d",
      {random_normal({2, 3, 8, 8}, rng), random_normal({4, 3, 3, 3}, rng), random_normal({4}, rng)},
      [](Tape<double>&, Span v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); });

  Tensor64 pool_in;
  do {
    pool_in = random_normal({1, 2, 6, 6}, rng);
  } while (pool_has_near_tie(pool_in, 3, 2, 1e-2));
  run("max_pool2d", {pool_in}, [](Tape<double>&, Span v) { return ops::max_pool2d(v[0], 3, 2); });

  run("local_response_norm", {random_normal({1, 8, 4, 4}, rng)}, [](Tape<double>&, Span v) {
    return ops::local_response_norm(v[0], ops::LrnParams{5, 2.0, 0.1, 0.75});
  });

  run("dense", {random_normal({3, 5}, rng), random_normal({5, 4}, rng), random_normal({4}, rng)},
      [](Tape<double>&, Span v) { return ops::dense(v[0], v[1], v[2]); });

  run("relu", {random_away_from_zero({4, 6}, rng, 1e-2)},
      [](Tape<double>&, Span v) { return ops::relu(v[0]); });

  run("softmax", {random_normal({4, 7}, rng)}, [](Tape<double>&, Span v) { return ops::softmax(v[0]); });

  const std::uint64_t mask_seed = derive_seed(seed, "dropout-mask");
  run("dropout", {random_normal({4, 6}, rng)}, [mask_seed](Tape<double>&, Span v) {
    Rng mask_rng(mask_seed);
    return ops::dropout(v[0], 0.3, ops::Mode::kTrain, mask_rng);
  });

  run("concat", {random_normal({3, 4}, rng), random_normal({3, 5}, rng)},
      [](Tape<double>&, Span v) { return ops::concat(v[0], v[1]); });

  {
    const std::size_t steps = 4, n = 2, d = 3, h = 5;
    std::vector<Tensor64> in = {random_normal({steps, n, d}, rng), random_normal({n, h}, rng)};
    for (int gate = 0; gate < 3; ++gate) {
      in.push_back(random_normal({d, h}, rng));
      in.push_back(random_normal({h, h}, rng));
      in.push_back(random_normal({h}, rng));
    }
    run("gru_sequence", std::move(in), [](Tape<double>&, Span v) {
      ops::GruWeights<double> w{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
      auto res = ops::gru_sequence(v[0], v[1], w);
      // Route gradient through both the sequence and the final-state output.
      auto last = ops::reshape(res.last, {1, 2, 5});
      auto seq = ops::reshape(res.outputs, {4, 2, 5});
      return ops::concat(ops::reshape(seq, {1, 40}), ops::reshape(last, {1, 10}));
    });
  }

  {
    std::vector<int> targets = {0, 3, 1, 2, 3};
    run("categorical_cross_entropy", {random_normal({5, 4}, rng)},
        [targets](Tape<double>&, Span v) {
          return ops::categorical_cross_entropy(ops::softmax(v[0]), targets);
        });
  }

  run("reshape", {random_normal({2, 3, 4}, rng)},
      [](Tape<double>&, Span v) { return ops::reshape(v[0], {6, 4}); });

  {
    std::vector<std::size_t> rows = {2, 0, 2, 1};
    run("gather_rows", {random_normal({3, 4}, rng)},
        [rows](Tape<double>&, Span v) { return ops::gather_rows(v[0], rows); });
  }

  run("add", {random_normal({3, 4}, rng), random_normal({3, 4}, rng)},
      [](Tape<double>&, Span v) { return ops::add(v[0], v[1]); });

  run("sum", {random_normal({3, 4}, rng)}, [](Tape<double>&, Span v) { return ops::sum(v[0]); });

  {
    Tensor64 w = random_normal({3, 4}, rng);
    run("weighted_sum", {random_normal({3, 4}, rng)},
        [w](Tape<double>&, Span v) { return ops::weighted_sum(v[0], w); });
  }
  return out;
}

}  // namespace tcl::gradcheck
