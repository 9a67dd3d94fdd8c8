#include "tcl/net_gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace tcl::gradcheck {

namespace {

using Net64 = BasicNetwork<double>;
using LossFn = std::function<Var<double>(Tape<double>&, Net64&)>;

Tensor64 random_frames(std::size_t n, const ArchConfig& a, Rng& rng) {
  Tensor64 t({n, 3, std::size_t(a.input_height), std::size_t(a.input_width)});
  for (double& v : t.data()) v = rng.uniform(-0.5, 0.5);
  return t;
}

// per_param == 0 differences every coordinate; otherwise a random subset of
// that many coordinates per parameter tensor.
CheckResult check_network(const std::string& name, Net64& net, const LossFn& loss_fn, std::size_t per_param,
                          double epsilon, Rng& pick) {
  {
    net.zero_grad();
    Tape<double> tape;
    tape.backward(loss_fn(tape, net));
  }
  auto loss_value = [&] {
    Tape<double> tape;
    return loss_fn(tape, net).value().item();
  };
  std::vector<double> analytic, numeric;
  std::size_t kinks = 0, total = 0;
  for (const auto& p : net.parameters()) {
    std::vector<std::size_t> coords;
    if (per_param == 0 || per_param >= p->value.size()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < per_param; ++k) coords.push_back(pick.below(p->value.size()));
    }
    for (std::size_t i : coords) {
      ++total;
      auto central = [&](double eps) {
        const double orig = p->value[i];
        p->value[i] = orig + eps;
        const double up = loss_value();
        p->value[i] = orig - eps;
        const double down = loss_value();
        p->value[i] = orig;
        return (up - down) / (2 * eps);
      };
      const double coarse = central(epsilon), fine = central(epsilon / 2);
      // On a smooth stretch the two agree to O(eps^2). A ReLU or max-pool
      // switch inside the interval breaks that, and neither is a derivative.
      if (std::abs(coarse - fine) > kNetworkTolerance * std::max({std::abs(coarse), std::abs(fine), 1e-4})) {
        ++kinks;
        continue;
      }
      analytic.push_back(p->grad[i]);
      numeric.push_back(coarse);
    }
  }
  CheckResult r;
  r.name = name;
  r.tolerance = kNetworkTolerance;
  r.coordinates = total;
  r.kinks = kinks;
  r.max_relative_error = max_relative_error(analytic, numeric);
  r.passed = r.max_relative_error < kNetworkTolerance && double(kinks) <= kMaxKinkFraction * double(total);
  return r;
}

}  // namespace

ArchConfig reduced_arch() {
  ArchConfig a = ArchConfig::desk();
  a.input_height = 12;
  a.input_width = 16;
  a.scale_factor = 64;
  return a;
}

std::vector<CheckResult> check_networks(std::uint64_t seed, const ArchConfig& arch, std::size_t per_param,
                                        double epsilon) {
  Rng rng(derive_seed(seed, "net-inputs"));
  Rng pick(derive_seed(seed, "net-coords"));
  const std::uint64_t mask_seed = derive_seed(seed, "net-dropout");
  std::vector<CheckResult> out;

  {
    Net64 net = Network(NetKind::kTcl, arch, 2, derive_seed(seed, "tcl")).cast<double>();
    const Tensor64 a = random_frames(2, arch, rng), b = random_frames(2, arch, rng);
    const std::vector<int> targets = {0, 1};
    out.push_back(check_network("tcl_network", net, [&](Tape<double>& tape, Net64& n) {
      Rng drop(mask_seed);
      auto o = n.order_forward(tape, tape.constant(a), tape.constant(b), ops::Mode::kTrain, drop);
      return ops::categorical_cross_entropy(o.probs, targets);
    }, per_param, epsilon, pick));
  }
  const int phases = 3;
  const Tensor64 frames = random_frames(3, arch, rng);
  const std::vector<int> labels = {0, 2, 1};
  {
    Net64 net = Network(NetKind::kNaive, arch, phases, derive_seed(seed, "naive")).cast<double>();
    out.push_back(check_network("naive_network", net, [&](Tape<double>& tape, Net64& n) {
      Rng drop(mask_seed);
      auto o = n.phase_forward(tape, tape.constant(frames), ops::Mode::kTrain, drop);
      return ops::categorical_cross_entropy(o.probs, labels);
    }, per_param, epsilon, pick));
  }
  {
    Net64 net = Network(NetKind::kTempCoNet, arch, phases, derive_seed(seed, "tempconet")).cast<double>();
    Tensor64 h0(net.hidden_state().shape());
    for (double& v : h0.data()) v = rng.uniform(-0.5, 0.5);
    out.push_back(check_network("tempconet_network", net, [&](Tape<double>& tape, Net64& n) {
      Rng drop(mask_seed);
      n.set_hidden_state(h0);
      auto o = n.phase_forward(tape, tape.constant(frames), ops::Mode::kTrain, drop);
      return ops::categorical_cross_entropy(o.probs, labels);
    }, per_param, epsilon, pick));
  }
  return out;
}

}  // namespace tcl::gradcheck
