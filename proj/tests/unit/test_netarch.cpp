#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "tcl/net_gradcheck.hpp"
#include "tcl/netarch.hpp"

using namespace tcl;
namespace fs = std::filesystem;

namespace {

Tensor random_frames(std::size_t n, const ArchConfig& a, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 3, std::size_t(a.input_height), std::size_t(a.input_width)});
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return t;
}

Tensor fc6_of(Network& net, const Tensor& frames, int slot = 0) {
  Tape<float> tape;
  return net.embed(tape, tape.constant(frames), slot).value();
}

Tensor logits_of(Network& net, const Tensor& frames) {
  Tape<float> tape;
  Rng rng(0);
  return net.phase_forward(tape, tape.constant(frames), ops::Mode::kEval, rng).logits.value();
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("tcl_test_" + std::to_string(::getpid()) + "_" + name);
}

int conv_out(int size, int k, int s, int p) { return (size + 2 * p - k) / s + 1; }

}  // namespace

TEST_CASE("default arch: fc6 is 4096 wide and the siamese concat is 8192") {
  ArchConfig a;
  a.input_height = 67;  // smallest square AlexNet input that survives all pools
  a.input_width = 67;
  a.fc7_units = 8;
  a.fc8_units = 4;
  Network net = build_tcl_net(a);
  CHECK(net.parameter("fc6.weights").value.shape()[1] == 4096);
  CHECK(net.parameter("fc7.weights").value.shape()[0] == 8192);
  CHECK(net.parameter("fc9.weights").value.shape()[1] == 2);
  CHECK(net.output_width() == 2);
  CHECK(fc6_of(net, random_frames(1, a, 1)).shape() == Shape{1, 4096});
}

TEST_CASE("default arch at 240x320 ends in a 256x6x8 map") {
  const auto shapes = ArchConfig().chain_shapes();
  CHECK(shapes[4].second == Shape{1, 256, 6, 8});
  CHECK(shapes[5].second == Shape{1, 4096});
}

TEST_CASE("scale 16 at 60x80: shape chain matches hand arithmetic") {
  ArchConfig a = ArchConfig::desk();
  a.input_height = 60;
  a.input_width = 80;
  // Hand computation for the desk convs.
  int h = conv_out(60, 5, 2, 2), w = conv_out(80, 5, 2, 2);  // 30 x 40
  CHECK(h == 30);
  CHECK(w == 40);
  h = (h - 2) / 2 + 1, w = (w - 2) / 2 + 1;  // pool: 15 x 20
  h = (conv_out(h, 3, 1, 1) - 2) / 2 + 1;     // conv2 + pool: 7
  w = (conv_out(w, 3, 1, 1) - 2) / 2 + 1;     // 10
  const std::size_t flat = std::size_t(256 / 16) * h * w;
  CHECK(flat == 1120);

  const auto shapes = a.chain_shapes(2);
  CHECK(shapes[0].second == Shape{2, 6, 15, 20});
  CHECK(shapes[1].second == Shape{2, 16, 7, 10});
  CHECK(shapes[4].second == Shape{2, 16, 7, 10});
  Network net = build_tcl_net(a);
  CHECK(net.parameter("fc6.weights").value.shape() == Shape{flat, 256});
  CHECK(fc6_of(net, random_frames(2, a, 3)).shape() == Shape{2, 256});
}

TEST_CASE("default conv stack cannot pool a 60x80 input") {
  ArchConfig a;
  a.input_height = 60;
  a.input_width = 80;
  a.scale_factor = 16;
  CHECK_THROWS_AS(a.validate(), ConfigError);
}

TEST_CASE("arch validation") {
  ArchConfig a = ArchConfig::desk();
  a.scale_factor = 3;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = ArchConfig::desk();
  a.dropout_p = 1.0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = ArchConfig::desk();
  a.conv_specs.pop_back();
  CHECK_THROWS_AS(a.validate(), ConfigError);
}

TEST_CASE("arch json roundtrip and unknown keys") {
  ArchConfig a = ArchConfig::desk();
  a.lrn.alpha = 3e-4;
  CHECK(ArchConfig::from_json(a.to_json()) == a);
  auto j = a.to_json();
  j["fc10_units"] = 5;
  CHECK_THROWS_AS(ArchConfig::from_json(j), ConfigError);
  auto k = a.to_json();
  k["conv_specs"][0]["dilation"] = 2;
  CHECK_THROWS_AS(ArchConfig::from_json(k), ConfigError);
}

TEST_CASE("siamese chains share storage") {
  Network net = build_tcl_net(ArchConfig::desk(), 5);
  std::size_t aliased = 0;
  for (const std::string& layer : chain_layers()) {
    for (const char* suffix : {".kernel", ".weights", ".bias"}) {
      const std::string name = layer + suffix;
      if (!net.has_parameter(name)) continue;
      CHECK(net.chain_parameter(0, name).get() == net.chain_parameter(1, name).get());
      CHECK(net.aliases().at("chain_b." + name) == name);
      ++aliased;
    }
  }
  CHECK(aliased == 12);
  CHECK(net.aliases().size() == 12);
  CHECK(net.chain_parameter(1, "fc7.weights").get() == net.chain_parameter(0, "fc7.weights").get());

  // Updating through chain A is visible through chain B.
  net.chain_parameter(0, "conv3.kernel")->value[0] += 1.0f;
  CHECK(net.chain_parameter(1, "conv3.kernel")->value == net.chain_parameter(0, "conv3.kernel")->value);
}

TEST_CASE("the same frame in both slots gives identical fc6 outputs") {
  const ArchConfig a = ArchConfig::desk();
  Network net = build_tcl_net(a, 9);
  const Tensor x = random_frames(3, a, 4);
  CHECK(fc6_of(net, x, 0) == fc6_of(net, x, 1));
}

TEST_CASE("swapping siamese inputs swaps the concat halves") {
  const ArchConfig a = ArchConfig::desk();
  Network net = build_tcl_net(a, 9);
  const Tensor x = random_frames(2, a, 5), y = random_frames(2, a, 6);
  auto halves = [&](const Tensor& first, const Tensor& second) {
    Tape<float> tape;
    auto e1 = net.embed(tape, tape.constant(first), 0);
    auto e2 = net.embed(tape, tape.constant(second), 1);
    return ops::concat(e1, e2).value();
  };
  const Tensor xy = halves(x, y), yx = halves(y, x);
  const std::size_t d = xy.shape()[1] / 2;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      CHECK(xy[r * 2 * d + j] == yx[r * 2 * d + d + j]);
      CHECK(xy[r * 2 * d + d + j] == yx[r * 2 * d + j]);
    }
  }
}

TEST_CASE("indexed order forward matches the two-chain forward") {
  const ArchConfig a = ArchConfig::desk();
  Network net = build_tcl_net(a, 2);
  const Tensor frames = random_frames(3, a, 7);
  const std::vector<std::size_t> ia = {0, 0, 1, 1, 2, 2}, ib = {1, 2, 2, 0, 0, 1};
  Tensor fa({6, 3, 24, 32}), fb({6, 3, 24, 32});
  const std::size_t per = 3 * 24 * 32;
  for (std::size_t i = 0; i < 6; ++i) {
    std::copy(frames.raw() + ia[i] * per, frames.raw() + (ia[i] + 1) * per, fa.raw() + i * per);
    std::copy(frames.raw() + ib[i] * per, frames.raw() + (ib[i] + 1) * per, fb.raw() + i * per);
  }
  Rng r1(0), r2(0);
  Tape<float> t1, t2;
  const Tensor p1 = net.order_forward(t1, t1.constant(fa), t1.constant(fb), ops::Mode::kEval, r1).probs.value();
  const Tensor p2 =
      net.order_forward_indexed(t2, t2.constant(frames), ia, ib, ops::Mode::kEval, r2).probs.value();
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(std::abs(p1[i] - p2[i]) < 1e-6);
}

TEST_CASE("phase network output widths and row sums") {
  const ArchConfig a = ArchConfig::desk();
  for (int n : {7, 8}) {
    Network naive = build_naive_lwfnet(a, n, 1);
    Network temp = build_tempconet(a, n, 1);
    CHECK(naive.output_width() == std::size_t(n));
    CHECK(temp.output_width() == std::size_t(n));
    for (Network* net : {&naive, &temp}) {
      Tape<float> tape;
      Rng rng(0);
      auto o = net->phase_forward(tape, tape.constant(random_frames(5, a, 2)), ops::Mode::kEval, rng);
      CHECK(o.probs.shape() == Shape{5, std::size_t(n)});
      for (std::size_t r = 0; r < 5; ++r) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += o.probs.value()[r * n + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
  CHECK_THROWS_AS(build_naive_lwfnet(a, 1), ConfigError);
  CHECK_THROWS_AS(build_tempconet(a, 0), ConfigError);
}

TEST_CASE("naive net has no recurrent parameters") {
  Network naive = build_naive_lwfnet(ArchConfig::desk(), 4);
  for (const auto& p : naive.parameters()) CHECK(p->name.rfind("gru.", 0) != 0);
  Network temp = build_tempconet(ArchConfig::desk(), 4);
  std::size_t gru = 0;
  for (const auto& p : temp.parameters()) gru += p->name.rfind("gru.", 0) == 0;
  CHECK(gru == 9);
}

TEST_CASE("wrong input resolution is a shape error") {
  Network net = build_naive_lwfnet(ArchConfig::desk(), 3);
  ArchConfig other = ArchConfig::desk();
  other.input_width = 40;
  Tape<float> tape;
  Rng rng(0);
  CHECK_THROWS_AS(net.phase_forward(tape, tape.constant(random_frames(1, other, 1)), ops::Mode::kEval, rng),
                  InvalidShapeError);
}

TEST_CASE("recurrent hidden state starts at zero and carries across chunks") {
  const ArchConfig a = ArchConfig::desk();
  Network net = build_tempconet(a, 5, 3);
  for (float v : net.hidden_state().data()) CHECK(v == 0.0f);
  CHECK(net.hidden_state().shape() == Shape{1, 16});

  const Tensor frames = random_frames(8, a, 11);
  const Tensor whole = logits_of(net, frames);
  CHECK(whole.shape() == Shape{8, 5});
  const Tensor after_whole = net.hidden_state();

  net.reset_hidden_state();
  const std::size_t per = 3 * 24 * 32;
  Tensor first({4, 3, 24, 32}), second({4, 3, 24, 32});
  std::copy(frames.raw(), frames.raw() + 4 * per, first.raw());
  std::copy(frames.raw() + 4 * per, frames.raw() + 8 * per, second.raw());
  const Tensor l1 = logits_of(net, first), l2 = logits_of(net, second);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(std::abs(l1[i] - whole[i]) < 1e-5);
    CHECK(std::abs(l2[i] - whole[20 + i]) < 1e-5);
  }
  for (std::size_t i = 0; i < after_whole.size(); ++i) {
    CHECK(std::abs(net.hidden_state()[i] - after_whole[i]) < 1e-6);
  }

  // Without carryover the second chunk starts from zero and differs.
  net.reset_hidden_state();
  const Tensor fresh = logits_of(net, second);
  double diff = 0;
  for (std::size_t i = 0; i < 20; ++i) diff += std::abs(fresh[i] - l2[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("initialisation is deterministic per seed") {
  const ArchConfig a = ArchConfig::desk();
  Network x = build_tempconet(a, 4, 77), y = build_tempconet(a, 4, 77), z = build_tempconet(a, 4, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < x.parameters().size(); ++i) {
    CHECK(x.parameters()[i]->value == y.parameters()[i]->value);
    any_diff = any_diff || !(x.parameters()[i]->value == z.parameters()[i]->value);
  }
  CHECK(any_diff);
  for (const auto& p : x.parameters()) {
    const bool bias = p->name.find("bias") != std::string::npos || p->name.rfind("gru.b_", 0) == 0;
    CHECK(p->regularize == !bias);
  }
}

TEST_CASE("clone has fresh storage and keeps aliasing") {
  Network net = build_tcl_net(ArchConfig::desk(), 1);
  Network copy = net.clone();
  CHECK(copy.chain_parameter(0, "fc6.weights").get() != net.chain_parameter(0, "fc6.weights").get());
  CHECK(copy.chain_parameter(0, "fc6.weights").get() == copy.chain_parameter(1, "fc6.weights").get());
  CHECK(copy.parameter("fc6.weights").value == net.parameter("fc6.weights").value);
}

TEST_CASE("transfer copies the chain and scales its learning rate") {
  const ArchConfig a = ArchConfig::desk();
  Network src = build_tcl_net(a, 100);
  const Checkpoint ckpt = make_checkpoint(src);
  Network dst = build_tempconet(a, 7, 200);
  const Tensor cls_before = dst.parameter("cls.weights").value;
  const Tensor gru_before = dst.parameter("gru.u_cand").value;
  transfer_pretrained(ckpt, dst);

  const Tensor x = random_frames(2, a, 12);
  CHECK(fc6_of(dst, x) == fc6_of(src, x));
  CHECK(dst.parameter("cls.weights").value == cls_before);
  CHECK(dst.parameter("gru.u_cand").value == gru_before);

  std::set<std::string> scaled, expected;
  for (const auto& p : dst.parameters()) {
    if (p->lr_multiplier == 0.1) scaled.insert(p->name);
    if (p->lr_multiplier != 0.1) CHECK(p->lr_multiplier == 1.0);
  }
  for (const std::string& l : chain_layers()) {
    expected.insert(l + (l == "fc6" ? ".weights" : ".kernel"));
    expected.insert(l + ".bias");
  }
  CHECK(scaled == expected);
}

TEST_CASE("transfer from a different chain names the first mismatching layer") {
  ArchConfig a = ArchConfig::desk();
  ArchConfig b = a;
  b.conv_specs[2].out_channels = 512;
  Network dst = build_naive_lwfnet(a, 4);
  try {
    transfer_pretrained(make_checkpoint(build_tcl_net(b)), dst);
    FAIL("expected an exception");
  } catch (const IncompatibleCheckpointError& e) {
    CHECK(e.layer() == "conv3");
  }
  ArchConfig c = a;
  c.fc6_units = 512;
  CHECK_THROWS_AS(transfer_pretrained(make_checkpoint(build_tcl_net(c)), dst), IncompatibleCheckpointError);
}

TEST_CASE("checkpoint roundtrip is bitwise and the size is exact") {
  const ArchConfig a = ArchConfig::desk();
  Network net = build_tempconet(a, 6, 31);
  net.parameter("fc6.weights").lr_multiplier = 0.1;
  std::vector<Tensor> vel;
  Rng rng(1);
  for (const auto& p : net.parameters()) {
    Tensor v(p->value.shape());
    for (float& e : v.data()) e = static_cast<float>(rng.normal());
    vel.push_back(v);
  }
  const Checkpoint ckpt = make_checkpoint(net, 12, 7.5e-4, vel);
  const fs::path path = temp_path("roundtrip.ckpt");
  save_checkpoint(ckpt, path);

  std::size_t expected = 4 + 1 + 4 + ckpt.fingerprint().size() + 8 + 8 + 4 + 4;
  for (const auto& p : net.parameters()) {
    expected += 4 + p->name.size() + 4 + 4 * p->value.rank() + 4 * p->value.size();
    expected += 4 * p->value.size();  // velocity
  }
  CHECK(fs::file_size(path) == expected);
  CHECK(checkpoint_size(ckpt) == expected);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.epoch == 12);
  CHECK(back.lr == 7.5e-4);
  CHECK(back.arch == a);
  CHECK(back.kind == NetKind::kTempCoNet);
  CHECK(back.n_phases == 6);
  REQUIRE(back.parameters.size() == net.parameters().size());
  for (std::size_t i = 0; i < back.parameters.size(); ++i) {
    CHECK(back.parameters[i].first == net.parameters()[i]->name);
    CHECK(back.parameters[i].second == net.parameters()[i]->value);
    CHECK(back.velocities[i] == vel[i]);
  }
  Network rebuilt = network_from_checkpoint(back);
  for (std::size_t i = 0; i < rebuilt.parameters().size(); ++i) {
    CHECK(rebuilt.parameters()[i]->value == net.parameters()[i]->value);
    CHECK(rebuilt.parameters()[i]->lr_multiplier == net.parameters()[i]->lr_multiplier);
  }
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const Checkpoint ckpt = make_checkpoint(build_naive_lwfnet(ArchConfig::desk(), 3, 1));
  const fs::path path = temp_path("corrupt.ckpt");
  save_checkpoint(ckpt, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };

  std::string bad_version = bytes;
  bad_version[4] = 2;
  write(bad_version);
  CHECK_THROWS_AS(load_checkpoint(path), UnreadableCheckpointError);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  CHECK_THROWS_AS(load_checkpoint(path), UnreadableCheckpointError);

  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointIntegrityError);

  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointIntegrityError);

  write(bytes);
  CHECK_NOTHROW(load_checkpoint(path));
  fs::remove(path);
}

TEST_CASE("loading into a different network names the layer") {
  Network net = build_naive_lwfnet(ArchConfig::desk(), 3);
  Network other = build_naive_lwfnet(ArchConfig::desk(), 4);
  try {
    load_parameters(net, make_checkpoint(other));
    FAIL("expected an exception");
  } catch (const IncompatibleCheckpointError& e) {
    CHECK(e.layer() == "cls");
  }
  CHECK_THROWS_AS(load_parameters(net, make_checkpoint(build_tcl_net(ArchConfig::desk()))),
                  IncompatibleCheckpointError);
}

TEST_CASE("whole-network gradients match finite differences") {
  const auto results = gradcheck::check_networks();
  REQUIRE(results.size() == 3);
  for (const auto& r : results) {
    INFO(r.name << " max rel error " << r.max_relative_error << " over " << r.coordinates);
    CHECK(r.passed);
    CHECK(r.coordinates > 1000);
  }
}
