#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "evln/errors.hpp"
#include "evln/nn.hpp"
#include "oracles.hpp"

using namespace evln;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 8;
  c.widths = {4, 6, 8};
  c.dropout_rate = 0.3;
  return c;
}

}  // namespace

TEST_CASE("fan-in initialisation bounds") {
  Rng rng(1);
  DenseLayer d(25, 7);
  d.init(rng);
  const double a = std::sqrt(1.0 / 25.0);
  for (double v : d.weight.data()) CHECK(std::abs(v) <= a);
  for (double v : d.bias.data()) CHECK(std::abs(v) <= a);
  IncrementalModel m(small_config(), 2, rng);
  for (const auto& [name, p] : m.parameters()) {
    if (name.ends_with("gamma")) CHECK(p[0] == 0.0);
  }
  const double conv_bound = std::sqrt(1.0 / 9.0);
  for (double v : m.blocks[0].weight.data()) CHECK(std::abs(v) <= conv_bound);
}

TEST_CASE("dense layer shapes and a zero-output head") {
  Rng rng(2);
  DenseLayer d(4, 3);
  d.init(rng);
  CHECK(d.forward(Tensor::zeros({5, 4})).shape() == Shape{5, 3});
  DenseLayer empty(4, 0);
  CHECK(empty.forward(Tensor::zeros({5, 4})).shape() == Shape{5, 0});
  CHECK_THROWS_AS(d.forward(Tensor::zeros({5, 3})), DimensionError);
}

TEST_CASE("dropout modes") {
  Rng rng(3);
  Tensor x = Tensor::full({1000}, 1.0);
  DropoutLayer drop(0.25);
  CHECK(vec(drop.forward(x, DropoutMode::off, rng)) == vec(x));
  Tensor y = drop.forward(x, DropoutMode::train, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.0 / 0.75));
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
  DropoutLayer none(0.0);
  CHECK(vec(none.forward(x, DropoutMode::train, rng)) == vec(x));
  CHECK_THROWS_AS(DropoutLayer(1.0), ParameterError);
  CHECK_THROWS_AS(DropoutLayer(-0.1), ParameterError);
}

TEST_CASE("attention stage matches a scalar-loop oracle") {
  Rng rng(4);
  for (std::size_t trial = 0; trial < 5; ++trial) {
    SelfAttentionStage s(5, 2, 3);
    s.init(rng);
    s.gamma.mutable_data()[0] = rng.uniform() * 2 - 1;
    Tensor x = uniform(rng, {2, 5, 3, 4}, -1, 1);
    const auto r = s.forward(x);
    const auto ref = oracle::attention(s, x);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(r.output[i] - ref[i]) < 1e-12);
    CHECK(r.weights.shape() == Shape{2, 12, 12});
    for (std::size_t row = 0; row < 24; ++row) {
      double z = 0;
      for (std::size_t j = 0; j < 12; ++j) z += r.weights[row * 12 + j];
      CHECK(std::abs(z - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("attention with zero gain is the identity") {
  Rng rng(5);
  SelfAttentionStage s(4, 2, 2);
  s.init(rng);
  Tensor x = uniform(rng, {3, 4, 2, 2}, -1, 1);
  CHECK(vec(s.forward(x).output) == vec(x));
  CHECK(vec(attention_map(s, x)) == vec(s.forward(x).attended));
}

TEST_CASE("variance head is strictly positive") {
  Rng rng(6);
  VarianceHead h(3, 4);
  h.linear.init(rng);
  Tensor big = uniform(rng, {10, 3}, -200, 200);
  const Tensor var = h.forward(big);
  for (double v : var.data()) CHECK(v > 0.0);
}

TEST_CASE("model with zero attention gain equals the plain conv stack") {
  Rng rng(7);
  IncrementalModel m(small_config(), 3, rng);
  Tensor x = uniform(rng, {2, 1, 8, 8}, -1, 1);
  const ForwardOutput f = m.forward(x);

  Tensor h = x;
  for (const ConvBlock& b : m.blocks) {
    h = add(conv2d(h, b.weight, 1, 1), reshape(b.bias, {1, b.bias.numel(), 1, 1}));
    h = avg_pool2d(relu(h), 2);
  }
  Tensor feat = mean(reshape(h, {2, 8, 1}), 2);
  Tensor logits = add(matmul(feat, transpose(m.head_c.weight)), m.head_c.bias);
  CHECK(max_abs_diff(f.logits_c, logits) < 1e-12);
  CHECK(f.logits_p.shape() == Shape{2, 0});
  CHECK(f.unified_logits().shape() == Shape{2, 3});
  CHECK(f.attn[0].shape() == Shape{2, 4, 8, 8});
  CHECK(f.attn[2].shape() == Shape{2, 8, 2, 2});
}

TEST_CASE("head expansion keeps earlier outputs") {
  Rng rng(8);
  IncrementalModel m(small_config(), 2, rng);
  Tensor x = uniform(rng, {3, 1, 8, 8}, -1, 1);
  const ForwardOutput before = m.forward(x);
  IncrementalModel grown = m.expand_heads(3, rng);
  const ForwardOutput after = grown.forward(x);
  CHECK(grown.prev_classes() == 2);
  CHECK(grown.new_classes() == 3);
  CHECK(vec(after.logits_p) == vec(before.logits_c));
  CHECK(vec(after.var_p) == vec(before.var_c));
  CHECK(after.logits_c.shape() == Shape{3, 3});
  // The source model is untouched.
  CHECK(vec(m.forward(x).logits_c) == vec(before.logits_c));
  CHECK_THROWS_AS(m.expand_heads(0, rng), ParameterError);
}

TEST_CASE("snapshot is isolated from later updates") {
  Rng rng(9);
  IncrementalModel m(small_config(), 2, rng);
  Tensor x = uniform(rng, {2, 1, 8, 8}, -1, 1);
  ModelSnapshot snap = snapshot(m);
  const auto before = vec(snap.forward(x).logits_c);
  for (auto& [name, p] : m.parameters())
    for (double& v : p.mutable_data()) v += 0.5;
  CHECK(vec(snap.forward(x).logits_c) == before);
  CHECK(vec(m.forward(x).logits_c) != before);

  active_tape().reset();
  m.set_requires_grad(true);
  snap.forward(x);
  CHECK(active_tape().size() == 0);
  for (const auto& [name, p] : snap.model().parameters()) CHECK_FALSE(p.requires_grad());
  m.set_requires_grad(false);
}

TEST_CASE("clone and load_parameters round trip") {
  Rng rng(10);
  IncrementalModel a(small_config(), 2, rng);
  IncrementalModel b(small_config(), 2, rng);
  Tensor x = uniform(rng, {2, 1, 8, 8}, -1, 1);
  CHECK(vec(a.forward(x).logits_c) != vec(b.forward(x).logits_c));
  b.load_parameters(a.parameters());
  CHECK(vec(a.forward(x).logits_c) == vec(b.forward(x).logits_c));
  IncrementalModel c = a.clone();
  a.parameters()[0].second.mutable_data()[0] += 1.0;
  CHECK(vec(c.forward(x).logits_c) == vec(b.forward(x).logits_c));
  NamedTensors bad = a.parameters();
  bad.pop_back();
  CHECK_THROWS(b.load_parameters(bad));
}

TEST_CASE("parameter names are stable and unique") {
  Rng rng(11);
  IncrementalModel m(small_config(), 2, rng);
  const auto params = m.parameters();
  std::vector<std::string> names;
  for (const auto& [n, p] : params) names.push_back(n);
  auto sorted = names;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  IncrementalModel other(small_config(), 2, rng);
  std::vector<std::string> names2;
  for (const auto& [n, p] : other.parameters()) names2.push_back(n);
  CHECK(names == names2);
}

TEST_CASE("mc dropout forward differs between passes, off mode does not") {
  Rng rng(12);
  IncrementalModel m(small_config(), 2, rng);
  Tensor x = uniform(rng, {2, 1, 8, 8}, -1, 1);
  Rng d(1);
  const auto a = vec(m.forward(x, DropoutMode::mc_eval, d).logits_c);
  const auto b = vec(m.forward(x, DropoutMode::mc_eval, d).logits_c);
  CHECK(a != b);
  CHECK(vec(m.forward(x, DropoutMode::off, d).logits_c) == vec(m.forward(x).logits_c));
}
