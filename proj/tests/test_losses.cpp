#include <doctest.h>

#include <cmath>

#include "evln/errors.hpp"
#include "evln/losses.hpp"
#include "oracles.hpp"

using namespace evln;

using oracle::close;
using LD = oracle::LD;

TEST_CASE("distillation of a model against itself is the tempered entropy") {
  Rng rng(1);
  for (double tau : {0.5, 1.0, 2.0, 4.0}) {
    Tensor s = uniform(rng, {4, 6}, -3, 3);
    LD entropy = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (LD p : oracle::softmax(s, n, tau)) entropy -= p * std::log(p);
    CHECK(close(distillation_loss(s, s, tau).item(), entropy / 4, 1e-12));
  }
}

TEST_CASE("distillation with a one-hot teacher reduces to tempered cross-entropy") {
  Tensor s = Tensor::from({{0.3, -1.2, 2.0}});
  Tensor t = Tensor::from({{0.0, 500.0, 0.0}});
  const double tau = 2.0;
  const LD want = -std::log(oracle::softmax(s, 0, tau)[1]);
  CHECK(close(distillation_loss(s, t, tau).item(), want, 1e-12));
}

TEST_CASE("distillation edge cases") {
  CHECK(distillation_loss(Tensor::zeros({3, 0}), Tensor::zeros({3, 0}), 2.0).item() == 0.0);
  CHECK_THROWS_AS(distillation_loss(Tensor::zeros({3, 2}), Tensor::zeros({3, 3}), 2.0),
                  DimensionError);
  CHECK_THROWS_AS(distillation_loss(Tensor::zeros({3, 2}), Tensor::zeros({3, 2}), 0.0),
                  ParameterError);
}

TEST_CASE("distillation leaves the teacher without gradient") {
  Tensor s = Tensor::from({{1.0, 2.0}}).set_requires_grad(true);
  Tensor t = Tensor::from({{0.5, -0.5}}).set_requires_grad(true);
  backward(distillation_loss(s, t, 2.0));
  CHECK(s.has_grad());
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("cross-entropy known values") {
  CHECK(close(cross_entropy(Tensor::from({{0.0, 0.0}}), std::vector<std::size_t>{1}).item(),
              std::log(2.0L), 1e-15));
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 3}), std::vector<std::size_t>{0, 3}),
                  DataError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 3}), std::vector<std::size_t>{0}),
                  DimensionError);
}

TEST_CASE("aleatoric loss with vanishing variance equals cross-entropy") {
  Rng rng(2);
  Tensor s = uniform(rng, {5, 4}, -2, 2);
  const std::vector<std::size_t> y{0, 3, 1, 1, 2};
  const double ce = cross_entropy(s, y).item();
  // The literal form keeps -log of each example's loss.
  double neg_log_ce = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    neg_log_ce -= std::log(-std::log(oracle::softmax(s, i, 1)[y[i]])) / 5;
  }
  for (AleatoricForm form : {AleatoricForm::likelihood, AleatoricForm::literal}) {
    Rng noise(3);
    const double l = aleatoric_loss(s, Tensor::full({5, 4}, 1e-30), std::span(y), 10, noise, form)
                         .item();
    CHECK(std::abs(l - (form == AleatoricForm::likelihood ? ce : neg_log_ce)) < 1e-9);
  }
}

TEST_CASE("aleatoric loss rejects non-positive variance and bad parameters") {
  Rng rng(4);
  const std::vector<std::size_t> y{0};
  CHECK_THROWS_AS(aleatoric_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), std::span(y), 3, rng),
                  DomainError);
  CHECK_THROWS_AS(aleatoric_loss(Tensor::zeros({1, 2}), Tensor::full({1, 2}, 1.0), std::span(y), 0, rng),
                  ParameterError);
  CHECK_THROWS_AS(aleatoric_loss(Tensor::zeros({1, 2}), Tensor::full({1, 3}, 1.0), std::span(y), 3, rng),
                  DimensionError);
}

TEST_CASE("aleatoric loss is reproducible from a copied stream") {
  Rng rng(5);
  Tensor s = uniform(rng, {3, 3}, -1, 1), v = uniform(rng, {3, 3}, 0.2, 1.0);
  const std::vector<std::size_t> y{2, 0, 1};
  Rng a(9), b(9);
  CHECK(aleatoric_loss(s, v, std::span(y), 10, a).item() ==
        aleatoric_loss(s, v, std::span(y), 10, b).item());
  CHECK(a == b);
}

TEST_CASE("uncertainty distillation known values") {
  CHECK(uncertainty_distillation(Tensor::from({{1, 2}}), Tensor::from({{1, 1}})).item() == 1.0);
  CHECK(uncertainty_distillation(Tensor::from({{1, 2}, {3, 4}}), Tensor::from({{1, 2}, {3, 4}}))
            .item() == 0.0);
  CHECK(uncertainty_distillation(Tensor::zeros({2, 0}), Tensor::zeros({2, 0})).item() == 0.0);
}

TEST_CASE("attention distillation known values") {
  std::array<Tensor, 3> a{Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {2, 0})};
  std::array<Tensor, 3> b{Tensor({1, 2}, {0, 1}), Tensor({1, 2}, {3, 0}), Tensor({1, 2}, {5, 0})};
  // Orthogonal unit maps differ by sqrt(2); parallel maps of any scale match.
  CHECK(std::abs(attention_distillation(a, b).item() - 2.0) < 1e-15);
  CHECK(attention_distillation(a, a).item() == 0.0);
  std::array<Tensor, 3> z{Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), Tensor::zeros({1, 2})};
  CHECK(attention_distillation(z, z).item() == 0.0);
  CHECK(std::isfinite(attention_distillation(z, a).item()));
}

TEST_CASE("total loss combination") {
  LossBreakdown p;
  p.l_m = 2;
  p.l_a = 4;
  p.l_ale = 6;
  p.l_c = 1;
  p.l_d = 3;
  CHECK(total_loss(p, LossConfig(2.0, 0.5)).total == 10.0);
  CHECK(total_loss(p, LossConfig(2.0, 0.0)).total == 4.0);
  for (double lam : {0.1, 0.7, 1.3, 2.0}) {
    const double t = total_loss(p, LossConfig(2.0, lam)).total;
    CHECK(std::abs(t - (4.0 + 12.0 * lam)) < 1e-12);
  }
  p.l_a = std::nan("");
  try {
    total_loss(p, LossConfig());
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("component l_a =") != std::string::npos);
  }
  CHECK_THROWS_AS(LossConfig(0.0), ParameterError);
  CHECK_THROWS_AS(LossConfig(1.0, -1.0), ParameterError);
}

TEST_CASE("loss terms agree with extended-precision oracles on random instances") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(6), c = 2 + rng.index(6);
    Tensor s = uniform(rng, {n, c}, -4, 4), t = uniform(rng, {n, c}, -4, 4);
    Tensor v = uniform(rng, {n, c}, 0.05, 2.0), w = uniform(rng, {n, c}, 0.05, 2.0);
    std::vector<std::size_t> y(n);
    for (auto& l : y) l = rng.index(c);
    const double tau = 0.5 + 3 * rng.uniform();

    CHECK(close(distillation_loss(s, t, tau).item(), oracle::distillation(s, t, tau), 1e-12));
    CHECK(close(cross_entropy(s, y).item(), oracle::cross_entropy(s, y), 1e-12));
    CHECK(close(uncertainty_distillation(v, w).item(), oracle::squared_distance(v, w), 1e-12));
    for (AleatoricForm form : {AleatoricForm::likelihood, AleatoricForm::literal}) {
      const Rng noise = rng.derive(trial);
      Rng r = noise;
      const double got = aleatoric_loss(s, v, std::span(y), 7, r, form).item();
      CHECK(close(got, oracle::aleatoric(s, v, y, 7, noise, form), 1e-12));
    }
    std::array<Tensor, 3> ta, sa;
    LD want = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t side = std::size_t{4} >> k;
      ta[k] = uniform(rng, {n, 3, side, side}, -1, 1);
      sa[k] = uniform(rng, {n, 3, side, side}, -1, 1);
      want += oracle::normalized_distance(ta[k], sa[k]);
    }
    CHECK(close(attention_distillation(ta, sa).item(), want, 1e-12));
  }
}

TEST_CASE("per-sample normalisation gives unit rows") {
  Rng rng(7);
  Tensor x = uniform(rng, {3, 2, 2, 2}, -5, 5);
  Tensor y = normalize_per_sample(x);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 8; ++j) s += y[i * 8 + j] * y[i * 8 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  const Tensor zero = normalize_per_sample(Tensor::zeros({2, 3}));
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("old-class aleatoric term is absent without old classes") {
  Rng rng(8);
  ForwardOutput f;
  f.logits_c = uniform(rng, {2, 3}, -1, 1);
  f.var_c = uniform(rng, {2, 3}, 0.1, 1);
  f.logits_p = Tensor::zeros({2, 0});
  f.var_p = Tensor::zeros({2, 0});
  const std::vector<std::size_t> y{0, 2};
  Rng a(1);
  const AleatoricParts parts = l_ale(f, Tensor::zeros({2, 0}), y, LossConfig(), a);
  CHECK(parts.l_pa.item() == 0.0);
  CHECK(parts.l_ale.item() == parts.l_ca.item());
}
