#include <doctest.h>

#include <cmath>

#include "evln/errors.hpp"
#include "evln/metrics.hpp"
#include "evln/rng.hpp"

using namespace evln;

namespace {

AccuracyMatrix make(const std::vector<std::vector<double>>& rows) {
  AccuracyMatrix a(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) a.set_row(i, rows[i]);
  return a;
}

// Direct transcription of the forgetting definition, used as the oracle.
double fgt_oracle(const AccuracyMatrix& a) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 1; i < a.steps(); ++i)
    for (std::size_t j = 0; j < i; ++j, ++n) total += std::max(0.0, a.at(j, j) - a.at(i, j));
  return n ? total / n : 0.0;
}

}  // namespace

TEST_CASE("accuracy examples") {
  CHECK(acc(make({{0.9}})) == doctest::Approx(0.9));
  CHECK(acc(make({{0.9}, {0.6, 0.8}})) == doctest::Approx(0.7));
  CHECK(acc(make({{0.4}, {0.4, 0.4}, {0.4, 0.4, 0.4}})) == doctest::Approx(0.4));
  CHECK_THROWS_AS(acc(AccuracyMatrix{}), DimensionError);
}

TEST_CASE("forgetting examples") {
  CHECK(fgt(make({{0.9}})) == 0.0);
  CHECK(fgt(make({{0.9}, {0.7, 0.8}})) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(fgt(make({{0.5}, {0.5, 0.5}, {0.5, 0.5, 0.5}})) == 0.0);
}

TEST_CASE("forgetting is zero for non-decreasing columns") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng.index(8);
    std::vector<std::vector<double>> rows(t);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        const double base = i == j ? 0.5 * rng.uniform() : rows[i - 1][j];
        rows[i].push_back(std::min(1.0, base + 0.1 * rng.uniform()));
      }
    }
    CHECK(fgt(make(rows)) == 0.0);
  }
}

TEST_CASE("forgetting matches its definition on random matrices") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng.index(8);
    AccuracyMatrix a(t);
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> row(i + 1);
      for (double& v : row) v = rng.uniform();
      a.set_row(i, row);
    }
    CHECK(std::abs(fgt(a) - fgt_oracle(a)) < 1e-15);
    CHECK(fgt(a) >= 0.0);
    CHECK(fgt(a) <= 1.0);
  }
}

TEST_CASE("accuracy matrix contract") {
  AccuracyMatrix a(3);
  CHECK_FALSE(a.complete());
  CHECK_THROWS_AS(a.set_row(1, {0.5}), DimensionError);
  CHECK_THROWS_AS(a.set_row(0, {1.5}), DataError);
  a.set_row(0, {0.5});
  a.set_row(1, {0.4, 0.6});
  a.set_row(2, {0.3, 0.5, 0.7});
  CHECK(a.complete());
  CHECK(a.prefix(2) == make({{0.5}, {0.4, 0.6}}));
  CHECK_THROWS_AS(a.at(0, 1), DimensionError);
}
