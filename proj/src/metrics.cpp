#include "evln/metrics.hpp"

#include <algorithm>
#include <string>

#include "evln/errors.hpp"

namespace evln {

AccuracyMatrix::AccuracyMatrix(std::size_t steps) : rows_(steps) {}

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
  if (i >= rows_.size() || j >= rows_[i].size()) {
    throw DimensionError("accuracy matrix entry (" + std::to_string(i) + ", " +
                         std::to_string(j) + ") is undefined");
  }
  return rows_[i][j];
}

void AccuracyMatrix::set_row(std::size_t i, std::vector<double> values) {
  if (i >= rows_.size() || values.size() != i + 1) {
    throw DimensionError("accuracy row " + std::to_string(i) + " needs " +
                         std::to_string(i + 1) + " entries");
  }
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("accuracy " + std::to_string(v) + " outside [0, 1]");
    }
  }
  rows_[i] = std::move(values);
}

bool AccuracyMatrix::complete() const {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].size() != i + 1) return false;
  }
  return true;
}

AccuracyMatrix AccuracyMatrix::prefix(std::size_t k) const {
  AccuracyMatrix out(std::min(k, rows_.size()));
  for (std::size_t i = 0; i < out.rows_.size(); ++i) out.rows_[i] = rows_[i];
  return out;
}

double acc(const AccuracyMatrix& a) {
  if (a.steps() == 0) throw DimensionError("acc of an empty accuracy matrix");
  const auto& last = a.row(a.steps() - 1);
  double total = 0.0;
  for (double v : last) total += v;
  return total / static_cast<double>(last.size());
}

double fgt(const AccuracyMatrix& a) {
  const std::size_t t = a.steps();
  if (t < 2) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 1; i < t; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      total += std::max(0.0, a.at(j, j) - a.at(i, j));
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace evln
