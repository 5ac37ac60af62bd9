#pragma once

#include <cstddef>
#include <vector>

namespace evln {

/// Lower-triangular accuracy grid: at(i, j) is the accuracy on task j's test
/// split after finishing training step i, defined for j <= i (0-based).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t steps);

  std::size_t steps() const { return rows_.size(); }
  double at(std::size_t i, std::size_t j) const;
  const std::vector<double>& row(std::size_t i) const { return rows_.at(i); }
  // Row i must hold exactly i + 1 values in [0, 1].
  void set_row(std::size_t i, std::vector<double> values);
  bool complete() const;

  // Leading (k x k) block.
  AccuracyMatrix prefix(std::size_t k) const;

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::vector<std::vector<double>> rows_;
};

/// Mean final-row accuracy over all tasks.
double acc(const AccuracyMatrix& a);

/// Average clamped decay from each task's just-trained accuracy:
///   mean over 1 <= i < T, 0 <= j < i of max(0, a[j][j] - a[i][j]).
/// 0 for a single step.
double fgt(const AccuracyMatrix& a);

}  // namespace evln
