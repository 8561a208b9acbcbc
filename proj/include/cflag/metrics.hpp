#pragma once

#include <cmath>
#include <vector>

#include "common.hpp"

namespace cflag {

/// a[i][j]: accuracy of task j's held-out split after training task i,
/// defined for j <= i. Undefined cells stay NaN and are never read by the
/// metric formulas.
struct AccuracyMatrix {
  int size = 0;
  std::vector<double> cells;

  AccuracyMatrix() = default;
  explicit AccuracyMatrix(int s) : size(s), cells(static_cast<std::size_t>(s) * s, NAN) {}

  double at(int i, int j) const { return cells[static_cast<std::size_t>(i) * size + j]; }
  double& at(int i, int j) { return cells[static_cast<std::size_t>(i) * size + j]; }
};

// Mean accuracy over all tasks after the final task.
inline double avg_accuracy(const AccuracyMatrix& m, int s) {
  if (s < 1 || m.size < s) throw ConfigError("accuracy matrix smaller than requested task count");
  double sum = 0.0;
  for (int j = 0; j < s; ++j) {
    double v = m.at(s - 1, j);
    if (std::isnan(v)) throw ConfigError("final accuracy row is not fully populated");
    sum += v;
  }
  return sum / s;
}

// Mean drop from each task's just-trained accuracy to its accuracy after the
// final task; negative values (backward transfer) are allowed.
inline double forgetting(const AccuracyMatrix& m, int s) {
  if (s < 2) throw ConfigError("forgetting requires at least two tasks");
  if (m.size < s) throw ConfigError("accuracy matrix smaller than requested task count");
  double sum = 0.0;
  for (int i = 0; i < s - 1; ++i) {
    double diag = m.at(i, i);
    double last = m.at(s - 1, i);
    if (std::isnan(diag) || std::isnan(last))
      throw ConfigError("accuracy matrix diagonal or final row is not populated");
    sum += diag - last;
  }
  return sum / (s - 1);
}

}  // namespace cflag
