#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace evln {

struct GradCheckEntry {
  std::string name;
  double max_rel_error;
};

/// Finite-difference check of every differentiable op, layer and loss, and
/// of the complete training objective of a two-task model with replayed
/// dropout masks and logit noise.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace evln
