#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>

#include "evln/tensor.hpp"

namespace evln {

using ScalarFn = std::function<Tensor()>;

struct GradCheckOptions {
  double eps = 1e-5;
  // When set, at most this many coordinates per tensor are probed (chosen
  // with a seeded Rng); otherwise every coordinate is.
  std::optional<std::size_t> max_coords_per_tensor;
  std::uint64_t coord_seed = 0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Returns the maximum over probed coordinates of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// f is re-evaluated from scratch for every perturbation, so anything random
/// inside it must be replayed from a fixed seed. Throws ContractError when
/// f does not return exactly one value.
double grad_check(const ScalarFn& f, std::span<Tensor> inputs,
                  const GradCheckOptions& opts = {});

// Single-input form: f receives x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double eps = 1e-5);

}  // namespace evln
