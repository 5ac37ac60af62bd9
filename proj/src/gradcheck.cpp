#include "evln/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "evln/errors.hpp"

namespace evln {

namespace {

double evaluate(const ScalarFn& f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.numel() != 1) {
    throw ContractError("grad_check needs a scalar function, got shape " +
                        shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

double grad_check(const ScalarFn& f, std::span<Tensor> inputs,
                  const GradCheckOptions& opts) {
  std::vector<bool> previous;
  for (Tensor& t : inputs) {
    previous.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }

  active_tape().reset();
  Tensor y = f();
  if (y.numel() != 1) {
    active_tape().reset();
    throw ContractError("grad_check needs a scalar function, got shape " +
                        shape_str(y.shape()));
  }
  backward(y);

  Rng pick(opts.coord_seed);
  double worst = 0.0;
  for (Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor && coords.size() > *opts.max_coords_per_tensor) {
      shuffle(std::span<std::size_t>(coords), pick);
      coords.resize(*opts.max_coords_per_tensor);
    }

    auto data = t.mutable_data();
    for (std::size_t i : coords) {
      const double saved = data[i];
      data[i] = saved + opts.eps;
      const double up = evaluate(f);
      data[i] = saved - opts.eps;
      const double down = evaluate(f);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].clear_grad();
    inputs[k].set_requires_grad(previous[k]);
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double eps) {
  Tensor inputs[] = {x};
  return grad_check([&] { return f(x); }, std::span<Tensor>(inputs),
                    GradCheckOptions{eps, std::nullopt, 0});
}

}  // namespace evln
