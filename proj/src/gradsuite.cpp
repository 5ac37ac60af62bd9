#include "evln/gradsuite.hpp"

#include <cmath>

#include "evln/engine.hpp"
#include "evln/gradcheck.hpp"
#include "evln/losses.hpp"
#include "evln/nn.hpp"

namespace evln {

namespace {

// Uniform draws pushed at least `gap` away from zero, keeping kinks and
// singularities out of the finite-difference stencil.
Tensor away_from_zero(Rng& rng, const Shape& shape, double gap = 0.1) {
  Tensor t = uniform(rng, shape, -1.0, 1.0);
  for (double& v : t.mutable_data()) v += v < 0 ? -gap : gap;
  return t;
}

Tensor positive(Rng& rng, const Shape& shape) { return uniform(rng, shape, 0.3, 2.0); }

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckEntry> out;
  auto check = [&](std::string name, std::vector<Tensor> inputs, const ScalarFn& f,
                   GradCheckOptions opts = {}) {
    opts.coord_seed = seed;
    out.push_back({std::move(name), grad_check(f, std::span<Tensor>(inputs), opts)});
  };
  // Fixed weights so a non-scalar op becomes a scalar with non-trivial
  // upstream gradient.
  auto weighted = [](const Tensor& y, const Tensor& w) {
    return sum(mul(y, reshape(w, y.shape())));
  };

  {
    Tensor a = away_from_zero(rng, {3, 4}), b = away_from_zero(rng, {3, 4});
    Tensor c = away_from_zero(rng, {1, 4}), w = uniform(rng, {3, 4}, -1, 1);
    check("add", {a, c}, [&] { return weighted(add(a, c), w); });
    check("sub", {a, b}, [&] { return weighted(sub(a, b), w); });
    check("mul", {a, c}, [&] { return weighted(mul(a, c), w); });
    check("div", {a, b}, [&] { return weighted(div(a, b), w); });
    check("neg", {a}, [&] { return weighted(neg(a), w); });
    check("scale", {a}, [&] { return weighted(scale(a, -1.7), w); });
    check("add_scalar", {a}, [&] { return weighted(add_scalar(a, 0.3), w); });
    check("relu", {a}, [&] { return weighted(relu(a), w); });
    check("exp", {a}, [&] { return weighted(exp(a), w); });
    check("square", {a}, [&] { return weighted(square(a), w); });
    check("softplus", {a}, [&] { return weighted(softplus(scale(a, 4.0)), w); });
    check("clamp_min", {a}, [&] { return weighted(clamp_min(a, 0.05), w); });
    Tensor p = positive(rng, {3, 4});
    check("log", {p}, [&] { return weighted(log(p), w); });
    check("sqrt", {p}, [&] { return weighted(sqrt(p), w); });
  }
  {
    Tensor x = uniform(rng, {2, 3, 4}, -1, 1);
    Tensor w2 = uniform(rng, {2, 4}, -1, 1), w3 = uniform(rng, {2, 3, 1}, -1, 1);
    check("sum", {x}, [&] { return sum(square(x)); });
    check("mean", {x}, [&] { return mean(square(x)); });
    check("sum_axis", {x}, [&] { return weighted(sum(x, 1), w2); });
    check("mean_axis", {x}, [&] { return weighted(mean(x, 2, true), w3); });
    check("logsumexp", {x}, [&] { return weighted(logsumexp(x, 1), w2); });
    Tensor r = uniform(rng, {4, 6}, -1, 1);
    check("reshape", {x}, [&] { return weighted(reshape(x, {4, 6}), r); });
  }
  {
    Tensor a = uniform(rng, {2, 3}, -1, 1), b = uniform(rng, {4, 3}, -1, 1);
    Tensor w = uniform(rng, {6, 3}, -1, 1);
    check("concat", {a, b}, [&] { return weighted(concat(a, b, 0), w); });
    const std::vector<std::size_t> rows{3, 0, 3, 1};
    Tensor w4 = uniform(rng, {4, 3}, -1, 1);
    check("take_rows", {b}, [&] { return weighted(take_rows(b, rows), w4); });
  }
  {
    Tensor a = uniform(rng, {3, 4}, -1, 1), b = uniform(rng, {4, 5}, -1, 1);
    Tensor w = uniform(rng, {3, 5}, -1, 1), wt = uniform(rng, {4, 3}, -1, 1);
    check("matmul", {a, b}, [&] { return weighted(matmul(a, b), w); });
    check("transpose", {a}, [&] { return weighted(transpose(a), wt); });
    Tensor x = uniform(rng, {2, 3, 4}, -1, 1), y = uniform(rng, {2, 4, 2}, -1, 1);
    Tensor y1 = uniform(rng, {1, 4, 2}, -1, 1);
    Tensor wb = uniform(rng, {2, 3, 2}, -1, 1), wl = uniform(rng, {2, 4, 3}, -1, 1);
    check("bmm", {x, y}, [&] { return weighted(bmm(x, y), wb); });
    check("bmm_broadcast", {x, y1}, [&] { return weighted(bmm(x, y1), wb); });
    check("transpose_last2", {x}, [&] { return weighted(transpose_last2(x), wl); });
  }
  {
    Tensor q = uniform(rng, {3, 5}, -2, 2), w = uniform(rng, {3, 5}, -1, 1);
    check("softmax_temperature", {q}, [&] { return weighted(softmax_temperature(q, 2.0), w); });
    check("log_softmax", {q}, [&] { return weighted(log_softmax(q, 1.5), w); });
  }
  {
    Tensor x = uniform(rng, {2, 2, 5, 5}, -1, 1), k = uniform(rng, {3, 2, 3, 3}, -1, 1);
    Tensor w = uniform(rng, {2, 3, 5, 5}, -1, 1), ws = uniform(rng, {2, 3, 3, 3}, -1, 1);
    check("conv2d", {x, k}, [&] { return weighted(conv2d(x, k, 1, 1), w); });
    check("conv2d_stride2", {x, k}, [&] { return weighted(conv2d(x, k, 2, 1), ws); });
    Tensor y = uniform(rng, {2, 3, 4, 4}, -1, 1), wp = uniform(rng, {2, 3, 2, 2}, -1, 1);
    check("avg_pool2d", {y}, [&] { return weighted(avg_pool2d(y, 2), wp); });
  }
  {
    DenseLayer dense(4, 3);
    dense.init(rng);
    Tensor x = uniform(rng, {5, 4}, -1, 1), w = uniform(rng, {5, 3}, -1, 1);
    check("dense", {x, dense.weight, dense.bias}, [&] { return weighted(dense.forward(x), w); });

    VarianceHead head(4, 3);
    head.linear.init(rng);
    check("variance_head", {x, head.linear.weight, head.linear.bias},
          [&] { return weighted(head.forward(x), w); });

    DropoutLayer drop(0.3);
    const Rng mask_seed = rng.derive(11);
    Tensor w5 = uniform(rng, {5, 4}, -1, 1);
    check("dropout", {x}, [&] {
      Rng r = mask_seed;
      return weighted(drop.forward(x, DropoutMode::train, r), w5);
    });
  }
  {
    SelfAttentionStage stage(4, 2, 2);
    stage.init(rng);
    stage.gamma.mutable_data()[0] = 0.7;
    Tensor x = uniform(rng, {2, 4, 3, 3}, -1, 1), w = uniform(rng, {2, 4, 3, 3}, -1, 1);
    Tensor wa = uniform(rng, {2, 4, 3, 3}, -1, 1), wb = uniform(rng, {2, 9, 9}, -1, 1);
    check("attention_output", {x, stage.query, stage.key, stage.value, stage.out_proj, stage.gamma},
          [&] { return weighted(stage.forward(x).output, w); });
    check("attention_attended", {x, stage.query, stage.key, stage.value, stage.out_proj},
          [&] { return weighted(stage.forward(x).attended, wa); });
    check("attention_weights", {x, stage.query, stage.key},
          [&] { return weighted(stage.forward(x).weights, wb); });
  }
  {
    Tensor s = uniform(rng, {4, 5}, -2, 2), t = uniform(rng, {4, 5}, -2, 2);
    const std::vector<std::size_t> labels{0, 4, 2, 2};
    check("distillation_loss", {s}, [&] { return distillation_loss(s, t, 2.0); });
    check("cross_entropy", {s}, [&] { return cross_entropy(s, labels); });

    Tensor sigma2 = positive(rng, {4, 5});
    const Rng noise_seed = rng.derive(12);
    for (AleatoricForm form : {AleatoricForm::likelihood, AleatoricForm::literal}) {
      const std::string tag = form == AleatoricForm::likelihood ? "likelihood" : "literal";
      check("aleatoric_hard_" + tag, {s, sigma2}, [&] {
        Rng r = noise_seed;
        return aleatoric_loss(s, sigma2, std::span<const std::size_t>(labels), 5, r, form);
      });
      Tensor soft = softmax_temperature(t, 2.0);
      check("aleatoric_soft_" + tag, {s, sigma2}, [&] {
        Rng r = noise_seed;
        return aleatoric_loss(s, sigma2, soft, 5, r, form);
      });
    }
    Tensor v = positive(rng, {4, 5});
    check("uncertainty_distillation", {sigma2}, [&] { return uncertainty_distillation(v, sigma2); });

    Tensor m = uniform(rng, {3, 2, 4, 4}, -1, 1), wn = uniform(rng, {3, 2, 4, 4}, -1, 1);
    check("normalize_per_sample", {m}, [&] { return weighted(normalize_per_sample(m), wn); });
    std::array<Tensor, 3> ta, sa;
    for (std::size_t i = 0; i < 3; ++i) {
      ta[i] = uniform(rng, {3, 2, std::size_t{4} >> i, std::size_t{4} >> i}, -1, 1);
      sa[i] = uniform(rng, {3, 2, std::size_t{4} >> i, std::size_t{4} >> i}, -1, 1);
    }
    check("attention_distillation", {sa[0], sa[1], sa[2]},
          [&] { return attention_distillation(ta, sa); });
  }
  for (int variant = 0; variant < 2; ++variant) {
    // Complete objective on the second task of a small model. The jitter
    // moves every parameter well off its initial scale so that attention
    // logits and distillation residuals are not vanishingly small.
    EngineConfig cfg;
    cfg.model.image_size = 8;
    cfg.model.widths = {4, 6, 8};
    cfg.model.dropout_rate = 0.2;
    cfg.loss = LossConfig(2.0, 0.5, 4,
                          variant == 0 ? AleatoricForm::likelihood : AleatoricForm::literal);
    cfg.ce_scope = variant == 0 ? CeScope::unified : CeScope::new_classes;
    cfg.seed = seed;
    TrainState state(cfg, 2);
    state.begin_next_task(2);
    Rng jitter = rng.derive(13);
    std::vector<Tensor> params;
    for (auto& [name, p] : state.model.parameters()) {
      for (double& v : p.mutable_data()) v += jitter.uniform() - 0.5;
      if (name.ends_with("gamma")) p.mutable_data()[0] = 0.5;
      params.push_back(p);
    }
    Batch batch{uniform(rng, {6, 1, 8, 8}, -1, 1), {0, 1, 2, 3, 2, 3}};
    const Rng drop_seed = rng.derive(14), noise_seed = rng.derive(15);
    auto objective = [&] {
      Rng d = drop_seed, n = noise_seed;
      return compute_batch_loss(state, batch, d, n).total;
    };
    check(variant == 0 ? "full_objective" : "full_objective_literal_new_scope", params,
          objective);
  }
  return out;
}

}  // namespace evln
