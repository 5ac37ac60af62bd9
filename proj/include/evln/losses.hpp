#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <variant>

#include "evln/nn.hpp"
#include "evln/rng.hpp"
#include "evln/tensor.hpp"

namespace evln {

enum class AleatoricForm {
  // -log of the MC-averaged likelihood (heteroscedastic attenuation).
  likelihood,
  // -log of the MC-averaged per-sample loss, kept for comparison only.
  literal,
};

struct LossConfig {
  LossConfig(double tau = 2.0, double lambda = 0.5, std::size_t t_a = 10,
             AleatoricForm form = AleatoricForm::likelihood);

  double tau;
  double lambda;
  std::size_t t_a;
  AleatoricForm aleatoric_form;
};

struct LossBreakdown {
  double l_c = 0.0;
  double l_d = 0.0;
  double l_ca = 0.0;
  double l_pa = 0.0;
  double l_ale = 0.0;  // l_ca + l_pa
  double l_a = 0.0;
  double l_m = 0.0;
  double total = 0.0;
};

// Hard labels (class index per row) or a soft target distribution [N x C].
using AleatoricTarget = std::variant<std::span<const std::size_t>, Tensor>;

/// Temperature distillation: -(1/N) sum_n sum_c p log s, where p and s are
/// the temperature softmaxes of teacher and student. The teacher is
/// detached. Zero classes gives 0.
Tensor distillation_loss(const Tensor& student_logits,
                         const Tensor& teacher_logits, double tau);

/// Mean negative log softmax probability of the labelled class.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Monte-Carlo aleatoric loss. For s = 1..t_a the logits are corrupted as
/// logits + sqrt(sigma2) * eps_s with eps_s ~ N(0, I) drawn from rng in
/// [t_a x N x C] row-major order, and the per-example loss is
///   likelihood: -log((1/t_a) sum_s exp(-CE(corrupted_s, target)))
///   literal:    -log((1/t_a) sum_s CE(corrupted_s, target))
/// Returns the batch mean. Gradients reach both logits and sigma2.
Tensor aleatoric_loss(const Tensor& logits, const Tensor& sigma2,
                      const AleatoricTarget& target, std::size_t t_a, Rng& rng,
                      AleatoricForm form = AleatoricForm::likelihood);

struct AleatoricParts {
  Tensor l_ca;
  Tensor l_pa;
  Tensor l_ale;
};

/// l_ca on the new-class head with hard labels plus l_pa on the old-class
/// head against the teacher's soft targets; l_pa is 0 without old classes.
/// l_ca's noise is drawn before l_pa's.
AleatoricParts l_ale(const ForwardOutput& forward, const Tensor& teacher_softmax,
                     std::span<const std::size_t> labels, const LossConfig& cfg,
                     Rng& rng);

/// (1/N) sum_i ||teacher_i - student_i||^2 over variance vectors.
Tensor uncertainty_distillation(const Tensor& sigma2_teacher,
                                const Tensor& sigma2_student);

/// Sum over the three stages of (1/N) sum_i ||a_i - b_i||^2, where a_i, b_i
/// are the per-sample attention maps scaled to unit L2 norm.
Tensor attention_distillation(std::span<const Tensor> attn_teacher,
                              std::span<const Tensor> attn_student);

/// Per-sample L2 normalisation of a [N x ...] tensor (norm floored at 1e-12).
Tensor normalize_per_sample(const Tensor& x);

/// total = lambda * (l_m + l_a + l_ale) + l_c + l_d. Throws NumericError
/// naming the first non-finite component.
LossBreakdown total_loss(const LossBreakdown& parts, const LossConfig& cfg);

}  // namespace evln
