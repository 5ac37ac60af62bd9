#include "evln/losses.hpp"

#include <cmath>

#include "evln/errors.hpp"

namespace evln {

LossConfig::LossConfig(double tau, double lambda, std::size_t t_a,
                       AleatoricForm form)
    : tau(tau), lambda(lambda), t_a(t_a), aleatoric_form(form) {
  if (!(tau > 0.0)) throw ParameterError("tau must be > 0");
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  if (t_a < 1) throw ParameterError("t_a must be >= 1");
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects [N x C], got " +
                         shape_str(t.shape()));
  }
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Tensor out = Tensor::zeros({labels.size(), classes});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " of sample " +
                      std::to_string(i) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    d[i * classes + labels[i]] = 1.0;
  }
  return out;
}

double batch_inverse(const Tensor& t) {
  return t.dim(0) ? 1.0 / static_cast<double>(t.dim(0)) : 0.0;
}

}  // namespace

Tensor distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         double tau) {
  require_matrix(student_logits, "distillation_loss");
  require_same_shape(student_logits, teacher_logits, "distillation_loss");
  if (student_logits.dim(1) == 0 || student_logits.dim(0) == 0) {
    return Tensor::scalar(0.0);
  }
  Tensor p = softmax_temperature(teacher_logits.clone(), tau);
  Tensor log_s = log_softmax(student_logits, tau);
  return scale(sum(mul(p, log_s)), -batch_inverse(student_logits));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  if (labels.size() != logits.dim(0)) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  if (labels.empty()) return Tensor::scalar(0.0);
  Tensor target = one_hot(labels, logits.dim(1));
  return scale(sum(mul(target, log_softmax(logits))), -batch_inverse(logits));
}

Tensor aleatoric_loss(const Tensor& logits, const Tensor& sigma2,
                      const AleatoricTarget& target, std::size_t t_a, Rng& rng,
                      AleatoricForm form) {
  require_matrix(logits, "aleatoric_loss");
  require_same_shape(logits, sigma2, "aleatoric_loss");
  if (t_a < 1) throw ParameterError("aleatoric_loss needs t_a >= 1");
  for (double v : sigma2.data()) {
    if (!(v > 0.0)) {
      throw DomainError("aleatoric_loss needs sigma2 > 0, got " + std::to_string(v));
    }
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);

  Tensor weights;
  if (std::holds_alternative<Tensor>(target)) {
    weights = std::get<Tensor>(target).clone();
    require_same_shape(logits, weights, "aleatoric_loss soft target");
  } else {
    weights = one_hot(std::get<std::span<const std::size_t>>(target), c);
    if (weights.dim(0) != n) {
      throw DimensionError("aleatoric_loss: label count differs from batch size");
    }
  }
  if (n == 0 || c == 0) return Tensor::scalar(0.0);

  Tensor eps = sample_standard_normal(rng, {t_a, n, c});
  Tensor corrupted = add(logits, mul(sqrt(sigma2), eps));     // [T, N, C]
  Tensor loglik = sum(mul(log_softmax(corrupted), weights), 2);  // [T, N]
  const double log_t = std::log(static_cast<double>(t_a));
  Tensor per_example;
  if (form == AleatoricForm::likelihood) {
    per_example = neg(add_scalar(logsumexp(loglik, 0), -log_t));
  } else {
    per_example = neg(log(mean(neg(loglik), 0)));
  }
  return mean(per_example);
}

AleatoricParts l_ale(const ForwardOutput& forward, const Tensor& teacher_softmax,
                     std::span<const std::size_t> labels, const LossConfig& cfg,
                     Rng& rng) {
  AleatoricParts parts;
  parts.l_ca = aleatoric_loss(forward.logits_c, forward.var_c, labels, cfg.t_a, rng,
                              cfg.aleatoric_form);
  if (forward.logits_p.dim(1) == 0) {
    parts.l_pa = Tensor::scalar(0.0);
    parts.l_ale = parts.l_ca;
  } else {
    parts.l_pa = aleatoric_loss(forward.logits_p, forward.var_p, teacher_softmax,
                                cfg.t_a, rng, cfg.aleatoric_form);
    parts.l_ale = add(parts.l_ca, parts.l_pa);
  }
  return parts;
}

Tensor uncertainty_distillation(const Tensor& sigma2_teacher,
                                const Tensor& sigma2_student) {
  require_matrix(sigma2_student, "uncertainty_distillation");
  require_same_shape(sigma2_teacher, sigma2_student, "uncertainty_distillation");
  if (sigma2_student.numel() == 0) return Tensor::scalar(0.0);
  return scale(sum(square(sub(sigma2_teacher.clone(), sigma2_student))),
               batch_inverse(sigma2_student));
}

Tensor normalize_per_sample(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("normalize_per_sample of a scalar");
  const std::size_t n = x.dim(0);
  const std::size_t d = n ? x.numel() / n : 0;
  Tensor flat = reshape(x, {n, d});
  Tensor norm = sqrt(clamp_min(sum(square(flat), 1, true), 1e-24));
  return div(flat, norm);
}

Tensor attention_distillation(std::span<const Tensor> attn_teacher,
                              std::span<const Tensor> attn_student) {
  if (attn_teacher.size() != 3 || attn_student.size() != 3) {
    throw DimensionError("attention_distillation needs exactly 3 stages, got " +
                         std::to_string(attn_teacher.size()) + " and " +
                         std::to_string(attn_student.size()));
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < 3; ++s) {
    require_same_shape(attn_teacher[s], attn_student[s], "attention_distillation");
    if (attn_student[s].numel() == 0) continue;
    Tensor diff = sub(normalize_per_sample(attn_teacher[s].clone()),
                      normalize_per_sample(attn_student[s]));
    total = add(total, scale(sum(square(diff)), batch_inverse(attn_student[s])));
  }
  return total;
}

LossBreakdown total_loss(const LossBreakdown& parts, const LossConfig& cfg) {
  const std::pair<const char*, double> components[] = {
      {"l_c", parts.l_c},     {"l_d", parts.l_d}, {"l_ale", parts.l_ale},
      {"l_a", parts.l_a},     {"l_m", parts.l_m}, {"l_ca", parts.l_ca},
      {"l_pa", parts.l_pa}};
  for (const auto& [name, value] : components) {
    if (!std::isfinite(value)) {
      throw NumericError(std::string("non-finite loss component ") + name + " = " +
                         std::to_string(value));
    }
  }
  LossBreakdown out = parts;
  out.total = cfg.lambda * (parts.l_m + parts.l_a + parts.l_ale) + parts.l_c + parts.l_d;
  return out;
}

}  // namespace evln
