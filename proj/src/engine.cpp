#include "evln/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "evln/errors.hpp"

namespace evln {

namespace {

enum Stream : std::uint64_t {
  kModelInit = 0,
  kHeadInit = 1,
  kDropout = 2,
  kNoise = 3,
  kData = 4,
  kBuffer = 5,
};

constexpr std::size_t kNoColumn = std::numeric_limits<std::size_t>::max();

}  // namespace

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be > 0");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ParameterError("momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ParameterError("weight decay must be >= 0");
}

// ---------------------------------------------------------------------------
// Exemplar buffer

std::vector<std::size_t> ExemplarBuffer::samples() const {
  std::vector<std::size_t> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.sample);
  return out;
}

std::size_t ExemplarBuffer::count_of(std::size_t label) const {
  return static_cast<std::size_t>(std::count_if(
      records_.begin(), records_.end(), [&](const auto& r) { return r.label == label; }));
}

namespace {

// Random subset of size min(quota, items.size()), returned in ascending order.
std::vector<std::size_t> sample_subset(std::vector<std::size_t> items, std::size_t quota,
                                       Rng& rng) {
  shuffle(std::span<std::size_t>(items), rng);
  if (items.size() > quota) items.resize(quota);
  std::sort(items.begin(), items.end());
  return items;
}

}  // namespace

ExemplarBuffer update_buffer(const ExemplarBuffer& buffer, const TaskSequence& tasks,
                             std::size_t task_id, Rng& rng) {
  if (task_id >= tasks.size()) {
    throw ParameterError("update_buffer: task " + std::to_string(task_id) +
                         " does not exist");
  }
  const std::size_t seen = tasks.classes_before(task_id + 1).size();
  const std::size_t quota = seen ? buffer.capacity() / seen : 0;

  std::map<std::size_t, std::vector<ExemplarRecord>> by_class;
  for (const auto& r : buffer.records()) by_class[r.label].push_back(r);

  ExemplarBuffer next(buffer.capacity());
  for (auto& [label, recs] : by_class) {
    std::vector<std::size_t> idx(recs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t k : sample_subset(idx, quota, rng)) next.records_.push_back(recs[k]);
  }
  std::vector<std::size_t> fresh = tasks.tasks[task_id];
  std::sort(fresh.begin(), fresh.end());
  for (std::size_t label : fresh) {
    for (std::size_t s : sample_subset(tasks.train_by_class.at(label), quota, rng)) {
      next.records_.push_back({s, label, task_id});
    }
  }
  std::sort(next.records_.begin(), next.records_.end(), [](const auto& a, const auto& b) {
    return a.label != b.label ? a.label < b.label : a.sample < b.sample;
  });
  return next;
}

// ---------------------------------------------------------------------------
// Train state

TrainState::TrainState(const EngineConfig& cfg, std::size_t first_task_classes)
    : config(cfg),
      model([&] {
        Rng rng = Rng(cfg.seed).derive(kModelInit);
        return IncrementalModel(cfg.model, first_task_classes, rng);
      }()),
      init_rng(Rng(cfg.seed).derive(kHeadInit)),
      dropout_rng(Rng(cfg.seed).derive(kDropout)),
      noise_rng(Rng(cfg.seed).derive(kNoise)),
      data_rng(Rng(cfg.seed).derive(kData)) {
  config.optimizer.validate();
  model.set_requires_grad(true);
  reset_optimizer();
}

void TrainState::begin_next_task(std::size_t new_classes) {
  teacher.emplace(model);
  model = model.expand_heads(new_classes, init_rng);
  model.set_requires_grad(true);
  reset_optimizer();
  ++task;
}

void TrainState::reset_optimizer() {
  velocity.clear();
  for (const auto& [name, p] : model.parameters()) {
    velocity.emplace_back(p.numel(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Losses for one batch

BatchLoss compute_batch_loss(const TrainState& state, const Batch& batch,
                             Rng& dropout_rng, Rng& noise_rng) {
  const EngineConfig& cfg = state.config;
  const LossSwitches& use = cfg.use;
  const std::size_t n_prev = state.model.prev_classes();
  const bool has_teacher = state.teacher.has_value() && n_prev > 0;

  std::optional<ForwardOutput> teacher_out;
  if (has_teacher) teacher_out = state.teacher->forward(batch.inputs);
  const ForwardOutput student =
      state.model.forward(batch.inputs, DropoutMode::train, dropout_rng);

  // Classification view.
  Tensor cls_logits, cls_var;
  std::vector<std::size_t> cls_labels;
  if (cfg.ce_scope == CeScope::unified) {
    cls_logits = student.unified_logits();
    cls_var = student.unified_variance();
    cls_labels = batch.columns;
  } else {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < batch.columns.size(); ++i) {
      if (batch.columns[i] >= n_prev) {
        rows.push_back(i);
        cls_labels.push_back(batch.columns[i] - n_prev);
      }
    }
    cls_logits = take_rows(student.logits_c, rows);
    cls_var = take_rows(student.var_c, rows);
  }

  LossBreakdown parts;
  const Tensor l_c = cross_entropy(cls_logits, cls_labels);
  parts.l_c = l_c.item();
  Tensor total = l_c;

  Tensor teacher_logits;
  if (has_teacher) teacher_logits = teacher_out->unified_logits();

  if (has_teacher && use.distillation) {
    const Tensor l_d =
        distillation_loss(student.logits_p, teacher_logits, cfg.loss.tau);
    parts.l_d = l_d.item();
    total = add(total, l_d);
  }

  if (cfg.loss.lambda > 0.0) {
    Tensor weighted = Tensor::scalar(0.0);
    if (use.aleatoric) {
      const Tensor l_ca =
          aleatoric_loss(cls_logits, cls_var, std::span<const std::size_t>(cls_labels),
                         cfg.loss.t_a, noise_rng, cfg.loss.aleatoric_form);
      parts.l_ca = l_ca.item();
      weighted = add(weighted, l_ca);
      if (has_teacher) {
        const Tensor soft = softmax_temperature(teacher_logits, cfg.loss.tau);
        const Tensor l_pa = aleatoric_loss(student.logits_p, student.var_p, soft,
                                           cfg.loss.t_a, noise_rng,
                                           cfg.loss.aleatoric_form);
        parts.l_pa = l_pa.item();
        weighted = add(weighted, l_pa);
      }
      parts.l_ale = parts.l_ca + parts.l_pa;
    }
    if (has_teacher && use.uncertainty_distill) {
      const Tensor l_a =
          uncertainty_distillation(teacher_out->unified_variance(), student.var_p);
      parts.l_a = l_a.item();
      weighted = add(weighted, l_a);
    }
    if (has_teacher && use.attention_distill) {
      const Tensor l_m = attention_distillation(teacher_out->attn, student.attn);
      parts.l_m = l_m.item();
      weighted = add(weighted, l_m);
    }
    total = add(total, scale(weighted, cfg.loss.lambda));
  }

  parts = total_loss(parts, cfg.loss);
  if (!std::isfinite(total.item())) {
    throw NumericError("non-finite total loss " + std::to_string(total.item()));
  }
  return {parts, total};
}

LossBreakdown train_one_batch(TrainState& state, const Batch& batch) {
  active_tape().reset();
  NamedTensors params = state.model.parameters();
  for (auto& [name, p] : params) p.zero_grad();

  BatchLoss loss = compute_batch_loss(state, batch, state.dropout_rng, state.noise_rng);
  backward(loss.total);

  const OptimizerConfig& opt = state.config.optimizer;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k].second;
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& vel = state.velocity[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i] + opt.weight_decay * data[i];
      vel[i] = opt.momentum * vel[i] + g;
      data[i] -= opt.learning_rate * vel[i];
    }
  }
  ++state.step;
  return loss.parts;
}

// ---------------------------------------------------------------------------
// Evaluation

double accuracy(const IncrementalModel& model, const Tensor& inputs,
                std::span<const std::size_t> columns) {
  if (inputs.dim(0) != columns.size()) {
    throw DimensionError("accuracy: label count differs from batch size");
  }
  if (columns.empty()) return 0.0;
  NoGradGuard guard;
  const std::size_t n = columns.size();
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor logits = model.forward(take_rows(inputs, rows)).unified_logits();
    const std::size_t c = logits.dim(1);
    auto d = logits.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* row = d.data() + r * c;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + c) - row);
      if (best == columns[start + r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<double> evaluate(const IncrementalModel& model, const Dataset& ds,
                             const TaskSequence& tasks,
                             std::span<const std::size_t> class_order, std::size_t upto) {
  std::vector<std::size_t> column(ds.classes, kNoColumn);
  for (std::size_t k = 0; k < class_order.size(); ++k) column.at(class_order[k]) = k;
  if (class_order.size() != model.total_classes()) {
    throw DimensionError("model covers " + std::to_string(model.total_classes()) +
                         " classes, column order lists " +
                         std::to_string(class_order.size()));
  }
  std::vector<double> result;
  for (std::size_t t = 0; t <= upto && t < tasks.size(); ++t) {
    std::vector<std::size_t> indices, cols;
    for (std::size_t label : tasks.tasks[t]) {
      for (std::size_t i : tasks.test_by_class.at(label)) {
        if (column[ds.labels[i]] == kNoColumn) {
          throw DataError("test sample " + std::to_string(i) + " has unseen class " +
                          std::to_string(ds.labels[i]));
        }
        indices.push_back(i);
        cols.push_back(column[ds.labels[i]]);
      }
    }
    result.push_back(accuracy(model, ds.gather(indices), cols));
  }
  return result;
}

PredictiveUncertainty predictive_uncertainty(const IncrementalModel& model,
                                             const Tensor& x, std::size_t n_samples,
                                             Rng& rng) {
  if (n_samples < 2) {
    throw ParameterError("predictive_uncertainty needs n_samples >= 2, got " +
                         std::to_string(n_samples));
  }
  NoGradGuard guard;
  const std::size_t n = x.dim(0);
  const std::size_t c = model.total_classes();
  std::vector<double> mean(n * c, 0.0), m2(n * c, 0.0), var_mean(n * c, 0.0);

  // Several passes share one forward by tiling the input; every copy draws
  // its own dropout mask.
  const std::size_t per_forward = std::max<std::size_t>(1, 512 / std::max<std::size_t>(n, 1));
  std::size_t done = 0;
  while (done < n_samples) {
    const std::size_t reps = std::min(per_forward, n_samples - done);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < reps; ++r) {
      for (std::size_t i = 0; i < n; ++i) rows.push_back(i);
    }
    const ForwardOutput out = model.forward(take_rows(x, rows), DropoutMode::mc_eval, rng);
    const Tensor probs = softmax_temperature(out.unified_logits(), 1.0);
    const Tensor var = out.unified_variance();
    for (std::size_t r = 0; r < reps; ++r) {
      const double k = static_cast<double>(done + r + 1);
      for (std::size_t e = 0; e < n * c; ++e) {
        const double p = probs[r * n * c + e];
        const double delta = p - mean[e];
        mean[e] += delta / k;
        m2[e] += delta * (p - mean[e]);
        var_mean[e] += (var[r * n * c + e] - var_mean[e]) / k;
      }
    }
    done += reps;
  }

  std::vector<double> epistemic(n, 0.0), aleatoric(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      epistemic[i] += m2[i * c + j] / static_cast<double>(n_samples);
      aleatoric[i] += var_mean[i * c + j];
    }
    epistemic[i] /= static_cast<double>(c);
    aleatoric[i] /= static_cast<double>(c);
  }
  return {Tensor({n, c}, std::move(mean)), Tensor({n}, std::move(epistemic)),
          Tensor({n}, std::move(aleatoric))};
}

// ---------------------------------------------------------------------------
// Protocol

RunResult run_sequence(const Dataset& ds, const TaskSequence& tasks,
                       const EngineConfig& config, const RunHooks& hooks) {
  if (tasks.size() == 0) throw ConfigError("task sequence is empty");
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks.tasks[t].empty()) {
      throw ConfigError("task " + std::to_string(t + 1) + " has no classes");
    }
  }
  config.optimizer.validate();

  RunResult result;
  result.matrix = AccuracyMatrix(tasks.size());
  TrainState state(config, tasks.tasks[0].size());
  ExemplarBuffer buffer(config.buffer_capacity);
  Rng buffer_rng = Rng(config.seed).derive(kBuffer);

  std::vector<std::size_t> class_order;
  std::vector<std::size_t> column(ds.classes, kNoColumn);

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (t > 0) state.begin_next_task(tasks.tasks[t].size());
    for (std::size_t label : tasks.tasks[t]) {
      column.at(label) = class_order.size();
      class_order.push_back(label);
    }
    result.class_order_per_task.push_back(class_order);
    if (hooks.on_task_start) hooks.on_task_start(state, ds);

    std::vector<std::size_t> pool;
    for (std::size_t label : tasks.tasks[t]) {
      const auto& idx = tasks.train_by_class.at(label);
      pool.insert(pool.end(), idx.begin(), idx.end());
    }
    for (std::size_t s : buffer.samples()) pool.push_back(s);
    if (pool.empty()) throw ConfigError("task " + std::to_string(t + 1) + " has no samples");

    const std::size_t bs = config.optimizer.batch_size;
    for (std::size_t epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
      std::vector<std::size_t> order = pool;
      shuffle(std::span<std::size_t>(order), state.data_rng);
      for (std::size_t start = 0, b = 0; start < order.size(); start += bs, ++b) {
        const std::size_t end = std::min(order.size(), start + bs);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        Batch batch{ds.gather(idx), {}};
        for (std::size_t i : idx) batch.columns.push_back(column[ds.labels[i]]);
        BatchLog log{t, epoch, b, train_one_batch(state, batch)};
        if (hooks.on_batch) hooks.on_batch(log);
        if (hooks.on_step) hooks.on_step(state);
        result.batches.push_back(log);
      }
    }

    std::vector<double> row = evaluate(state.model, ds, tasks, class_order, t);
    if (hooks.on_task) hooks.on_task(t, row);
    result.matrix.set_row(t, std::move(row));
    buffer = update_buffer(buffer, tasks, t, buffer_rng);
  }
  result.last_teacher = state.teacher;
  result.model = std::move(state.model);
  return result;
}

}  // namespace evln
