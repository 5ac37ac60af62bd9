#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "evln/data.hpp"
#include "evln/losses.hpp"
#include "evln/metrics.hpp"
#include "evln/nn.hpp"

namespace evln {

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;

  void validate() const;
};

// Which loss terms participate. Terms that need a teacher are skipped at the
// first task regardless.
struct LossSwitches {
  bool distillation = true;           // L_D
  bool aleatoric = true;              // L_ale = L_ca + L_pa
  bool uncertainty_distill = true;    // L_A
  bool attention_distill = true;      // L_m
};

// Label space of the classification terms (L_C and L_ca).
enum class CeScope {
  // Every sample of the batch, labelled over all classes seen so far
  // (old-class head followed by new-class head).
  unified,
  // Current-task samples only, labelled over the new-class head.
  new_classes,
};

struct EngineConfig {
  ModelConfig model;
  LossConfig loss;
  LossSwitches use;
  OptimizerConfig optimizer;
  std::size_t buffer_capacity = 2000;
  CeScope ce_scope = CeScope::unified;
  std::uint64_t seed = 0;
};

struct ExemplarRecord {
  std::size_t sample;  // dataset index
  std::size_t label;   // class id
  std::size_t task;    // task that introduced the class (0-based)

  friend bool operator==(const ExemplarRecord&, const ExemplarRecord&) = default;
};

/// Capacity-capped store of samples from finished tasks, kept sorted by
/// (label, sample).
class ExemplarBuffer {
 public:
  explicit ExemplarBuffer(std::size_t capacity = 2000) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<ExemplarRecord>& records() const { return records_; }
  std::vector<std::size_t> samples() const;
  std::size_t count_of(std::size_t label) const;

  friend ExemplarBuffer update_buffer(const ExemplarBuffer& buffer,
                                      const TaskSequence& tasks, std::size_t task_id,
                                      Rng& rng);

 private:
  std::size_t capacity_;
  std::vector<ExemplarRecord> records_;
};

/// Rebalances the buffer after task task_id finished: every class seen so
/// far gets quota floor(capacity / classes seen); stored classes are
/// randomly down-sampled to the quota and the finished task's classes are
/// randomly sampled from their train indices up to the quota.
ExemplarBuffer update_buffer(const ExemplarBuffer& buffer, const TaskSequence& tasks,
                             std::size_t task_id, Rng& rng);

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> columns;  // unified-head column of each label
};

/// Everything that evolves during a run.
struct TrainState {
  TrainState(const EngineConfig& config, std::size_t first_task_classes);

  EngineConfig config;
  std::size_t task = 0;
  IncrementalModel model;
  std::optional<ModelSnapshot> teacher;
  std::vector<std::vector<double>> velocity;
  std::size_t step = 0;

  // Independent streams so that toggling one loss term never shifts the
  // randomness seen by another part of the run.
  Rng init_rng;
  Rng dropout_rng;
  Rng noise_rng;
  Rng data_rng;

  // Snapshots the model as teacher and grows the heads by new_classes.
  void begin_next_task(std::size_t new_classes);
  void reset_optimizer();
};

struct BatchLoss {
  LossBreakdown parts;
  Tensor total;  // differentiable total
};

/// Forward through teacher (dropout off, not recorded) and student (dropout
/// in train mode), assembling every enabled loss term. Randomness comes
/// from the two streams passed in, so the same copies replay identical
/// masks and noise. When lambda is 0 the lambda-weighted terms are not
/// evaluated and reported as 0.
BatchLoss compute_batch_loss(const TrainState& state, const Batch& batch,
                             Rng& dropout_rng, Rng& noise_rng);

/// One optimisation step: loss, backward, SGD with momentum and weight
/// decay. Throws NumericError when the total is not finite.
LossBreakdown train_one_batch(TrainState& state, const Batch& batch);

struct BatchLog {
  std::size_t task, epoch, batch;
  LossBreakdown loss;
};

struct RunResult {
  AccuracyMatrix matrix;
  std::vector<BatchLog> batches;
  std::vector<std::vector<std::size_t>> class_order_per_task;
  std::optional<IncrementalModel> model;
  std::optional<ModelSnapshot> last_teacher;
};

struct RunHooks {
  std::function<void(const BatchLog&)> on_batch;
  std::function<void(std::size_t task, const std::vector<double>& row)> on_task;
  // Called at the start of every task, after head expansion, before any
  // update. Used by tests to inspect protocol invariants.
  std::function<void(const TrainState&, const Dataset&)> on_task_start;
  // Called after every optimisation step.
  std::function<void(const TrainState&)> on_step;
};

/// Full class-incremental protocol over tasks.size() steps.
RunResult run_sequence(const Dataset& ds, const TaskSequence& tasks,
                       const EngineConfig& config, const RunHooks& hooks = {});

/// Fraction of rows whose unified argmax equals the given column.
double accuracy(const IncrementalModel& model, const Tensor& inputs,
                std::span<const std::size_t> columns);

/// Per-task test accuracy for tasks [0, upto] over the unified head, whose
/// column order is class_order. Dropout off. A test label missing from
/// class_order raises DataError.
std::vector<double> evaluate(const IncrementalModel& model, const Dataset& ds,
                             const TaskSequence& tasks,
                             std::span<const std::size_t> class_order,
                             std::size_t upto);

struct PredictiveUncertainty {
  Tensor mean_probs;  // [N x classes]
  Tensor epistemic;   // [N]
  Tensor aleatoric;   // [N]
};

/// MC-dropout estimate over n_samples stochastic passes: epistemic is the
/// class-mean of the across-pass (population) variance of the softmax
/// probabilities, aleatoric the class-mean of the averaged variance head.
PredictiveUncertainty predictive_uncertainty(const IncrementalModel& model,
                                             const Tensor& x, std::size_t n_samples,
                                             Rng& rng);

}  // namespace evln
