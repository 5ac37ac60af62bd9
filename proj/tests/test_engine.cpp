#include <doctest.h>

#include <cmath>
#include <set>

#include "evln/engine.hpp"
#include "evln/errors.hpp"

using namespace evln;

namespace {

EngineConfig tiny_config(double dropout = 0.1) {
  EngineConfig c;
  c.model.image_size = 8;
  c.model.widths = {4, 6, 8};
  c.model.dropout_rate = dropout;
  c.loss = LossConfig(2.0, 0.5, 4);
  c.optimizer.learning_rate = 0.01;
  c.optimizer.epochs = 1;
  c.optimizer.batch_size = 16;
  c.buffer_capacity = 20;
  c.seed = 3;
  return c;
}

Dataset tiny_dataset(std::size_t classes = 6, std::size_t per_class = 20) {
  return generate_synthetic({classes, per_class, 8, 0.15, 1});
}

std::vector<double> flat_params(const IncrementalModel& m) {
  std::vector<double> out;
  for (const auto& [n, p] : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

Batch batch_of(const Dataset& ds, std::vector<std::size_t> idx, std::vector<std::size_t> cols) {
  return {ds.gather(idx), std::move(cols)};
}

}  // namespace

TEST_CASE("buffer quota arithmetic") {
  Dataset ds = generate_synthetic({10, 250, 8, 0.0, 0});
  TaskSequence seq = make_task_sequence(ds, 2, 0);
  ExemplarBuffer buf(2000);
  Rng rng(1);
  for (std::size_t t = 0; t < seq.size(); ++t) buf = update_buffer(buf, seq, t, rng);
  CHECK(buf.size() == 2000);
  for (std::size_t k = 0; k < 10; ++k) CHECK(buf.count_of(k) == 200);

  Dataset three = generate_synthetic({3, 10, 8, 0.0, 0});
  TaskSequence singles = make_task_sequence(three, 1, 0);
  ExemplarBuffer small(10);
  for (std::size_t t = 0; t < 3; ++t) small = update_buffer(small, singles, t, rng);
  CHECK(small.size() == 9);
  for (std::size_t k = 0; k < 3; ++k) CHECK(small.count_of(k) == 3);
}

TEST_CASE("buffer scan after every update") {
  Dataset ds = tiny_dataset(10, 20);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TaskSequence seq = make_task_sequence(ds, 2, seed);
    ExemplarBuffer buf(15);
    Rng rng(seed);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      buf = update_buffer(buf, seq, t, rng);
      const auto seen = seq.classes_before(t + 1);
      const std::size_t quota = 15 / seen.size();
      CHECK(buf.size() <= 15);
      std::set<std::size_t> allowed;
      for (std::size_t k : seen)
        allowed.insert(seq.train_by_class[k].begin(), seq.train_by_class[k].end());
      for (const auto& r : buf.records()) {
        CHECK(r.task <= t);
        CHECK(allowed.count(r.sample) == 1);
        CHECK(ds.labels[r.sample] == r.label);
      }
      for (std::size_t k : seen) CHECK(buf.count_of(k) == quota);
    }
  }
}

TEST_CASE("first task has no teacher terms") {
  Dataset ds = tiny_dataset();
  TrainState state(tiny_config(), 2);
  Batch b = batch_of(ds, {0, 1, 20, 21}, {0, 0, 1, 1});
  const LossBreakdown p = train_one_batch(state, b);
  CHECK(p.l_d == 0.0);
  CHECK(p.l_a == 0.0);
  CHECK(p.l_m == 0.0);
  CHECK(p.l_pa == 0.0);
  CHECK(p.total == doctest::Approx(p.l_c + 0.5 * p.l_ca).epsilon(1e-14));
}

TEST_CASE("zero learning rate leaves parameters and losses unchanged") {
  Dataset ds = tiny_dataset();
  TrainState state(tiny_config(), 2);
  state.begin_next_task(2);
  state.config.optimizer.learning_rate = 0.0;
  Batch b = batch_of(ds, {0, 21, 40, 61}, {0, 1, 2, 3});
  const auto before = flat_params(state.model);
  const Rng d = state.dropout_rng, n = state.noise_rng;
  const LossBreakdown first = train_one_batch(state, b);
  state.dropout_rng = d;
  state.noise_rng = n;
  const LossBreakdown second = train_one_batch(state, b);
  CHECK(flat_params(state.model) == before);
  CHECK(first.total == second.total);
  CHECK(first.l_d == second.l_d);
  CHECK(first.l_m == second.l_m);
}

TEST_CASE("a small step descends on the replayed batch") {
  Dataset ds = tiny_dataset();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    EngineConfig cfg = tiny_config();
    cfg.seed = seed;
    cfg.optimizer.learning_rate = 1e-4;
    TrainState state(cfg, 2);
    state.begin_next_task(2);
    Batch b = batch_of(ds, {0, 21, 40, 61, 45, 70}, {0, 1, 2, 3, 2, 3});
    const Rng d = state.dropout_rng, n = state.noise_rng;
    Rng d0 = d, n0 = n;
    const double pre = compute_batch_loss(state, b, d0, n0).parts.total;
    train_one_batch(state, b);
    Rng d1 = d, n1 = n;
    const double post = compute_batch_loss(state, b, d1, n1).parts.total;
    CHECK(post < pre);
  }
}

TEST_CASE("a training step never touches the teacher") {
  Dataset ds = tiny_dataset();
  TrainState state(tiny_config(), 2);
  state.begin_next_task(2);
  const auto teacher_before = flat_params(state.teacher->model());
  Batch b = batch_of(ds, {0, 21, 40, 61}, {0, 1, 2, 3});
  for (int i = 0; i < 3; ++i) train_one_batch(state, b);
  CHECK(flat_params(state.teacher->model()) == teacher_before);
  CHECK(flat_params(state.model) != teacher_before);
}

TEST_CASE("head expansion leaves distillation terms at their floor") {
  Dataset ds = tiny_dataset();
  EngineConfig cfg = tiny_config(0.0);
  TaskSequence seq = make_task_sequence(ds, 2, 0);
  std::size_t checked = 0;
  RunHooks hooks;
  hooks.on_task_start = [&](const TrainState& state, const Dataset& data) {
    if (state.task == 0) return;
    const auto& labels = seq.tasks[state.task];
    std::vector<std::size_t> idx(seq.train_by_class[labels[0]].begin(),
                                 seq.train_by_class[labels[0]].begin() + 8);
    Batch b{data.gather(idx), std::vector<std::size_t>(8, 0)};
    Rng d(1), n(2);
    const LossBreakdown p = compute_batch_loss(state, b, d, n).parts;
    CHECK(p.l_a == 0.0);
    CHECK(p.l_m == 0.0);
    const Tensor q = softmax_temperature(state.teacher->forward(b.inputs).unified_logits(), 2.0);
    double entropy = 0;
    for (double v : q.data()) entropy -= v * std::log(v);
    CHECK(std::abs(p.l_d - entropy / 8) < 1e-10);
    const ForwardOutput s = state.model.forward(b.inputs);
    const ForwardOutput t = state.teacher->forward(b.inputs);
    const Tensor tl = t.unified_logits();
    CHECK(std::vector<double>(s.logits_p.data().begin(), s.logits_p.data().end()) ==
          std::vector<double>(tl.data().begin(), tl.data().end()));
    ++checked;
  };
  run_sequence(ds, seq, cfg, hooks);
  CHECK(checked == 2);
}

TEST_CASE("identical seeds give identical runs") {
  Dataset ds = tiny_dataset();
  TaskSequence seq = make_task_sequence(ds, 2, 0);
  const RunResult a = run_sequence(ds, seq, tiny_config());
  const RunResult b = run_sequence(ds, seq, tiny_config());
  CHECK(a.matrix == b.matrix);
  CHECK(flat_params(*a.model) == flat_params(*b.model));
  REQUIRE(a.batches.size() == b.batches.size());
  for (std::size_t i = 0; i < a.batches.size(); ++i) CHECK(a.batches[i].loss.total == b.batches[i].loss.total);
  EngineConfig other = tiny_config();
  other.seed = 4;
  CHECK(flat_params(*run_sequence(ds, seq, other).model) != flat_params(*a.model));
}

TEST_CASE("single-task run") {
  Dataset ds = tiny_dataset(2, 20);
  TaskSequence seq = make_task_sequence(ds, 2, 0);
  const RunResult r = run_sequence(ds, seq, tiny_config());
  CHECK(r.matrix.steps() == 1);
  for (const auto& b : r.batches) {
    CHECK(b.loss.l_d == 0.0);
    CHECK(b.loss.l_a == 0.0);
    CHECK(b.loss.l_m == 0.0);
    CHECK(b.loss.total == doctest::Approx(b.loss.l_c + 0.5 * b.loss.l_ca).epsilon(1e-14));
  }
}

TEST_CASE("configuration errors") {
  Dataset ds = tiny_dataset();
  TaskSequence empty;
  CHECK_THROWS_AS(run_sequence(ds, empty, tiny_config()), ConfigError);
  EngineConfig bad = tiny_config();
  bad.optimizer.batch_size = 0;
  CHECK_THROWS_AS(TrainState(bad, 2), ParameterError);
  bad = tiny_config();
  bad.optimizer.learning_rate = 0.0;
  CHECK_THROWS_AS(TrainState(bad, 2), ParameterError);
}

TEST_CASE("evaluation on a constructed separable pair") {
  EngineConfig cfg = tiny_config(0.0);
  TrainState state(cfg, 2);
  IncrementalModel& m = state.model;
  for (auto& [n, p] : m.parameters())
    for (double& v : p.mutable_data()) v = 0.0;
  // Centre tap routes channel 0 through every block; head reads feature 0.
  for (ConvBlock& b : m.blocks) b.weight.mutable_data()[4] = 1.0;
  m.head_c.weight.mutable_data()[0] = 1.0;
  m.head_c.bias.mutable_data()[1] = 0.5;
  Tensor x({2, 1, 8, 8}, std::vector<double>(128, 1.0));
  for (std::size_t i = 64; i < 128; ++i) x.mutable_data()[i] = -1.0;
  const std::vector<std::size_t> cols{0, 1};
  CHECK(accuracy(m, x, cols) == 1.0);
}

TEST_CASE("random weights score at chance on label-free inputs") {
  EngineConfig cfg = tiny_config(0.0);
  cfg.seed = 11;
  TrainState state(cfg, 5);
  Rng rng(4);
  const std::size_t n = 10000;
  Tensor x = sample_standard_normal(rng, {n, 1, 8, 8});
  std::vector<std::size_t> cols(n);
  for (std::size_t i = 0; i < n; ++i) cols[i] = i % 5;
  const double a = accuracy(state.model, x, cols);
  CHECK(std::abs(a - 0.2) <= 0.02);
}

TEST_CASE("evaluation is pure and rejects unseen classes") {
  Dataset ds = tiny_dataset();
  TaskSequence seq = make_task_sequence(ds, 2, 0);
  TrainState state(tiny_config(), 2);
  const auto before = flat_params(state.model);
  const auto a = evaluate(state.model, ds, seq, seq.tasks[0], 0);
  const auto b = evaluate(state.model, ds, seq, seq.tasks[0], 0);
  CHECK(a == b);
  CHECK(flat_params(state.model) == before);
  CHECK_THROWS(evaluate(state.model, ds, seq, seq.tasks[0], 1));
}

TEST_CASE("predictive uncertainty") {
  Rng rng(5);
  Tensor x = uniform(rng, {3, 1, 8, 8}, -1, 1);
  TrainState none(tiny_config(0.0), 3);
  const auto u0 = predictive_uncertainty(none.model, x, 20, rng);
  for (double v : u0.epistemic.data()) CHECK(v == 0.0);
  for (double v : u0.aleatoric.data()) CHECK(v > 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) s += u0.mean_probs[i * 3 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  TrainState some(tiny_config(0.3), 3);
  const auto u1 = predictive_uncertainty(some.model, x, 50, rng);
  for (double v : u1.epistemic.data()) CHECK(v > 0.0);
  CHECK_THROWS_AS(predictive_uncertainty(some.model, x, 1, rng), ParameterError);
}
