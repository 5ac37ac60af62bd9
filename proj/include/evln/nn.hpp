#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "evln/rng.hpp"
#include "evln/tensor.hpp"

namespace evln {

enum class DropoutMode { train, mc_eval, off };

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Uniform fan-in initialisation: U(-a, a) with a = sqrt(1 / fan_in).
void init_uniform_fan_in(Tensor& t, std::size_t fan_in, Rng& rng);

/// Fully connected layer y = x W^T + b, weight [out x in], bias [out].
/// out may be 0 (the old-class head before any task has finished).
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out);

  Tensor forward(const Tensor& x) const;
  void init(Rng& rng);

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }

  Tensor weight = Tensor::zeros({0, 0});
  Tensor bias = Tensor::zeros({0});
};

/// Inverted dropout. In train and mc_eval modes each unit is zeroed with
/// probability rate and survivors are scaled by 1 / (1 - rate); in off mode
/// the input is returned untouched.
class DropoutLayer {
 public:
  explicit DropoutLayer(double rate = 0.0);

  Tensor forward(const Tensor& x, DropoutMode mode, Rng& rng) const;
  double rate() const { return rate_; }

 private:
  double rate_;
};

/// Spatial self-attention over a feature map, merged back through a learned
/// residual gain gamma.
///
/// With xf the [C x P] map of one sample (P = H*W positions):
///   q = Wq xf, k = Wk xf          [Ck x P]
///   v = Wv xf                     [Cv x P]
///   beta[i][j] = softmax_j(q_i . k_j / sqrt(Ck))
///   o[:, i] = Wo * sum_j beta[i][j] v[:, j]   [C x P]
///   output = xf + gamma * o
/// The attended map o (pre-residual) is what gets distilled.
class SelfAttentionStage {
 public:
  struct Result {
    Tensor output;    // x + gamma * o
    Tensor attended;  // o, same shape as x
    Tensor weights;   // beta, [N x P x P]
  };

  SelfAttentionStage() = default;
  SelfAttentionStage(std::size_t channels, std::size_t key_channels,
                     std::size_t value_channels);

  Result forward(const Tensor& x) const;
  void init(Rng& rng);

  std::size_t channels() const { return query.dim(1); }
  std::size_t key_channels() const { return query.dim(0); }
  std::size_t value_channels() const { return value.dim(0); }

  // 1x1 convolution weights.
  Tensor query;     // [Ck x C x 1 x 1]
  Tensor key;       // [Ck x C x 1 x 1]
  Tensor value;     // [Cv x C x 1 x 1]
  Tensor out_proj;  // [C x Cv x 1 x 1]
  Tensor gamma = Tensor::zeros({1});
};

// The pre-residual attended map o of a stage.
Tensor attention_map(const SelfAttentionStage& stage, const Tensor& x);

/// Linear layer followed by softplus; outputs the per-logit variance.
class VarianceHead {
 public:
  VarianceHead() = default;
  VarianceHead(std::size_t in, std::size_t out) : linear(in, out) {}

  Tensor forward(const Tensor& features) const;
  std::size_t out() const { return linear.out(); }

  DenseLayer linear;
};

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t image_size = 16;  // square inputs; must be divisible by 8
  std::array<std::size_t, 3> widths{16, 32, 64};
  double dropout_rate = 0.1;
  // Query/key width = max(1, C / attn_key_divisor); value width likewise.
  std::size_t attn_key_divisor = 2;
};

struct ForwardOutput {
  Tensor logits_p;  // [N x |C_prev|]
  Tensor logits_c;  // [N x |C_t|]
  Tensor var_p;     // [N x |C_prev|], > 0
  Tensor var_c;     // [N x |C_t|], > 0
  std::array<Tensor, 3> attn;

  // Old-class logits followed by new-class logits.
  Tensor unified_logits() const;
  Tensor unified_variance() const;
};

struct ConvBlock {
  Tensor weight;  // [F x C x 3 x 3]
  Tensor bias;    // [F]
  SelfAttentionStage attention;
};

/// Feature extractor with three (conv 3x3 -> relu -> self-attention ->
/// dropout -> 2x2 average pool) blocks, global average pooling, and two
/// classifier heads with matching variance heads: head_p/var_p cover the
/// classes of earlier tasks, head_c/var_c the classes of the current task.
class IncrementalModel {
 public:
  IncrementalModel(const ModelConfig& config, std::size_t first_task_classes,
                   Rng& rng);

  ForwardOutput forward(const Tensor& x, DropoutMode mode, Rng& rng) const;
  ForwardOutput forward(const Tensor& x) const;  // dropout off

  // Re-draws every parameter from the fan-in scheme; gammas are set to 0.
  void init_parameters(Rng& rng);

  // Returns a deep copy whose old-class head is the concatenation of this
  // model's head_p and head_c rows, with a freshly initialised head_c for
  // new_classes. Variance heads are treated the same way.
  IncrementalModel expand_heads(std::size_t new_classes, Rng& rng) const;

  IncrementalModel clone() const;

  // Parameter handles in a fixed order with stable names.
  NamedTensors parameters() const;
  void set_requires_grad(bool on);
  // Copies values from named tensors; names and shapes must match exactly.
  void load_parameters(const NamedTensors& values);

  const ModelConfig& config() const { return config_; }
  std::size_t prev_classes() const { return head_p.out(); }
  std::size_t new_classes() const { return head_c.out(); }
  std::size_t total_classes() const { return prev_classes() + new_classes(); }
  std::size_t feature_dim() const { return config_.widths[2]; }

  std::array<ConvBlock, 3> blocks;
  DropoutLayer dropout;
  DenseLayer head_p;
  DenseLayer head_c;
  VarianceHead var_p;
  VarianceHead var_c;

 private:
  IncrementalModel() = default;
  ModelConfig config_;
};

/// Frozen deep copy of a model, used as the distillation teacher. Its
/// parameters never participate in gradient computation.
class ModelSnapshot {
 public:
  explicit ModelSnapshot(const IncrementalModel& model);

  // Dropout off, nothing recorded on the tape.
  ForwardOutput forward(const Tensor& x) const;
  const IncrementalModel& model() const { return model_; }
  std::size_t classes() const { return model_.total_classes(); }

 private:
  IncrementalModel model_;
};

ModelSnapshot snapshot(const IncrementalModel& model);
ModelSnapshot snapshot(const ModelSnapshot& snap);

}  // namespace evln
