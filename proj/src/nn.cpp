#include "evln/nn.hpp"

#include <algorithm>
#include <cmath>

#include "evln/errors.hpp"

namespace evln {

void init_uniform_fan_in(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double a = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (double& v : t.mutable_data()) v = -a + 2.0 * a * rng.uniform();
}

// ---------------------------------------------------------------------------

DenseLayer::DenseLayer(std::size_t in, std::size_t out)
    : weight(Tensor::zeros({out, in})), bias(Tensor::zeros({out})) {}

Tensor DenseLayer::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in()) {
    throw DimensionError("dense layer expects [N x " + std::to_string(in()) +
                         "], got " + shape_str(x.shape()));
  }
  return add(matmul(x, transpose(weight)), bias);
}

void DenseLayer::init(Rng& rng) {
  init_uniform_fan_in(weight, in(), rng);
  init_uniform_fan_in(bias, in(), rng);
}

// ---------------------------------------------------------------------------

DropoutLayer::DropoutLayer(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must lie in [0, 1), got " +
                         std::to_string(rate));
  }
}

Tensor DropoutLayer::forward(const Tensor& x, DropoutMode mode, Rng& rng) const {
  if (mode == DropoutMode::off) return x;
  const double keep_scale = 1.0 / (1.0 - rate_);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < rate_ ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------

SelfAttentionStage::SelfAttentionStage(std::size_t channels,
                                       std::size_t key_channels,
                                       std::size_t value_channels)
    : query(Tensor::zeros({key_channels, channels, 1, 1})),
      key(Tensor::zeros({key_channels, channels, 1, 1})),
      value(Tensor::zeros({value_channels, channels, 1, 1})),
      out_proj(Tensor::zeros({channels, value_channels, 1, 1})),
      gamma(Tensor::zeros({1})) {}

SelfAttentionStage::Result SelfAttentionStage::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != channels()) {
    throw DimensionError("attention stage expects " + std::to_string(channels()) +
                         " channels, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t p = h * w;
  const std::size_t ck = key_channels(), cv = value_channels();

  Tensor xf = reshape(x, {n, c, p});
  Tensor q = bmm(reshape(query, {1, ck, c}), xf);
  Tensor k = bmm(reshape(key, {1, ck, c}), xf);
  Tensor v = bmm(reshape(value, {1, cv, c}), xf);
  Tensor energy =
      scale(bmm(transpose_last2(q), k), 1.0 / std::sqrt(static_cast<double>(ck)));
  Tensor beta = softmax_temperature(energy, 1.0);             // [N, P, P]
  Tensor mixed = bmm(v, transpose_last2(beta));               // [N, Cv, P]
  Tensor o = bmm(reshape(out_proj, {1, c, cv}), mixed);       // [N, C, P]
  Tensor attended = reshape(o, {n, c, h, w});
  Tensor output = add(x, mul(attended, gamma));
  return {output, attended, beta};
}

void SelfAttentionStage::init(Rng& rng) {
  init_uniform_fan_in(query, channels(), rng);
  init_uniform_fan_in(key, channels(), rng);
  init_uniform_fan_in(value, channels(), rng);
  init_uniform_fan_in(out_proj, value_channels(), rng);
  gamma.mutable_data()[0] = 0.0;
}

Tensor attention_map(const SelfAttentionStage& stage, const Tensor& x) {
  return stage.forward(x).attended;
}

// ---------------------------------------------------------------------------

Tensor VarianceHead::forward(const Tensor& features) const {
  return softplus(linear.forward(features));
}

Tensor ForwardOutput::unified_logits() const {
  return concat(logits_p, logits_c, 1);
}

Tensor ForwardOutput::unified_variance() const { return concat(var_p, var_c, 1); }

// ---------------------------------------------------------------------------

namespace {

std::size_t reduced(std::size_t c, std::size_t divisor) {
  return std::max<std::size_t>(1, c / std::max<std::size_t>(divisor, 1));
}

}  // namespace

IncrementalModel::IncrementalModel(const ModelConfig& config,
                                   std::size_t first_task_classes, Rng& rng)
    : dropout(config.dropout_rate), config_(config) {
  if (config.image_size == 0 || config.image_size % 8 != 0) {
    throw ParameterError("image size must be a positive multiple of 8, got " +
                         std::to_string(config.image_size));
  }
  if (first_task_classes == 0) throw ParameterError("first task has no classes");
  std::size_t in = config.in_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t f = config.widths[s];
    blocks[s].weight = Tensor::zeros({f, in, 3, 3});
    blocks[s].bias = Tensor::zeros({f});
    blocks[s].attention = SelfAttentionStage(f, reduced(f, config.attn_key_divisor),
                                             reduced(f, config.attn_key_divisor));
    in = f;
  }
  head_p = DenseLayer(in, 0);
  head_c = DenseLayer(in, first_task_classes);
  var_p = VarianceHead(in, 0);
  var_c = VarianceHead(in, first_task_classes);
  init_parameters(rng);
}

void IncrementalModel::init_parameters(Rng& rng) {
  for (ConvBlock& b : blocks) {
    const std::size_t fan_in = b.weight.dim(1) * 9;
    init_uniform_fan_in(b.weight, fan_in, rng);
    init_uniform_fan_in(b.bias, fan_in, rng);
    b.attention.init(rng);
  }
  head_p.init(rng);
  head_c.init(rng);
  var_p.linear.init(rng);
  var_c.linear.init(rng);
}

ForwardOutput IncrementalModel::forward(const Tensor& x) const {
  Rng unused(0);
  return forward(x, DropoutMode::off, unused);
}

ForwardOutput IncrementalModel::forward(const Tensor& x, DropoutMode mode,
                                        Rng& rng) const {
  const std::size_t sz = config_.image_size;
  if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != sz ||
      x.dim(3) != sz) {
    throw DimensionError("model expects [N x " + std::to_string(config_.in_channels) +
                         " x " + std::to_string(sz) + " x " + std::to_string(sz) +
                         "], got " + shape_str(x.shape()));
  }
  ForwardOutput out;
  Tensor h = x;
  for (std::size_t s = 0; s < 3; ++s) {
    const ConvBlock& b = blocks[s];
    h = add(conv2d(h, b.weight, 1, 1), reshape(b.bias, {b.bias.dim(0), 1, 1}));
    h = relu(h);
    SelfAttentionStage::Result att = b.attention.forward(h);
    out.attn[s] = att.attended;
    h = dropout.forward(att.output, mode, rng);
    h = avg_pool2d(h, 2);
  }
  const std::size_t n = h.dim(0), c = h.dim(1);
  Tensor features = mean(reshape(h, {n, c, h.dim(2) * h.dim(3)}), 2);
  out.logits_p = head_p.forward(features);
  out.logits_c = head_c.forward(features);
  out.var_p = var_p.forward(features);
  out.var_c = var_c.forward(features);
  return out;
}

namespace {

DenseLayer stack_rows(const DenseLayer& top, const DenseLayer& bottom) {
  DenseLayer merged;
  merged.weight = concat(top.weight.clone(), bottom.weight.clone(), 0);
  merged.bias = concat(top.bias.clone(), bottom.bias.clone(), 0);
  return merged;
}

}  // namespace

IncrementalModel IncrementalModel::expand_heads(std::size_t new_classes,
                                                Rng& rng) const {
  if (new_classes == 0) throw ParameterError("expand_heads needs >= 1 new class");
  NoGradGuard guard;
  IncrementalModel next = clone();
  next.head_p = stack_rows(head_p, head_c);
  next.var_p.linear = stack_rows(var_p.linear, var_c.linear);
  next.head_c = DenseLayer(feature_dim(), new_classes);
  next.head_c.init(rng);
  next.var_c = VarianceHead(feature_dim(), new_classes);
  next.var_c.linear.init(rng);
  return next;
}

IncrementalModel IncrementalModel::clone() const {
  IncrementalModel copy;
  copy.config_ = config_;
  copy.dropout = dropout;
  for (std::size_t s = 0; s < 3; ++s) {
    const ConvBlock& b = blocks[s];
    ConvBlock& d = copy.blocks[s];
    d.weight = b.weight.clone();
    d.bias = b.bias.clone();
    d.attention.query = b.attention.query.clone();
    d.attention.key = b.attention.key.clone();
    d.attention.value = b.attention.value.clone();
    d.attention.out_proj = b.attention.out_proj.clone();
    d.attention.gamma = b.attention.gamma.clone();
  }
  auto copy_dense = [](const DenseLayer& src) {
    DenseLayer d;
    d.weight = src.weight.clone();
    d.bias = src.bias.clone();
    return d;
  };
  copy.head_p = copy_dense(head_p);
  copy.head_c = copy_dense(head_c);
  copy.var_p.linear = copy_dense(var_p.linear);
  copy.var_c.linear = copy_dense(var_c.linear);
  return copy;
}

NamedTensors IncrementalModel::parameters() const {
  NamedTensors params;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string prefix = "block" + std::to_string(s + 1) + ".";
    const ConvBlock& b = blocks[s];
    params.emplace_back(prefix + "conv.weight", b.weight);
    params.emplace_back(prefix + "conv.bias", b.bias);
    params.emplace_back(prefix + "attn.query", b.attention.query);
    params.emplace_back(prefix + "attn.key", b.attention.key);
    params.emplace_back(prefix + "attn.value", b.attention.value);
    params.emplace_back(prefix + "attn.out", b.attention.out_proj);
    params.emplace_back(prefix + "attn.gamma", b.attention.gamma);
  }
  params.emplace_back("head_p.weight", head_p.weight);
  params.emplace_back("head_p.bias", head_p.bias);
  params.emplace_back("head_c.weight", head_c.weight);
  params.emplace_back("head_c.bias", head_c.bias);
  params.emplace_back("var_p.weight", var_p.linear.weight);
  params.emplace_back("var_p.bias", var_p.linear.bias);
  params.emplace_back("var_c.weight", var_c.linear.weight);
  params.emplace_back("var_c.bias", var_c.linear.bias);
  return params;
}

void IncrementalModel::set_requires_grad(bool on) {
  for (auto& [name, t] : parameters()) t.set_requires_grad(on);
}

void IncrementalModel::load_parameters(const NamedTensors& values) {
  NamedTensors params = parameters();
  if (values.size() != params.size()) {
    throw FormatError("expected " + std::to_string(params.size()) +
                      " parameters, got " + std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, dst] = params[i];
    const auto& [src_name, src] = values[i];
    if (name != src_name || dst.shape() != src.shape()) {
      throw FormatError("parameter mismatch at " + name + ": got " + src_name +
                        " " + shape_str(src.shape()) + ", expected " +
                        shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

// ---------------------------------------------------------------------------

ModelSnapshot::ModelSnapshot(const IncrementalModel& model) : model_(model.clone()) {
  model_.set_requires_grad(false);
}

ForwardOutput ModelSnapshot::forward(const Tensor& x) const {
  NoGradGuard guard;
  return model_.forward(x);
}

ModelSnapshot snapshot(const IncrementalModel& model) { return ModelSnapshot(model); }

ModelSnapshot snapshot(const ModelSnapshot& snap) { return ModelSnapshot(snap.model()); }

}  // namespace evln
