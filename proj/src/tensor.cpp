#include "evln/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "evln/errors.hpp"

namespace evln {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("ragged tensor literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

std::span<double> Tensor::mutable_grad() const {
  if (impl_->grad.size() != impl_->data.size()) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------
// Tape

void Tape::record(Tensor output, BackwardFn backward) {
  nodes_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.requires_grad()) return;
  Tensor seed = loss;
  for (double& g : seed.mutable_grad()) g += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

void Tape::reset() { nodes_.clear(); }

Tape& active_tape() {
  thread_local Tape tape;
  return tape;
}

NoGradGuard::NoGradGuard() : previous_(active_tape().recording()) {
  active_tape().set_recording(false);
}

NoGradGuard::~NoGradGuard() { active_tape().set_recording(previous_); }

void backward(const Tensor& loss) {
  active_tape().backward(loss);
  active_tape().reset();
}

// ---------------------------------------------------------------------------
// Internal helpers

namespace {

bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape().recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool tracked) {
  return Tensor(std::move(shape), std::move(data), tracked);
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t offset = r - in.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    strides[d + offset] = in[d] == 1 ? 0 : s;
    s *= in[d];
  }
  return strides;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shapes(a, b);
  p.stride_a = aligned_strides(a, p.out);
  p.stride_b = aligned_strides(b, p.out);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void broadcast_loop(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_numel(p.out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = p.out[r - 1];
  if (n == 0 || inner == 0) return;
  const std::size_t sa = p.stride_a[r - 1];
  const std::size_t sb = p.stride_b[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, oa + k * sa, ob + k * sb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += p.stride_a[d];
      ob += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      oa -= p.stride_a[d] * p.out[d];
      ob -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename Dfa, typename Dfb>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa, Dfb dfb) {
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(shape_numel(plan.out));
  auto ad = a.data();
  auto bd = b.data();
  broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(ad[ia], bd[ib]);
  });
  const bool tracked = tracks({&a, &b});
  Tensor result = make_output(plan.out, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [a, b, result, plan, dfa, dfb]() mutable {
      auto g = result.grad();
      auto ad = a.data();
      auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          ga[ia] += g[o] * dfa(ad[ia], bd[ib]);
        });
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          gb[ib] += g[o] * dfb(ad[ia], bd[ib]);
        });
      }
    });
  }
  return result;
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Df>
Tensor unary_op(const Tensor& x, Fwd fwd, Df df) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  const bool tracked = tracks({&x});
  Tensor result = make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, df]() mutable {
      auto g = result.grad();
      auto xd = x.data();
      auto yd = result.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xd[i], yd[i]);
    });
  }
  return result;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose_block(const double* src, double* dst, std::size_t r, std::size_t c) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += kTile) {
    const std::size_t i1 = std::min(r, i0 + kTile);
    for (std::size_t j0 = 0; j0 < c; j0 += kTile) {
      const std::size_t j1 = std::min(c, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * r + i] = src[i * c + j];
      }
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  transpose_block(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t ea = d < r - a.size() ? 1 : a[d - (r - a.size())];
    const std::size_t eb = d < r - b.size() ? 1 : b[d - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast shapes " + shape_str(a) +
                           " and " + shape_str(b));
    }
    out[d] = ea == 1 ? eb : ea;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      x, [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0 || std::isnan(v)) {
      throw DomainError("log of negative value " + std::to_string(v));
    }
  }
  return unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0 || std::isnan(v)) {
      throw DomainError("sqrt of negative value " + std::to_string(v));
    }
  }
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        return v > 20.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](double v, double) {
        // logistic sigmoid, branch-stable
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary_op(
      x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double v, double) { return v < floor ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  auto xd = x.data();
  double acc = 0.0;
  for (double v : xd) acc += v;
  const bool tracked = tracks({&x});
  Tensor result = make_output({}, {acc}, tracked);
  if (tracked) {
    active_tape().record(result, [x, result]() mutable {
      const double g = result.grad()[0];
      for (double& gx : x.mutable_grad()) gx += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xd = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* src = xd.data() + (o * s.len + l) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  const bool tracked = tracks({&x});
  Tensor result =
      make_output(reduced_shape(x.shape(), axis, keepdim), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, s]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.len; ++l) {
          double* dst = gx.data() + (o * s.len + l) * s.inner;
          const double* src = g.data() + o * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t len = split_axis(x.shape(), axis).len;
  if (len == 0) throw DimensionError("mean over empty axis");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor logsumexp(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) throw DimensionError("logsumexp over empty axis");
  auto xd = x.data();
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) {
        mx = std::max(mx, xd[(o * s.len + l) * s.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        acc += std::exp(xd[(o * s.len + l) * s.inner + i] - mx);
      }
      out[o * s.inner + i] = mx + std::log(acc);
    }
  }
  const bool tracked = tracks({&x});
  Tensor result =
      make_output(reduced_shape(x.shape(), axis, keepdim), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, s]() mutable {
      auto g = result.grad();
      auto y = result.data();
      auto xd = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t r = o * s.inner + i;
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t k = (o * s.len + l) * s.inner + i;
            gx[k] += g[r] * std::exp(xd[k] - y[r]);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  const bool tracked = tracks({&x});
  Tensor result = make_output(std::move(shape), std::move(data), tracked);
  if (tracked) {
    active_tape().record(result, [x, result]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat axis out of range");
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) {
      throw DimensionError("concat rank mismatch: " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(probe));
    }
    for (std::size_t d = 0; d < probe.size(); ++d) {
      if (d != axis && probe[d] != parts[0].shape()[d]) {
        throw DimensionError("concat extent mismatch: " +
                             shape_str(parts[0].shape()) + " vs " + shape_str(probe));
      }
    }
    out_shape[axis] += probe[axis];
  }
  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[axis] * so.inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(pd.data() + o * chunk, chunk,
                  out.data() + o * so.len * so.inner + offset);
    }
    offset += chunk;
  }
  bool tracked = false;
  if (active_tape().recording()) {
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
  }
  Tensor result = make_output(out_shape, std::move(out), tracked);
  if (tracked) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    active_tape().record(result, [inputs, offsets, result, so, axis]() mutable {
      auto g = result.grad();
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor& p = inputs[k];
        if (!p.requires_grad()) continue;
        const std::size_t chunk = p.shape()[axis] * so.inner;
        auto gp = p.mutable_grad();
        for (std::size_t o = 0; o < so.outer; ++o) {
          const double* src = g.data() + o * so.len * so.inner + offsets[k];
          double* dst = gp.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Tensor parts[] = {a, b};
  return concat(std::span<const Tensor>(parts), axis);
}

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw DimensionError("take_rows on a scalar");
  const std::size_t n = x.dim(0);
  const std::size_t row = n ? x.numel() / n : 0;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  auto xd = x.data();
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  for (std::size_t r = 0; r < picked.size(); ++r) {
    if (picked[r] >= n) {
      throw DimensionError("row index " + std::to_string(picked[r]) +
                           " out of range for shape " + shape_str(x.shape()));
    }
    std::copy_n(xd.data() + picked[r] * row, row, out.data() + r * row);
  }
  const bool tracked = tracks({&x});
  Tensor result = make_output(std::move(out_shape), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, picked, row]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < picked.size(); ++r) {
        for (std::size_t i = 0; i < row; ++i) gx[picked[r] * row + i] += g[r * row + i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool tracked = tracks({&a, &b});
  Tensor result = make_output({m, n}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [a, b, result, m, k, n]() mutable {
      auto g = result.grad();
      if (a.requires_grad()) {
        gemm_nt(g.data(), b.data().data(), a.mutable_grad().data(), m, n, k);
      }
      if (b.requires_grad()) {
        gemm_tn(a.data().data(), g.data(), b.mutable_grad().data(), k, m, n);
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  }
  const bool tracked = tracks({&x});
  Tensor result = make_output({c, r}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, r, c]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
      }
    });
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t ba = a.dim(0), bb = b.dim(0);
  const std::size_t m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(1) != k || (ba != bb && ba != 1 && bb != 1)) {
    throw DimensionError("bmm shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = std::max(ba, bb);
  const std::size_t sa = ba == 1 ? 0 : m * k;
  const std::size_t sb = bb == 1 ? 0 : k * n;
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(a.data().data() + i * sa, b.data().data() + i * sb,
            out.data() + i * m * n, m, k, n);
  }
  const bool tracked = tracks({&a, &b});
  Tensor result = make_output({batch, m, n}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [a, b, result, batch, m, k, n, sa, sb]() mutable {
      auto g = result.grad();
      if (a.requires_grad()) {
        double* ga = a.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          gemm_nt(g.data() + i * m * n, b.data().data() + i * sb, ga + i * sa, m, n, k);
        }
      }
      if (b.requires_grad()) {
        double* gb = b.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          gemm_tn(a.data().data() + i * sa, g.data() + i * m * n, gb + i * sb, k, m, n);
        }
      }
    });
  }
  return result;
}

Tensor transpose_last2(const Tensor& x) {
  require_rank(x, 3, "transpose_last2");
  const std::size_t batch = x.dim(0), r = x.dim(1), c = x.dim(2);
  auto xd = x.data();
  std::vector<double> out(batch * r * c);
  for (std::size_t b = 0; b < batch; ++b) {
    transpose_block(xd.data() + b * r * c, out.data() + b * r * c, r, c);
  }
  const bool tracked = tracks({&x});
  Tensor result = make_output({batch, c, r}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, batch, r, c]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      std::vector<double> back(r * c);
      for (std::size_t b = 0; b < batch; ++b) {
        transpose_block(g.data() + b * r * c, back.data(), c, r);
        for (std::size_t i = 0; i < r * c; ++i) gx[b * r * c + i] += back[i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax_temperature(const Tensor& q, double tau) {
  if (!(tau > 0.0)) {
    throw ParameterError("softmax temperature must be > 0, got " +
                         std::to_string(tau));
  }
  if (q.rank() == 0) throw DimensionError("softmax of a scalar");
  const std::size_t c = q.shape().back();
  const std::size_t rows = c ? q.numel() / c : 0;
  auto qd = q.data();
  std::vector<double> out(q.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = qd.data() + r * c;
    double* dst = out.data() + r * c;
    double mx = src[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = std::exp((src[j] - mx) / tau);
      z += dst[j];
    }
    for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
  }
  const bool tracked = tracks({&q});
  Tensor result = make_output(q.shape(), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [q, result, rows, c, tau]() mutable {
      auto g = result.grad();
      auto p = result.data();
      auto gq = q.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * p[r * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gq[r * c + j] += p[r * c + j] * (g[r * c + j] - dot) / tau;
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& q, double tau) {
  if (!(tau > 0.0)) {
    throw ParameterError("softmax temperature must be > 0, got " +
                         std::to_string(tau));
  }
  if (q.rank() == 0) throw DimensionError("log_softmax of a scalar");
  const std::size_t c = q.shape().back();
  const std::size_t rows = c ? q.numel() / c : 0;
  auto qd = q.data();
  std::vector<double> out(q.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = qd.data() + r * c;
    double* dst = out.data() + r * c;
    double mx = src[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp((src[j] - mx) / tau);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) dst[j] = (src[j] - mx) / tau - lz;
  }
  const bool tracked = tracks({&q});
  Tensor result = make_output(q.shape(), std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [q, result, rows, c, tau]() mutable {
      auto g = result.grad();
      auto y = result.data();
      auto gq = q.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gq[r * c + j] += (g[r * c + j] - std::exp(y[r * c + j]) * gsum) / tau;
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, ho, wo;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
              static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 &&
                                ii < static_cast<std::ptrdiff_t>(g.h) &&
                                jj < static_cast<std::ptrdiff_t>(g.w);
            row[oi * g.wo + oj] =
                inside ? x[(ch * g.h + static_cast<std::size_t>(ii)) * g.w +
                           static_cast<std::size_t>(jj)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
              static_cast<std::ptrdiff_t>(g.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                static_cast<std::ptrdiff_t>(g.pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(ch * g.h + static_cast<std::size_t>(ii)) * g.w +
               static_cast<std::size_t>(jj)] += row[oi * g.wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride < 1) throw ParameterError("conv2d stride must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2),
             w.dim(3), stride, pad, 0, 0};
  if (w.dim(1) != g.c) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                         ", weight " + shape_str(w.shape()));
  }
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw DimensionError("conv2d kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  const std::size_t ckk = g.ckk(), p = g.positions();
  auto cols = std::make_shared<std::vector<double>>(g.n * ckk * p);
  std::vector<double> out(g.n * g.f * p, 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (std::size_t i = 0; i < g.n; ++i) {
    double* ci = cols->data() + i * ckk * p;
    im2col(xd + i * g.c * g.h * g.w, g, ci);
    gemm_nn(wd, ci, out.data() + i * g.f * p, g.f, ckk, p);
  }
  const bool tracked = tracks({&x, &w});
  Tensor result = make_output({g.n, g.f, g.ho, g.wo}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, w, result, g, cols]() mutable {
      auto gout = result.grad();
      const std::size_t ckk = g.ckk(), p = g.positions();
      if (w.requires_grad()) {
        double* gw = w.mutable_grad().data();
        for (std::size_t i = 0; i < g.n; ++i) {
          gemm_nt(gout.data() + i * g.f * p, cols->data() + i * ckk * p, gw, g.f,
                  p, ckk);
        }
      }
      if (x.requires_grad()) {
        double* gx = x.mutable_grad().data();
        std::vector<double> dcols(ckk * p);
        for (std::size_t i = 0; i < g.n; ++i) {
          std::fill(dcols.begin(), dcols.end(), 0.0);
          gemm_tn(w.data().data(), gout.data() + i * g.f * p, dcols.data(), ckk,
                  g.f, p);
          col2im_add(dcols.data(), g, gx + i * g.c * g.h * g.w);
        }
      }
    });
  }
  return result;
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw DimensionError("avg_pool2d window " + std::to_string(k) +
                         " does not tile input " + shape_str(x.shape()));
  }
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  auto xd = x.data();
  std::vector<double> out(n * c * ho * wo, 0.0);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        out[(plane * ho + i / k) * wo + j / k] += xd[(plane * h + i) * w + j] * inv;
      }
    }
  }
  const bool tracked = tracks({&x});
  Tensor result = make_output({n, c, ho, wo}, std::move(out), tracked);
  if (tracked) {
    active_tape().record(result, [x, result, n, c, h, w, k, ho, wo, inv]() mutable {
      auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t plane = 0; plane < n * c; ++plane) {
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            gx[(plane * h + i) * w + j] += g[(plane * ho + i / k) * wo + j / k] * inv;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Random tensors

Tensor sample_standard_normal(Rng& rng, const Shape& shape) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.normal();
  return Tensor(shape, std::move(data));
}

Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = lo + (hi - lo) * rng.uniform();
  return Tensor(shape, std::move(data));
}

}  // namespace evln
