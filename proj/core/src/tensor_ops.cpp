#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "egformer/tensor.hpp"

namespace egf {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

NodePtr make_output(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

Tape* tape_for(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = TapeScope::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

Tensor record(Tape* tape, const char* op, std::vector<NodePtr> inputs, NodePtr out,
              std::function<void()> backward) {
  if (tape) {
    Tape::Record r;
    r.op = op;
    r.inputs = std::move(inputs);
    r.output = out;
    r.backward = std::move(backward);
    tape->push(std::move(r));
  }
  return Tensor(std::move(out));
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> strides_aligned(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t axis = s.size() - 1 - i;
    const std::size_t oaxis = r - 1 - i;
    st[oaxis] = (s[axis] == 1 && out[oaxis] != 1) ? 0 : acc;
    acc *= s[axis];
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                  " with " + shape_str(b));
    }
    out[r - 1 - i] = std::max(ea, eb);
  }
  return {out, strides_aligned(a, out), strides_aligned(b, out)};
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& fn) {
  const std::size_t r = bc.out.size();
  const std::size_t inner = bc.out[r - 1];
  const std::size_t sa = bc.stride_a[r - 1];
  const std::size_t sb = bc.stride_b[r - 1];
  const std::size_t rows = shape_numel(bc.out) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t o = 0;
  for (std::size_t row = 0; row < rows; ++row) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) {
      ia += idx[d] * bc.stride_a[d];
      ib += idx[d] * bc.stride_b[d];
    }
    for (std::size_t j = 0; j < inner; ++j, ++o) fn(o, ia + j * sa, ib + j * sb);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  Broadcast bc = broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(shape_numel(bc.out));
  const auto av = a.data();
  const auto bv = b.data();
  auto apply = [&](auto f) {
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    } else {
      for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        out[o] = f(av[ia], bv[ib]);
      });
    }
  };
  switch (op) {
    case BinOp::kAdd: apply([](double x, double y) { return x + y; }); break;
    case BinOp::kSub: apply([](double x, double y) { return x - y; }); break;
    case BinOp::kMul: apply([](double x, double y) { return x * y; }); break;
    case BinOp::kDiv: apply([](double x, double y) { return x / y; }); break;
  }
  Tape* tape = tape_for({&a, &b});
  NodePtr node = make_output(bc.out, std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* na = a.node_ptr().get();
  detail::Node* nb = b.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, name, {a.node_ptr(), b.node_ptr()}, node, [na, nb, no, bc, op]() {
    const auto& go = no->grad;
    const bool ga_on = na->requires_grad;
    const bool gb_on = nb->requires_grad;
    double* ga = ga_on ? na->ensure_grad().data() : nullptr;
    double* gb = gb_on ? nb->ensure_grad().data() : nullptr;
    const auto& av = na->value;
    const auto& bv = nb->value;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const double g = go[o];
      switch (op) {
        case BinOp::kAdd:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] += g;
          break;
        case BinOp::kSub:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] -= g;
          break;
        case BinOp::kMul:
          if (ga) ga[ia] += g * bv[ib];
          if (gb) gb[ib] += g * av[ia];
          break;
        case BinOp::kDiv:
          if (ga) ga[ia] += g / bv[ib];
          if (gb) gb[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
          break;
      }
    });
  });
}

// ---- unary ----------------------------------------------------------------

// `f` maps x to y; `df` maps (x, y) to dy/dx.
template <typename F, typename DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape* tape = tape_for({&x});
  NodePtr node = make_output(x.shape(), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, name, {x.node_ptr()}, node, [nx, no, df]() {
    auto& gx = nx->ensure_grad();
    const auto& go = no->grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(nx->value[i], no->value[i]);
  });
}

// ---- reductions -----------------------------------------------------------

// Reduced axes are either one contiguous block (outer x group x inner walk)
// or arbitrary, in which case a per-element output index is materialized.
struct Reduction {
  Shape out_shape;
  std::size_t outer = 1;
  std::size_t group = 1;  // input elements per output element
  std::size_t inner = 1;
  std::vector<std::size_t> out_index;  // only for non-contiguous axes

  template <typename F>
  void for_each(F&& fn) const {
    if (!out_index.empty()) {
      for (std::size_t i = 0; i < out_index.size(); ++i) fn(i, out_index[i]);
      return;
    }
    std::size_t i = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t g = 0; g < group; ++g) {
        for (std::size_t k = 0; k < inner; ++k, ++i) fn(i, o * inner + k);
      }
    }
  }
};

Reduction plan_reduction(const Shape& in, std::vector<std::size_t> axes, bool keepdim,
                         const char* name) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t a : axes) {
    if (a >= in.size()) {
      throw std::invalid_argument(std::string(name) + ": axis " + std::to_string(a) +
                                  " out of range for " + shape_str(in));
    }
  }
  std::vector<char> reduced(in.size(), 0);
  for (std::size_t a : axes) reduced[a] = 1;
  Reduction r;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduced[d]) {
      r.group *= in[d];
      if (keepdim) r.out_shape.push_back(1);
    } else {
      r.out_shape.push_back(in[d]);
    }
  }
  if (r.out_shape.empty()) r.out_shape.push_back(1);
  const bool contiguous = axes.empty() || axes.back() - axes.front() + 1 == axes.size();
  if (contiguous) {
    const std::size_t first = axes.empty() ? in.size() : axes.front();
    const std::size_t last = axes.empty() ? in.size() : axes.back() + 1;
    for (std::size_t d = 0; d < first; ++d) r.outer *= in[d];
    for (std::size_t d = last; d < in.size(); ++d) r.inner *= in[d];
    return r;
  }
  const std::size_t n = shape_numel(in);
  r.out_index.resize(n);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < in.size(); ++d) {
      if (!reduced[d]) o = o * in[d] + idx[d];
    }
    r.out_index[i] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

Tensor reduce_sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdim, double scale,
                  const char* name) {
  auto plan = std::make_shared<Reduction>(plan_reduction(x.shape(), std::move(axes), keepdim, name));
  std::vector<double> out(shape_numel(plan->out_shape), 0.0);
  const auto xv = x.data();
  plan->for_each([&](std::size_t i, std::size_t o) { out[o] += xv[i]; });
  if (scale != 1.0) {
    for (double& v : out) v *= scale;
  }
  Tape* tape = tape_for({&x});
  NodePtr node = make_output(plan->out_shape, std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, name, {x.node_ptr()}, node, [nx, no, plan, scale]() {
    auto& gx = nx->ensure_grad();
    const auto& go = no->grad;
    plan->for_each([&](std::size_t i, std::size_t o) { gx[i] += scale * go[o]; });
  });
}

void check_matmul_batch(const Shape& a, const Shape& b, const char* name) {
  if (a.size() < 2 || a.size() != b.size()) {
    throw std::invalid_argument(std::string(name) + ": rank mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
  for (std::size_t d = 0; d + 2 < a.size(); ++d) {
    if (a[d] != b[d]) {
      throw std::invalid_argument(std::string(name) + ": batch extents differ " + shape_str(a) +
                                  " vs " + shape_str(b));
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv, "div"); }

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, "mul_scalar", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sign(const Tensor& x) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
  }
  return Tensor(make_output(x.shape(), std::move(out)));
}

Tensor cos(const Tensor& x) {
  return unary(
      x, "cos", [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor sin(const Tensor& x) {
  return unary(
      x, "sin", [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus", [](double v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor clamp_min(const Tensor& x, double threshold) {
  return unary(
      x, "clamp_min", [threshold](double v) { return std::max(v, threshold); },
      [threshold](double v, double) { return v > threshold ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdim) {
  return reduce_sum(x, std::move(axes), keepdim, 1.0, "sum");
}

Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdim) {
  std::vector<std::size_t> uniq = axes;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::size_t group = 1;
  for (std::size_t a : uniq) {
    if (a < x.rank()) group *= x.dim(a);
  }
  return reduce_sum(x, std::move(axes), keepdim, 1.0 / static_cast<double>(group), "mean");
}

Tensor max(const Tensor& x, std::vector<std::size_t> axes, bool keepdim) {
  Reduction plan = plan_reduction(x.shape(), std::move(axes), keepdim, "max");
  const std::size_t n_out = shape_numel(plan.out_shape);
  std::vector<double> out(n_out, 0.0);
  auto argmax = std::make_shared<std::vector<std::size_t>>(n_out, SIZE_MAX);
  const auto xv = x.data();
  plan.for_each([&](std::size_t i, std::size_t o) {
    if ((*argmax)[o] == SIZE_MAX || xv[i] > out[o]) {
      out[o] = xv[i];
      (*argmax)[o] = i;
    }
  });
  Tape* tape = tape_for({&x});
  NodePtr node = make_output(plan.out_shape, std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "max", {x.node_ptr()}, node, [nx, no, argmax]() {
    auto& gx = nx->ensure_grad();
    for (std::size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += no->grad[o];
  });
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes);
}

Tensor mean_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return mean(x, axes);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matmul_batch(a.shape(), b.shape(), "matmul");
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t kb = b.dim(r - 2), n = b.dim(r - 1);
  if (k != kb) {
    throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  std::vector<double> out(batch * m * n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t p = 0; p < batch; ++p) {
    MutMap(out.data() + p * m * n, m, n).noalias() =
        ConstMap(av + p * m * k, m, k) * ConstMap(bv + p * k * n, k, n);
  }
  MacCounter::add(static_cast<std::uint64_t>(batch * m * n * k));
  Tape* tape = tape_for({&a, &b});
  NodePtr node = make_output(std::move(out_shape), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* na = a.node_ptr().get();
  detail::Node* nb = b.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "matmul", {a.node_ptr(), b.node_ptr()}, node, [=]() {
    for (std::size_t p = 0; p < batch; ++p) {
      ConstMap go(no->grad.data() + p * m * n, m, n);
      if (na->requires_grad) {
        MutMap(na->ensure_grad().data() + p * m * k, m, k).noalias() +=
            go * ConstMap(nb->value.data() + p * k * n, k, n).transpose();
      }
      if (nb->requires_grad) {
        MutMap(nb->ensure_grad().data() + p * k * n, k, n).noalias() +=
            ConstMap(na->value.data() + p * m * k, m, k).transpose() * go;
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_matmul_batch(a.shape(), b.shape(), "matmul_nt");
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t n = b.dim(r - 2), kb = b.dim(r - 1);
  if (k != kb) {
    throw std::invalid_argument("matmul_nt: inner extents differ " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  std::vector<double> out(batch * m * n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t p = 0; p < batch; ++p) {
    MutMap(out.data() + p * m * n, m, n).noalias() =
        ConstMap(av + p * m * k, m, k) * ConstMap(bv + p * n * k, n, k).transpose();
  }
  MacCounter::add(static_cast<std::uint64_t>(batch * m * n * k));
  Tape* tape = tape_for({&a, &b});
  NodePtr node = make_output(std::move(out_shape), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* na = a.node_ptr().get();
  detail::Node* nb = b.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "matmul_nt", {a.node_ptr(), b.node_ptr()}, node, [=]() {
    for (std::size_t p = 0; p < batch; ++p) {
      ConstMap go(no->grad.data() + p * m * n, m, n);
      if (na->requires_grad) {
        MutMap(na->ensure_grad().data() + p * m * k, m, k).noalias() +=
            go * ConstMap(nb->value.data() + p * n * k, n, k);
      }
      if (nb->requires_grad) {
        MutMap(nb->ensure_grad().data() + p * n * k, n, k).noalias() +=
            go.transpose() * ConstMap(na->value.data() + p * m * k, m, k);
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || x.rank() < 1) {
    throw std::invalid_argument("linear: expected weight [d_in, d_out] and bias [d_out], got " +
                                shape_str(weight.shape()) + " and " + shape_str(bias.shape()));
  }
  const std::size_t d_in = weight.dim(0), d_out = weight.dim(1);
  if (x.dim(x.rank() - 1) != d_in || bias.dim(0) != d_out) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " incompatible with " +
                                shape_str(weight.shape()) + " / " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d_in;
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  std::vector<double> out(rows * d_out);
  MutMap o(out.data(), rows, d_out);
  o.noalias() = ConstMap(x.data().data(), rows, d_in) * ConstMap(weight.data().data(), d_in, d_out);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), d_out);
  MacCounter::add(static_cast<std::uint64_t>(rows * d_in * d_out));
  Tape* tape = tape_for({&x, &weight, &bias});
  NodePtr node = make_output(std::move(out_shape), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* nw = weight.node_ptr().get();
  detail::Node* nb = bias.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "linear", {x.node_ptr(), weight.node_ptr(), bias.node_ptr()}, node, [=]() {
    ConstMap go(no->grad.data(), rows, d_out);
    if (nx->requires_grad) {
      MutMap(nx->ensure_grad().data(), rows, d_in).noalias() +=
          go * ConstMap(nw->value.data(), d_in, d_out).transpose();
    }
    if (nw->requires_grad) {
      MutMap(nw->ensure_grad().data(), d_in, d_out).noalias() +=
          ConstMap(nx->value.data(), rows, d_in).transpose() * go;
    }
    if (nb->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(nb->ensure_grad().data(), d_out) += go.colwise().sum();
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layer_norm: affine extents " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " do not match " +
                                shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Tape* tape = tape_for({&x, &gamma, &beta});
  NodePtr node = make_output(x.shape(), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* ng = gamma.node_ptr().get();
  detail::Node* nb = beta.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "layer_norm", {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()}, node,
                [=]() {
                  const auto& go = no->grad;
                  const auto& g = ng->value;
                  double* gg = ng->requires_grad ? ng->ensure_grad().data() : nullptr;
                  double* gb = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
                  double* gx = nx->requires_grad ? nx->ensure_grad().data() : nullptr;
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* h = xhat->data() + r * d;
                    const double* gr = go.data() + r * d;
                    double mean_gh = 0.0, mean_ghh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      if (gg) gg[j] += gr[j] * h[j];
                      if (gb) gb[j] += gr[j];
                      const double gh = gr[j] * g[j];
                      mean_gh += gh;
                      mean_ghh += gh * h[j];
                    }
                    if (!gx) continue;
                    mean_gh *= inv_d;
                    mean_ghh *= inv_d;
                    const double inv = (*inv_std)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                      gx[r * d + j] += inv * (gr[j] * g[j] - mean_gh - h[j] * mean_ghh);
                    }
                  }
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  Tape* tape = tape_for({&x});
  NodePtr node = make_output(std::move(shape), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* no = node.get();
  return record(tape, "reshape", {x.node_ptr()}, node, [nx, no]() {
    auto& gx = nx->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += no->grad[i];
  });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw std::invalid_argument("gather: index count does not match " + shape_str(out_shape));
  }
  const auto xv = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw std::out_of_range("gather: index out of range");
    out[i] = xv[index[i]];
  }
  Tape* tape = tape_for({&x});
  NodePtr node = make_output(std::move(out_shape), std::move(out));
  if (!tape) return Tensor(node);
  detail::Node* nx = x.node_ptr().get();
  detail::Node* no = node.get();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return record(tape, "gather", {x.node_ptr()}, node, [nx, no, idx]() {
    auto& gx = nx->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += no->grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw std::invalid_argument("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t a : order) {
    if (a >= r || seen[a]) throw std::invalid_argument("permute: invalid axis order");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * in[d + 1];
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = in[order[d]];
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < r; ++d) src += idx[d] * in_stride[order[d]];
    index[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("transpose: rank < 2");
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t rows = parts[0].numel() / first.back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw std::invalid_argument("concat_last: leading extents differ " + shape_str(first) +
                                  " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tape* tape = TapeScope::active();
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  NodePtr node = make_output(std::move(out_shape), std::move(out));
  if (!tape || !any) return Tensor(node);
  std::vector<NodePtr> inputs;
  std::vector<detail::Node*> raw;
  for (const Tensor& p : parts) {
    inputs.push_back(p.node_ptr());
    raw.push_back(p.node_ptr().get());
  }
  detail::Node* no = node.get();
  return record(tape, "concat", std::move(inputs), node, [raw, widths, rows, total, no]() {
    std::size_t off = 0;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (raw[k]->requires_grad) {
        auto& g = raw[k]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += no->grad[r * total + off + j];
        }
      }
      off += widths[k];
    }
  });
}

std::vector<Tensor> split_last(const Tensor& x, const std::vector<std::size_t>& sizes) {
  const std::size_t width = x.dim(x.rank() - 1);
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != width) {
    throw std::invalid_argument("split_last: sizes sum to " + std::to_string(total) +
                                " but last extent is " + std::to_string(width));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<Tensor> out;
  std::size_t offset = 0;
  for (std::size_t s : sizes) {
    std::vector<std::size_t> index(rows * s);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < s; ++j) index[r * s + j] = r * width + offset + j;
    }
    Shape shape = x.shape();
    shape.back() = s;
    out.push_back(gather(x, std::move(index), std::move(shape)));
    offset += s;
  }
  return out;
}

Tensor l1_normalize_rows(const Tensor& x, double eps) {
  const Tensor denom = add_scalar(sum(abs(x), {x.rank() - 1}, true), eps);
  return div(x, denom);
}

}  // namespace egf
