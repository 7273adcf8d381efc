#include "mic/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "mic/tensor_ops.hpp"

namespace mic::ag {

// ---------------------------------------------------------------------------
// Var / Tape

Tape& Var::tape() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

bool Var::requires_grad() const { return tape().requires_grad(id_); }

const Tensor& Var::grad() const { return tape().grad(id_); }

Var Tape::leaf(Tensor value, std::string name) {
  Node node;
  node.op = std::move(name);
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) {
      throw ContractError("op '" + node.op + "' mixes vars from different tapes");
    }
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::ensure_grad(Node& node) {
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
}

const Tensor& Tape::grad(std::size_t id) {
  Node& node = nodes_.at(id);
  ensure_grad(node);
  return node.grad;
}

void Tape::inject_fault(std::string op, double scale) {
  fault_op_ = std::move(op);
  fault_scale_ = scale;
}

void Tape::backward(const Var& root) {
  if (&root.tape() != this) throw ContractError("backward: foreign root");
  if (root.value().numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " +
                        shape_str(root.shape()));
  }
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor();
  }
  Node& top = nodes_[root.id()];
  top.grad = Tensor(top.value.shape(), 1.0);
  top.has_grad = true;

  std::vector<const Tensor*> in;
  std::vector<Tensor*> in_grad;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || !node.has_grad || node.inputs.empty()) continue;
    if (!node.backward) {
      throw UnregisteredOp("no gradient registered for op '" + node.op + "'");
    }
    in.clear();
    in_grad.clear();
    for (std::size_t input : node.inputs) {
      Node& src = nodes_[input];
      in.push_back(&src.value);
      if (src.requires_grad) {
        ensure_grad(src);
        in_grad.push_back(&src.grad);
      } else {
        in_grad.push_back(nullptr);
      }
    }
    if (!fault_op_.empty() && node.op == fault_op_) {
      Tensor scaled = node.grad;
      for (double& g : scaled.vec()) g *= fault_scale_;
      node.backward({scaled, node.value, in, in_grad});
    } else {
      node.backward({node.grad, node.value, in, in_grad});
    }
  }
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;
};

std::shared_ptr<const Broadcast> plan_broadcast(const Shape& a, const Shape& b) {
  auto plan = std::make_shared<Broadcast>();
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  plan->out.resize(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    if (pa[k] != pb[k] && pa[k] != 1 && pb[k] != 1) {
      throw ContractError("cannot broadcast " + shape_str(a) + " with " +
                          shape_str(b));
    }
    plan->out[k] = std::max(pa[k], pb[k]);
  }
  // Strides with 0 on broadcast axes.
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t k = rank; k-- > 0;) {
    sa[k] = pa[k] == 1 ? 0 : acc_a;
    sb[k] = pb[k] == 1 ? 0 : acc_b;
    acc_a *= pa[k];
    acc_b *= pb[k];
  }
  const std::size_t n = shape_numel(plan->out);
  plan->ia.resize(n);
  plan->ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan->ia[flat] = oa;
    plan->ib[flat] = ob;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < plan->out[k]) break;
      oa -= sa[k] * idx[k];
      ob -= sb[k] * idx[k];
      idx[k] = 0;
    }
  }
  return plan;
}

template <typename Fwd, typename Bwd>
Var binary(const char* name, const Var& a, const Var& b, Fwd fwd, Bwd bwd) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out(av.shape());
    for (std::size_t k = 0; k < out.numel(); ++k) out[k] = fwd(av[k], bv[k]);
    return a.tape().record(name, std::move(out), {a, b},
                           [bwd](const BackwardContext& ctx) {
                             const Tensor& x = *ctx.in[0];
                             const Tensor& y = *ctx.in[1];
                             for (std::size_t k = 0; k < x.numel(); ++k) {
                               auto [gx, gy] = bwd(x[k], y[k], ctx.out[k]);
                               if (ctx.in_grad[0]) (*ctx.in_grad[0])[k] += ctx.grad_out[k] * gx;
                               if (ctx.in_grad[1]) (*ctx.in_grad[1])[k] += ctx.grad_out[k] * gy;
                             }
                           });
  }
  auto plan = plan_broadcast(av.shape(), bv.shape());
  Tensor out(plan->out);
  for (std::size_t k = 0; k < out.numel(); ++k) {
    out[k] = fwd(av[plan->ia[k]], bv[plan->ib[k]]);
  }
  return a.tape().record(name, std::move(out), {a, b},
                         [plan, bwd](const BackwardContext& ctx) {
                           const Tensor& x = *ctx.in[0];
                           const Tensor& y = *ctx.in[1];
                           for (std::size_t k = 0; k < ctx.out.numel(); ++k) {
                             const std::size_t i = plan->ia[k], j = plan->ib[k];
                             auto [gx, gy] = bwd(x[i], y[j], ctx.out[k]);
                             if (ctx.in_grad[0]) (*ctx.in_grad[0])[i] += ctx.grad_out[k] * gx;
                             if (ctx.in_grad[1]) (*ctx.in_grad[1])[j] += ctx.grad_out[k] * gy;
                           }
                         });
}

template <typename Fwd, typename Deriv>
Var unary(const char* name, const Var& x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < out.numel(); ++k) out[k] = fwd(xv[k]);
  return x.tape().record(name, std::move(out), {x},
                         [deriv](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           const Tensor& in = *ctx.in[0];
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t k = 0; k < in.numel(); ++k) {
                             g[k] += ctx.grad_out[k] * deriv(in[k], ctx.out[k]);
                           }
                         });
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("vars from different tapes");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

Var div(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out) { return std::pair{1.0 / y, -out / y}; });
}

Var affine(const Var& x, double a, double b) {
  return unary(
      "affine", x, [a, b](double v) { return a * v + b; },
      [a](double, double) { return a; });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }
Var operator-(const Var& x) { return affine(x, -1.0, 0.0); }
Var operator+(const Var& x, double s) { return affine(x, 1.0, s); }
Var operator+(double s, const Var& x) { return affine(x, 1.0, s); }
Var operator-(const Var& x, double s) { return affine(x, 1.0, -s); }
Var operator-(double s, const Var& x) { return affine(x, -1.0, s); }
Var operator*(const Var& x, double s) { return affine(x, s, 0.0); }
Var operator*(double s, const Var& x) { return affine(x, s, 0.0); }
Var operator/(const Var& x, double s) { return affine(x, 1.0 / s, 0.0); }

Var exp(const Var& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double out) { return out; });
}

Var log(const Var& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

Var sqrt(const Var& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double out) { return out > 0.0 ? 0.5 / out : 0.0; });
}

Var square(const Var& x) {
  return unary(
      "square", x, [](double v) { return v * v; },
      [](double in, double) { return 2.0 * in; });
}

Var relu(const Var& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) +
               0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

Var hinge_sq(const Var& x, double tau) {
  return unary(
      "hinge_sq", x,
      [tau](double v) {
        const double e = std::abs(v) - tau;
        return e > 0.0 ? e * e : 0.0;
      },
      [tau](double v, double) {
        const double e = std::abs(v) - tau;
        if (!(e > 0.0)) return 0.0;
        return v > 0.0 ? 2.0 * e : -2.0 * e;
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.data()) total += v;
  return x.tape().record("sum", Tensor::scalar(total), {x},
                         [](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           const double g = ctx.grad_out[0];
                           for (double& v : ctx.in_grad[0]->vec()) v += g;
                         });
}

Var mean(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.numel() == 0) throw ContractError("mean of an empty tensor");
  double total = 0.0;
  for (double v : xv.data()) total += v;
  const double inv = 1.0 / static_cast<double>(xv.numel());
  return x.tape().record("mean", Tensor::scalar(total * inv), {x},
                         [inv](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           const double g = ctx.grad_out[0] * inv;
                           for (double& v : ctx.in_grad[0]->vec()) v += g;
                         });
}

namespace {

Var reduce_axis(const char* name, const Var& x, std::size_t axis, bool keepdim,
                double scale) {
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Shape shape = xv.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.axis; ++a) {
      const double* src = xv.data().data() + (o * s.axis + a) * s.inner;
      double* dst = out.data().data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  if (scale != 1.0) {
    for (double& v : out.vec()) v *= scale;
  }
  return x.tape().record(name, std::move(out), {x},
                         [s, scale](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             const double* src = ctx.grad_out.data().data() + o * s.inner;
                             for (std::size_t a = 0; a < s.axis; ++a) {
                               double* dst = g.data().data() + (o * s.axis + a) * s.inner;
                               for (std::size_t i = 0; i < s.inner; ++i) dst[i] += scale * src[i];
                             }
                           }
                         });
}

}  // namespace

Var sum_axis(const Var& x, std::size_t axis, bool keepdim) {
  return reduce_axis("sum_axis", x, axis, keepdim, 1.0);
}

Var mean_axis(const Var& x, std::size_t axis, bool keepdim) {
  const std::size_t n = split_axis(x.shape(), axis).axis;
  if (n == 0) throw ContractError("mean over an empty axis");
  return reduce_axis("mean_axis", x, axis, keepdim, 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Shape ops

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x},
                         [](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           auto& g = ctx.in_grad[0]->vec();
                           for (std::size_t k = 0; k < g.size(); ++k) g[k] += ctx.grad_out[k];
                         });
}

Var permute(const Var& x, const std::vector<std::size_t>& axes) {
  const Tensor& xv = x.value();
  const std::size_t rank = xv.rank();
  if (axes.size() != rank) throw ContractError("permute: axes rank mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    if (axes[k] >= rank || seen[axes[k]]) throw ContractError("permute: bad axes");
    seen[axes[k]] = true;
    out_shape[k] = xv.shape()[axes[k]];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t k = rank; k-- > 1;) {
    in_stride[k - 1] = in_stride[k] * xv.shape()[k];
  }
  const std::size_t n = xv.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < rank; ++k) off += idx[k] * in_stride[axes[k]];
    (*src)[flat] = off;
    for (std::size_t k = rank; k-- > 0;) {
      if (++idx[k] < out_shape[k]) break;
      idx[k] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t k = 0; k < n; ++k) out[k] = xv[(*src)[k]];
  return x.tape().record("permute", std::move(out), {x},
                         [src](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t k = 0; k < src->size(); ++k) {
                             g[(*src)[k]] += ctx.grad_out[k];
                           }
                         });
}

Var slice_last(const Var& x, std::size_t begin, std::size_t end) {
  Tensor out = slice_features(x.value(), begin, end);
  const std::size_t width = x.shape().back();
  return x.tape().record("slice_last", std::move(out), {x},
                         [begin, end, width](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           const std::size_t w = end - begin;
                           const std::size_t rows = g.numel() / width;
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < w; ++c) {
                               g[r * width + begin + c] += ctx.grad_out[r * w + c];
                             }
                           }
                         });
}

Var slice_first(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || begin >= end || end > xv.dim(0)) {
    throw InvalidDimension("slice_first: invalid range");
  }
  const std::size_t inner = xv.numel() / xv.dim(0);
  Shape shape = xv.shape();
  shape[0] = end - begin;
  Tensor out(shape, std::vector<double>(xv.data().begin() + begin * inner,
                                        xv.data().begin() + end * inner));
  return x.tape().record("slice_first", std::move(out), {x},
                         [begin, inner](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t k = 0; k < ctx.grad_out.numel(); ++k) {
                             g[begin * inner + k] += ctx.grad_out[k];
                           }
                         });
}

Var diag(const Var& x) {
  const Tensor& xv = x.value();
  xv.require_rank(2, "diag");
  const std::size_t n = xv.dim(0);
  if (xv.dim(1) != n) throw ContractError("diag of a non-square matrix");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = xv.at(i, i);
  return x.tape().record("diag", std::move(out), {x},
                         [n](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           for (std::size_t i = 0; i < n; ++i) {
                             ctx.in_grad[0]->at(i, i) += ctx.grad_out[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// out (p, r) += a (p, q) * b (q, r), with optional transposes of the stored
// operands. Raw pointers keep the batched loop free of temporaries.
void gemm_acc(const double* a, const double* b, double* out, std::size_t p,
              std::size_t q, std::size_t r, bool ta, bool tb) {
  for (std::size_t i = 0; i < p; ++i) {
    double* orow = out + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double av = ta ? a[k * p + i] : a[i * q + k];
      if (!tb) {
        const double* brow = b + k * r;
        for (std::size_t j = 0; j < r; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < r; ++j) orow[j] += av * b[j * q + k];
      }
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  Tensor out = mic::matmul(a.value(), b.value());
  const std::size_t p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
  return a.tape().record("matmul", std::move(out), {a, b},
                         [p, q, r](const BackwardContext& ctx) {
                           const double* g = ctx.grad_out.data().data();
                           if (ctx.in_grad[0]) {
                             // dA (p, q) = G (p, r) * B^T
                             gemm_acc(g, ctx.in[1]->data().data(),
                                      ctx.in_grad[0]->data().data(), p, r, q, false, true);
                           }
                           if (ctx.in_grad[1]) {
                             // dB (q, r) = A^T * G
                             gemm_acc(ctx.in[0]->data().data(), g,
                                      ctx.in_grad[1]->data().data(), q, p, r, true, false);
                           }
                         });
}

Var bmm(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  av.require_rank(3, "bmm lhs");
  bv.require_rank(3, "bmm rhs");
  const std::size_t n = av.dim(0), p = av.dim(1), q = av.dim(2), r = bv.dim(2);
  if (bv.dim(0) != n || bv.dim(1) != q) {
    throw ContractError("bmm: incompatible shapes " + shape_str(av.shape()) +
                        " x " + shape_str(bv.shape()));
  }
  Tensor out({n, p, r});
  for (std::size_t s = 0; s < n; ++s) {
    gemm_acc(av.data().data() + s * p * q, bv.data().data() + s * q * r,
             out.data().data() + s * p * r, p, q, r, false, false);
  }
  return a.tape().record("bmm", std::move(out), {a, b},
                         [n, p, q, r](const BackwardContext& ctx) {
                           const double* g = ctx.grad_out.data().data();
                           for (std::size_t s = 0; s < n; ++s) {
                             if (ctx.in_grad[0]) {
                               gemm_acc(g + s * p * r, ctx.in[1]->data().data() + s * q * r,
                                        ctx.in_grad[0]->data().data() + s * p * q, p, r, q,
                                        false, true);
                             }
                             if (ctx.in_grad[1]) {
                               gemm_acc(ctx.in[0]->data().data() + s * p * q, g + s * p * r,
                                        ctx.in_grad[1]->data().data() + s * q * r, q, p, r,
                                        true, false);
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Softmax family

Var logsumexp_last(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ContractError("logsumexp_last on a scalar");
  const std::size_t k = xv.shape().back();
  const std::size_t rows = xv.numel() / k;
  Shape shape(xv.shape().begin(), xv.shape().end() - 1);
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - mx);
    out[r] = mx + std::log(acc);
  }
  return x.tape().record("logsumexp_last", std::move(out), {x},
                         [k, rows](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           const Tensor& in = *ctx.in[0];
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < k; ++j) {
                               g[r * k + j] += ctx.grad_out[r] *
                                               std::exp(in[r * k + j] - ctx.out[r]);
                             }
                           }
                         });
}

Var softmax_last(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ContractError("softmax_last on a scalar");
  const std::size_t k = xv.shape().back();
  const std::size_t rows = xv.numel() / k;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * k;
    double* orow = out.data().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      acc += orow[j];
    }
    for (std::size_t j = 0; j < k; ++j) orow[j] /= acc;
  }
  return x.tape().record("softmax_last", std::move(out), {x},
                         [k, rows](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < k; ++j) {
                               dot += ctx.grad_out[r * k + j] * ctx.out[r * k + j];
                             }
                             for (std::size_t j = 0; j < k; ++j) {
                               g[r * k + j] += ctx.out[r * k + j] * (ctx.grad_out[r * k + j] - dot);
                             }
                           }
                         });
}

Var gather_rows(const Var& table, const std::vector<std::int32_t>& ids,
                const Shape& ids_shape) {
  const Tensor& tv = table.value();
  tv.require_rank(2, "gather_rows table");
  if (shape_numel(ids_shape) != ids.size()) {
    throw ContractError("gather_rows: ids do not match their shape");
  }
  const std::size_t vocab = tv.dim(0), width = tv.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabError("token id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Shape shape = ids_shape;
  shape.push_back(width);
  Tensor out(shape);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(tv.data().begin() + static_cast<std::size_t>(ids[t]) * width, width,
                out.data().begin() + t * width);
  }
  return table.tape().record("gather_rows", std::move(out), {table},
                             [ids, width](const BackwardContext& ctx) {
                               if (!ctx.in_grad[0]) return;
                               Tensor& g = *ctx.in_grad[0];
                               for (std::size_t t = 0; t < ids.size(); ++t) {
                                 const std::size_t row = static_cast<std::size_t>(ids[t]);
                                 for (std::size_t c = 0; c < width; ++c) {
                                   g[row * width + c] += ctx.grad_out[t * width + c];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Masked token statistics

Var masked_mean_pool(const Var& h, const SequenceMask& m) {
  Tensor out = mic::masked_mean_pool(h.value(), m);
  return h.tape().record("masked_mean_pool", std::move(out), {h},
                         [m](const BackwardContext& ctx) {
                           if (!ctx.in_grad[0]) return;
                           Tensor& g = *ctx.in_grad[0];
                           const std::size_t B = g.dim(0), L = g.dim(1), D = g.dim(2);
                           for (std::size_t i = 0; i < B; ++i) {
                             const double inv_n = 1.0 / static_cast<double>(m.count(i));
                             for (std::size_t l = 0; l < L; ++l) {
                               if (!m.active(i, l)) continue;
                               for (std::size_t j = 0; j < D; ++j) {
                                 g.at(i, l, j) += inv_n * ctx.grad_out.at(i, j);
                               }
                             }
                           }
                         });
}

Var masked_std(const Var& h, const SequenceMask& m) {
  Tensor out = mic::masked_std(h.value(), m);
  return h.tape().record(
      "masked_std", std::move(out), {h}, [m](const BackwardContext& ctx) {
        if (!ctx.in_grad[0]) return;
        const Tensor& x = *ctx.in[0];
        Tensor& g = *ctx.in_grad[0];
        const Tensor means = mic::masked_moments(x, m).means;
        const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
        for (std::size_t i = 0; i < B; ++i) {
          const double n = static_cast<double>(m.count(i));
          for (std::size_t j = 0; j < D; ++j) {
            const double sd = ctx.out.at(i, j);
            if (!(sd > 0.0)) continue;
            const double scale = ctx.grad_out.at(i, j) / (n * sd);
            for (std::size_t l = 0; l < L; ++l) {
              if (!m.active(i, l)) continue;
              g.at(i, l, j) += scale * (x.at(i, l, j) - means.at(i, j));
            }
          }
        }
      });
}

Var masked_standardize(const Var& h, const SequenceMask& m, EpsilonPolicy eps) {
  Tensor out = mic::masked_standardize(h.value(), m, eps);
  const double e = eps.value();
  return h.tape().record(
      "masked_standardize", std::move(out), {h},
      [m, e](const BackwardContext& ctx) {
        if (!ctx.in_grad[0]) return;
        const Tensor& x = *ctx.in[0];
        Tensor& g = *ctx.in_grad[0];
        const auto [means, vars] = mic::masked_moments(x, m);
        const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
        for (std::size_t i = 0; i < B; ++i) {
          const double n = static_cast<double>(m.count(i));
          for (std::size_t j = 0; j < D; ++j) {
            const double mu = means.at(i, j);
            const double sd = std::sqrt(vars.at(i, j));
            const double s = sd + e;
            double gbar = 0.0, cross = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
              if (!m.active(i, l)) continue;
              const double go = ctx.grad_out.at(i, l, j);
              gbar += go;
              cross += go * (x.at(i, l, j) - mu);
            }
            gbar /= n;
            const double sd_term = sd > 0.0 ? cross / (s * s * n * sd) : 0.0;
            for (std::size_t l = 0; l < L; ++l) {
              if (!m.active(i, l)) continue;
              g.at(i, l, j) += (ctx.grad_out.at(i, l, j) - gbar) / s -
                               sd_term * (x.at(i, l, j) - mu);
            }
          }
        }
      });
}

Var token_cross_correlation(const Var& a, const Var& b, const SequenceMask& m) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  av.require_rank(3, "token_cross_correlation lhs");
  bv.require_rank(3, "token_cross_correlation rhs");
  m.require_matches(av);
  m.require_matches(bv);
  m.require_nonempty();
  const std::size_t B = av.dim(0), L = av.dim(1), Da = av.dim(2), Db = bv.dim(2);
  Tensor out({Da, Db});
  for (std::size_t i = 0; i < B; ++i) {
    const double w = 1.0 / (static_cast<double>(B) * static_cast<double>(m.count(i)));
    for (std::size_t l = 0; l < L; ++l) {
      if (!m.active(i, l)) continue;
      for (std::size_t u = 0; u < Da; ++u) {
        const double au = w * av.at(i, l, u);
        for (std::size_t v = 0; v < Db; ++v) out.at(u, v) += au * bv.at(i, l, v);
      }
    }
  }
  return a.tape().record(
      "token_cross_correlation", std::move(out), {a, b},
      [m, B, L, Da, Db](const BackwardContext& ctx) {
        const Tensor& x = *ctx.in[0];
        const Tensor& y = *ctx.in[1];
        const Tensor& g = ctx.grad_out;
        for (std::size_t i = 0; i < B; ++i) {
          const double w = 1.0 / (static_cast<double>(B) * static_cast<double>(m.count(i)));
          for (std::size_t l = 0; l < L; ++l) {
            if (!m.active(i, l)) continue;
            for (std::size_t u = 0; u < Da; ++u) {
              double acc_a = 0.0;
              for (std::size_t v = 0; v < Db; ++v) {
                acc_a += g.at(u, v) * y.at(i, l, v);
                if (ctx.in_grad[1]) {
                  ctx.in_grad[1]->at(i, l, v) += w * g.at(u, v) * x.at(i, l, u);
                }
              }
              if (ctx.in_grad[0]) ctx.in_grad[0]->at(i, l, u) += w * acc_a;
            }
          }
        }
      });
}

Var row_normalize(const Var& z, EpsilonPolicy eps) {
  RowNormalized rn = mic::row_normalize(z.value(), eps);
  const double e = eps.value();
  return z.tape().record(
      "row_normalize", std::move(rn.rows), {z}, [e](const BackwardContext& ctx) {
        if (!ctx.in_grad[0]) return;
        const Tensor& x = *ctx.in[0];
        Tensor& g = *ctx.in_grad[0];
        const std::size_t R = x.dim(0), C = x.dim(1);
        for (std::size_t i = 0; i < R; ++i) {
          double sq = 0.0;
          for (std::size_t j = 0; j < C; ++j) sq += x.at(i, j) * x.at(i, j);
          const double norm = std::sqrt(sq);
          if (norm < e) {
            for (std::size_t j = 0; j < C; ++j) g.at(i, j) += ctx.grad_out.at(i, j) / e;
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < C; ++j) dot += ctx.out.at(i, j) * ctx.grad_out.at(i, j);
          for (std::size_t j = 0; j < C; ++j) {
            g.at(i, j) += (ctx.grad_out.at(i, j) - ctx.out.at(i, j) * dot) / norm;
          }
        }
      });
}

}  // namespace mic::ag
