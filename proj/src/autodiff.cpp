#include "sharpen/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "sharpen/error.hpp"

namespace sharpen {

namespace {

struct Dims {
  std::size_t r, c;
};

Dims dims_of(const Array& a) { return {a.rows(), a.cols()}; }

[[noreturn]] void shape_fail(OpKind op, const Array& a, const Array& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

Shape broadcast_shape(OpKind op, const Array& a, const Array& b) {
  if (a.shape() == b.shape()) return a.shape();
  const Dims da = dims_of(a), db = dims_of(b);
  auto join = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    shape_fail(op, a, b);
  };
  return Shape{join(da.r, db.r), join(da.c, db.c)};
}

template <typename F>
Array broadcast_apply(const Array& a, const Array& b, const Shape& out_shape, F f) {
  Array out(out_shape);
  const Dims da = dims_of(a), db = dims_of(b), dout{out.rows(), out.cols()};
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  for (std::size_t i = 0; i < dout.r; ++i) {
    const std::size_t ia = da.r == 1 ? 0 : i, ib = db.r == 1 ? 0 : i;
    for (std::size_t j = 0; j < dout.c; ++j) {
      const std::size_t ja = da.c == 1 ? 0 : j, jb = db.c == 1 ? 0 : j;
      out(i, j) = f(a[ia * da.c + ja], b[ib * db.c + jb]);
    }
  }
  return out;
}

// Sums a broadcast gradient back down to the operand's shape.
Array reduce_to(const Array& g, const Array& operand) {
  if (g.shape() == operand.shape()) return g;
  Array out(operand.shape());
  const Dims dop = dims_of(operand);
  const std::size_t gr = g.rows(), gc = g.cols();
  for (std::size_t i = 0; i < gr; ++i) {
    const std::size_t io = dop.r == 1 ? 0 : i;
    for (std::size_t j = 0; j < gc; ++j) {
      const std::size_t jo = dop.c == 1 ? 0 : j;
      out[io * dop.c + jo] += g[i * gc + j];
    }
  }
  return out;
}

Array transpose(const Array& a) {
  Array out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Shapes rank<2 arrays as explicit 2-D for matmul.
Array as_matrix(const Array& a) {
  if (a.rank() == 2) return a;
  return Array({a.rows(), a.cols()}, a.storage());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an unrecorded variable");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != a.tape) throw Error("operands recorded on different tapes");
  return t;
}

template <typename F>
Var unary(Var a, OpKind op, F f) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(op, {a.id}, std::move(out));
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "subtract";
    case OpKind::mul: return "multiply";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::tanh: return "tanh";
    case OpKind::silu: return "silu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sq_norm: return "sq_norm";
    case OpKind::row_sum: return "row_sum";
    case OpKind::concat_cols: return "concat";
    case OpKind::log_softmax: return "log_softmax";
  }
  return "?";
}

const Array& Var::value() const { return tape_of(*this).value(*this); }

Array Gradients::of(Var v) const {
  if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
  return Array(v.value().shape());
}

Var Tape::leaf(Array value) {
  nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), 0.0, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Array value) {
  nodes_.push_back(Node{OpKind::constant, {}, std::move(value), 0.0, false});
  return Var{this, nodes_.size() - 1};
}

const Array& Tape::value(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
  return nodes_[v.id].value;
}

Var Tape::record(OpKind op, std::vector<std::size_t> inputs, Array value, double scalar) {
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), scalar, needs});
  return Var{this, nodes_.size() - 1};
}

Gradients Tape::backward(Var output) const {
  const Array& out = value(output);
  if (out.size() != 1) throw ShapeError("backward without seed requires a single-element output, got " +
                                        shape_string(out.shape()));
  return backward(output, Array(out.shape(), 1.0));
}

Gradients Tape::backward(Var output, const Array& seed) const {
  if (nodes_.empty()) throw Error("backward called before any forward evaluation");
  const Array& out = value(output);
  if (seed.shape() != out.shape())
    throw ShapeError("backward seed shape " + shape_string(seed.shape()) + " does not match output " +
                     shape_string(out.shape()));
  std::vector<std::optional<Array>> grads(nodes_.size());
  grads[output.id] = Array(out.shape(), seed.storage());
  for (std::size_t id = output.id + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const Node& node = nodes_[id];
    if (!node.needs_grad || node.inputs.empty()) continue;
    propagate(node, *grads[id], grads);
  }
  return Gradients(std::move(grads));
}

void Tape::accumulate(std::vector<std::optional<Array>>& grads, std::size_t id, const Array& g) const {
  if (!nodes_[id].needs_grad) return;
  auto& slot = grads[id];
  if (!slot) {
    slot = Array(nodes_[id].value.shape(), g.storage());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
}

void Tape::propagate(const Node& node, const Array& g, std::vector<std::optional<Array>>& grads) const {
  auto in = [&](std::size_t k) -> const Array& { return nodes_[node.inputs[k]].value; };
  const Array& y = node.value;
  switch (node.op) {
    case OpKind::leaf:
    case OpKind::constant:
      return;
    case OpKind::add:
      accumulate(grads, node.inputs[0], reduce_to(g, in(0)));
      accumulate(grads, node.inputs[1], reduce_to(g, in(1)));
      return;
    case OpKind::sub: {
      accumulate(grads, node.inputs[0], reduce_to(g, in(0)));
      Array neg = g;
      for (auto& v : neg.storage()) v = -v;
      accumulate(grads, node.inputs[1], reduce_to(neg, in(1)));
      return;
    }
    case OpKind::mul: {
      const Array& a = in(0);
      const Array& b = in(1);
      if (nodes_[node.inputs[0]].needs_grad) {
        Array ga = broadcast_apply(g, b, g.shape(), [](double x, double z) { return x * z; });
        accumulate(grads, node.inputs[0], reduce_to(ga, a));
      }
      if (nodes_[node.inputs[1]].needs_grad) {
        Array gb = broadcast_apply(g, a, g.shape(), [](double x, double z) { return x * z; });
        accumulate(grads, node.inputs[1], reduce_to(gb, b));
      }
      return;
    }
    case OpKind::scale: {
      Array ga = g;
      for (auto& v : ga.storage()) v *= node.scalar;
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::matmul: {
      const Array a = as_matrix(in(0));
      const Array b = as_matrix(in(1));
      const Array gm = as_matrix(g);
      if (nodes_[node.inputs[0]].needs_grad) {
        Array ga = matmul_plain(gm, transpose(b));
        accumulate(grads, node.inputs[0], Array(in(0).shape(), std::move(ga.storage())));
      }
      if (nodes_[node.inputs[1]].needs_grad) {
        Array gb = matmul_plain(transpose(a), gm);
        accumulate(grads, node.inputs[1], Array(in(1).shape(), std::move(gb.storage())));
      }
      return;
    }
    case OpKind::tanh: {
      Array ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] * (1.0 - y[i] * y[i]);
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::silu: {
      const Array& x = in(0);
      Array ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double s = sigmoid(x[i]);
        ga[i] = g[i] * (s + x[i] * s * (1.0 - s));
      }
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::exp: {
      Array ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] * y[i];
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::log: {
      const Array& x = in(0);
      Array ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] / x[i];
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::softplus: {
      const Array& x = in(0);
      Array ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] * sigmoid(x[i]);
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::sum:
      accumulate(grads, node.inputs[0], Array(in(0).shape(), g.item()));
      return;
    case OpKind::mean:
      accumulate(grads, node.inputs[0], Array(in(0).shape(), g.item() / static_cast<double>(in(0).size())));
      return;
    case OpKind::sq_norm: {
      const Array& x = in(0);
      Array ga(x.shape());
      const double s = 2.0 * g.item();
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] = s * x[i];
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::row_sum: {
      const Array& x = in(0);
      Array ga(x.shape());
      const std::size_t c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[i];
      accumulate(grads, node.inputs[0], ga);
      return;
    }
    case OpKind::concat_cols: {
      const std::size_t total = y.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Array& part = in(k);
        const std::size_t c = part.cols();
        if (nodes_[node.inputs[k]].needs_grad) {
          Array gp(part.shape());
          for (std::size_t i = 0; i < part.rows(); ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] = g[i * total + offset + j];
          accumulate(grads, node.inputs[k], gp);
        }
        offset += c;
      }
      return;
    }
    case OpKind::log_softmax: {
      Array ga(y.shape());
      const std::size_t c = y.cols();
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[i * c + j] - std::exp(y[i * c + j]) * gs;
      }
      accumulate(grads, node.inputs[0], ga);
      return;
    }
  }
}

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Shape s = broadcast_shape(OpKind::add, a.value(), b.value());
  return t.record(OpKind::add, {a.id, b.id},
                  broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x + y; }));
}

Var operator-(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Shape s = broadcast_shape(OpKind::sub, a.value(), b.value());
  return t.record(OpKind::sub, {a.id, b.id},
                  broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x - y; }));
}

Var operator*(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Shape s = broadcast_shape(OpKind::mul, a.value(), b.value());
  return t.record(OpKind::mul, {a.id, b.id},
                  broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x * y; }));
}

Var operator-(Var a) { return scale(a, -1.0); }

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  Array out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return t.record(OpKind::scale, {a.id}, std::move(out), factor);
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& x = a.value();
  const Array& y = b.value();
  if (x.rank() > 2 || y.rank() > 2 || x.cols() != y.rows()) shape_fail(OpKind::matmul, x, y);
  return t.record(OpKind::matmul, {a.id, b.id}, matmul_plain(x, y));
}

Var tanh(Var a) {
  return unary(a, OpKind::tanh, [](double x) { return std::tanh(x); });
}

Var silu(Var a) {
  return unary(a, OpKind::silu, [](double x) { return x * sigmoid(x); });
}

Var exp(Var a) {
  return unary(a, OpKind::exp, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  return unary(a, OpKind::log, [](double x) { return std::log(x); });
}

Var softplus(Var a) { return unary(a, OpKind::softplus, softplus_value); }

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return t.record(OpKind::sum, {a.id}, Array::scalar(s));
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return t.record(OpKind::mean, {a.id}, Array::scalar(s / static_cast<double>(a.value().size())));
}

Var sq_norm(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().storage()) s += v * v;
  return t.record(OpKind::sq_norm, {a.id}, Array::scalar(s));
}

Var row_sum(Var a) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  Array out({x.rows(), 1});
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
    out[i] = s;
  }
  return t.record(OpKind::row_sum, {a.id}, std::move(out));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.value().rows() != rows) shape_fail(OpKind::concat_cols, parts[0].value(), p.value());
    total += p.value().cols();
    ids.push_back(p.id);
  }
  Array out({rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Array& x = p.value();
    const std::size_t c = x.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, offset + j) = x[i * c + j];
    offset += c;
  }
  return t.record(OpKind::concat_cols, std::move(ids), std::move(out));
}

Var log_softmax(Var a) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  Array out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] - lse;
  }
  return t.record(OpKind::log_softmax, {a.id}, std::move(out));
}

}  // namespace sharpen
