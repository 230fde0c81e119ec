#include "defgen/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "defgen/error.hpp"

namespace defgen {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape));
  }
  AxisLayout layout;
  for (int i = 0; i < ax; ++i) layout.outer *= shape[i];
  layout.n = shape[ax];
  for (int i = ax + 1; i < rank; ++i) layout.inner *= shape[i];
  return layout;
}

}  // namespace

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) throw IndexError("graph variable out of range");
  return nodes_[v.id];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw IndexError("graph variable out of range");
  return nodes_[v.id];
}

Var Graph::push(Node n) {
  if (n.op != Op::Leaf) {
    for (std::uint32_t in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Graph::param(const Tensor& tensor) {
  Node n;
  n.op = Op::Leaf;
  n.external = &tensor;
  if (tensor.requires_grad()) {
    n.param = const_cast<Tensor*>(&tensor);
    n.needs_grad = true;
  }
  return push(std::move(n));
}

const Tensor& Graph::value(Var v) const { return node(v).value(); }

std::span<const double> Graph::grad(Var v) const { return node(v).grad; }

Var Graph::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2(ta, "matmul");
  require_rank2(tb, "matmul");
  if (ta.dim(1) != tb.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(ta.shape()) + " x " +
                         shape_to_string(tb.shape()));
  }
  const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Node out;
  out.op = Op::MatMul;
  out.inputs = {a.id, b.id};
  out.owned = Tensor({m, n});
  gemm_nn(ta.data().data(), tb.data().data(), out.owned.data().data(), m, k, n);
  return push(std::move(out));
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2(ta, "matmul_nt");
  require_rank2(tb, "matmul_nt");
  if (ta.dim(1) != tb.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_to_string(ta.shape()) + " x " +
                         shape_to_string(tb.shape()) + "^T");
  }
  const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
  Node out;
  out.op = Op::MatMulNT;
  out.inputs = {a.id, b.id};
  out.owned = Tensor({m, n});
  gemm_nt(ta.data().data(), tb.data().data(), out.owned.data().data(), m, k, n);
  return push(std::move(out));
}

Var Graph::transpose(Var a) {
  const Tensor& ta = value(a);
  require_rank2(ta, "transpose");
  const std::size_t m = ta.dim(0), n = ta.dim(1);
  Node out;
  out.op = Op::Transpose;
  out.inputs = {a.id};
  out.owned = Tensor({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.owned.at(j, i) = ta.at(i, j);
  return push(std::move(out));
}

Var Graph::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "add");
  Node out;
  out.op = Op::Add;
  out.inputs = {a.id, b.id};
  out.owned = Tensor(ta.shape(), ta.values());
  auto o = out.owned.data();
  auto bd = tb.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return push(std::move(out));
}

Var Graph::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "sub");
  Node out;
  out.op = Op::Sub;
  out.inputs = {a.id, b.id};
  out.owned = Tensor(ta.shape());
  auto o = out.owned.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ta[i] - tb[i];
  return push(std::move(out));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "mul");
  Node out;
  out.op = Op::Mul;
  out.inputs = {a.id, b.id};
  out.owned = Tensor(ta.shape());
  auto o = out.owned.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ta[i] * tb[i];
  return push(std::move(out));
}

Var Graph::scale(Var a, double factor) {
  const Tensor& ta = value(a);
  Node out;
  out.op = Op::Scale;
  out.inputs = {a.id};
  out.scalar = factor;
  out.owned = Tensor(ta.shape());
  auto o = out.owned.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ta[i] * factor;
  return push(std::move(out));
}

Var Graph::add_bias(Var x, Var bias) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(bias);
  if (tb.numel() != tx.cols()) {
    throw DimensionError("add_bias: bias " + shape_to_string(tb.shape()) + " does not match rows of " +
                         shape_to_string(tx.shape()));
  }
  Node out;
  out.op = Op::AddBias;
  out.inputs = {x.id, bias.id};
  out.owned = Tensor(tx.shape());
  const std::size_t n = tx.cols();
  auto o = out.owned.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = tx[i] + tb[i % n];
  return push(std::move(out));
}

Var Graph::softmax(Var x, int axis) {
  const Tensor& tx = value(x);
  const AxisLayout lay = axis_layout(tx.shape(), axis);
  Node out;
  out.op = Op::Softmax;
  out.inputs = {x.id};
  out.a = lay.n;
  out.b = lay.inner;
  out.owned = Tensor(tx.shape());
  auto o = out.owned.data();
  auto in = tx.data();
  for (std::size_t outer = 0; outer < lay.outer; ++outer) {
    for (std::size_t inner = 0; inner < lay.inner; ++inner) {
      const std::size_t base = outer * lay.n * lay.inner + inner;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lay.n; ++j) {
        const double v = in[base + j * lay.inner];
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < lay.n; ++j) {
        const double e = std::exp(in[base + j * lay.inner] - mx);
        o[base + j * lay.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < lay.n; ++j) o[base + j * lay.inner] /= total;
    }
  }
  return push(std::move(out));
}

Var Graph::masked_softmax(Var scores, std::span<const std::uint8_t> key_keep, bool causal) {
  const Tensor& ts = value(scores);
  require_rank2(ts, "masked_softmax");
  const std::size_t m = ts.dim(0), n = ts.dim(1);
  if (!key_keep.empty() && key_keep.size() != n) {
    throw DimensionError("masked_softmax: key mask length " + std::to_string(key_keep.size()) +
                         " does not match " + std::to_string(n) + " columns");
  }
  Node out;
  out.op = Op::MaskedSoftmax;
  out.inputs = {scores.id};
  out.owned = Tensor({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto keep = [&](std::size_t j) {
      if (causal && j > i) return false;
      return key_keep.empty() || key_keep[j] != 0;
    };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const double v = ts.at(i, j);
      if (!std::isfinite(v)) throw NumericError("masked_softmax: non-finite input");
      if (keep(j)) mx = std::max(mx, v);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully hidden row stays zero
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep(j)) continue;
      const double e = std::exp(ts.at(i, j) - mx);
      out.owned.at(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.owned.at(i, j) /= total;
  }
  return push(std::move(out));
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  const std::size_t d = tx.cols();
  if (tg.numel() != d || tb.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(tg.shape()) + "/" + shape_to_string(tb.shape()) +
                         " do not match feature size of " + shape_to_string(tx.shape()));
  }
  const std::size_t rows = tx.rows();
  Node out;
  out.op = Op::LayerNorm;
  out.inputs = {x.id, gain.id, bias.id};
  out.owned = Tensor(tx.shape());
  // saved: normalized values, then one inverse std per row
  out.saved.resize(tx.numel() + rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = tx.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    out.saved[tx.numel() + r] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (row[j] - mu) * rstd;
      out.saved[r * d + j] = xhat;
      out.owned[r * d + j] = xhat * tg[j] + tb[j];
    }
  }
  return push(std::move(out));
}

Var Graph::gelu(Var x) {
  const Tensor& tx = value(x);
  Node out;
  out.op = Op::Gelu;
  out.inputs = {x.id};
  out.owned = Tensor(tx.shape());
  out.saved.resize(tx.numel());  // tanh(u)
  for (std::size_t i = 0; i < tx.numel(); ++i) {
    const double v = tx[i];
    const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
    out.saved[i] = t;
    out.owned[i] = 0.5 * v * (1.0 + t);
  }
  return push(std::move(out));
}

Var Graph::relu(Var x) {
  const Tensor& tx = value(x);
  Node out;
  out.op = Op::Relu;
  out.inputs = {x.id};
  out.owned = Tensor(tx.shape());
  for (std::size_t i = 0; i < tx.numel(); ++i) out.owned[i] = tx[i] > 0.0 ? tx[i] : 0.0;
  return push(std::move(out));
}

Var Graph::dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  const Tensor& tx = value(x);
  Node out;
  out.op = Op::Dropout;
  out.inputs = {x.id};
  out.owned = Tensor(tx.shape());
  out.saved.resize(tx.numel());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < tx.numel(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    out.saved[i] = m;
    out.owned[i] = tx[i] * m;
  }
  return push(std::move(out));
}

Var Graph::gather_rows(Var table, std::span<const TokenId> ids) {
  const Tensor& tt = value(table);
  require_rank2(tt, "gather_rows");
  const std::size_t vocab = tt.dim(0), d = tt.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  Node out;
  out.op = Op::GatherRows;
  out.inputs = {table.id};
  out.owned = Tensor({ids.size(), d});
  out.index.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("id " + std::to_string(ids[i]) + " out of range for table of " + std::to_string(vocab) +
                       " rows");
    }
    std::copy_n(tt.row(static_cast<std::size_t>(ids[i])).begin(), d, out.owned.row(i).begin());
  }
  return push(std::move(out));
}

Var Graph::slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& tx = value(x);
  require_rank2(tx, "slice_cols");
  if (begin >= end || end > tx.dim(1)) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
                         shape_to_string(tx.shape()));
  }
  const std::size_t m = tx.dim(0), w = end - begin;
  Node out;
  out.op = Op::SliceCols;
  out.inputs = {x.id};
  out.a = begin;
  out.owned = Tensor({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.owned.at(i, j) = tx.at(i, begin + j);
  return push(std::move(out));
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t m = value(parts[0]).dim(0);
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    require_rank2(t, "concat_cols");
    if (t.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    total += t.dim(1);
  }
  Node out;
  out.op = Op::ConcatCols;
  out.owned = Tensor({m, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    out.inputs.push_back(p.id);
    const Tensor& t = value(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < t.dim(1); ++j) out.owned.at(i, offset + j) = t.at(i, j);
    offset += t.dim(1);
  }
  return push(std::move(out));
}

Var Graph::cross_entropy(Var logits, std::span<const TokenId> targets, TokenId ignore_id, Reduction reduction) {
  const Tensor& tl = value(logits);
  require_rank2(tl, "cross_entropy");
  const std::size_t rows = tl.dim(0), vocab = tl.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                         " logit rows");
  }
  Node out;
  out.op = Op::CrossEntropy;
  out.inputs = {logits.id};
  out.index.assign(targets.begin(), targets.end());
  out.saved.assign(tl.numel(), 0.0);  // softmax of counted rows
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const TokenId t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
    auto row = tl.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) {
      if (!std::isfinite(v)) throw NumericError("cross_entropy: non-finite logit");
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[static_cast<std::size_t>(t)];
    for (std::size_t j = 0; j < vocab; ++j) out.saved[r * vocab + j] = std::exp(row[j] - log_z);
    ++counted;
  }
  out.scalar = ignore_id;
  double divisor = 1.0;
  if (reduction == Reduction::Mean && counted > 0) divisor = static_cast<double>(counted);
  out.b = counted;
  out.owned = Tensor::scalar(total / divisor);
  out.saved.push_back(divisor);
  return push(std::move(out));
}

Var Graph::sum(Var x) {
  const Tensor& tx = value(x);
  Node out;
  out.op = Op::Sum;
  out.inputs = {x.id};
  double s = 0.0;
  for (double v : tx.data()) s += v;
  out.owned = Tensor::scalar(s);
  return push(std::move(out));
}

Var Graph::mean(Var x) {
  const Tensor& tx = value(x);
  Node out;
  out.op = Op::Mean;
  out.inputs = {x.id};
  double s = 0.0;
  for (double v : tx.data()) s += v;
  out.owned = Tensor::scalar(s / static_cast<double>(tx.numel()));
  return push(std::move(out));
}

std::vector<double>& Graph::ensure_grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value().numel()) n.grad.assign(n.value().numel(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  const Node& l = node(loss);
  if (l.value().numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_to_string(l.value().shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  if (!l.needs_grad) return;
  ensure_grad(loss.id)[0] = 1.0;
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.op == Op::Leaf) {
      if (n.param) {
        auto g = n.param->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
      continue;
    }
    backward_node(id);
  }
}

void Graph::backward_node(std::uint32_t id) {
  // Input gradient buffers are fetched through ensure_grad only when the
  // input needs one; references into nodes_ stay valid since no node is added.
  Node& n = nodes_[id];
  const std::vector<double>& g = n.grad;
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
  auto in_value = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value(); };

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::MatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
      if (wants(0)) gemm_nt(g.data(), b.data().data(), ensure_grad(n.inputs[0]).data(), m, cols, k);
      if (wants(1)) gemm_tn(a.data().data(), g.data(), ensure_grad(n.inputs[1]).data(), m, k, cols);
      break;
    }
    case Op::MatMulNT: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(0);
      if (wants(0)) gemm_nn(g.data(), b.data().data(), ensure_grad(n.inputs[0]).data(), m, cols, k);
      if (wants(1)) gemm_tn(g.data(), a.data().data(), ensure_grad(n.inputs[1]).data(), m, cols, k);
      break;
    }
    case Op::Transpose: {
      if (!wants(0)) break;
      const Tensor& a = in_value(0);
      const std::size_t m = a.dim(0), cols = a.dim(1);
      auto& ga = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j * m + i];
      break;
    }
    case Op::Add:
    case Op::Sub: {
      if (wants(0)) {
        auto& ga = ensure_grad(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = ensure_grad(n.inputs[1]);
        const double sign = n.op == Op::Add ? 1.0 : -1.0;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
      break;
    }
    case Op::Mul: {
      if (wants(0)) {
        const Tensor& b = in_value(1);
        auto& ga = ensure_grad(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (wants(1)) {
        const Tensor& a = in_value(0);
        auto& gb = ensure_grad(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::Scale: {
      if (!wants(0)) break;
      auto& ga = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
      break;
    }
    case Op::AddBias: {
      if (wants(0)) {
        auto& gx = ensure_grad(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = ensure_grad(n.inputs[1]);
        const std::size_t cols = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
      }
      break;
    }
    case Op::Softmax: {
      if (!wants(0)) break;
      const Tensor& y = n.owned;
      const std::size_t len = n.a, inner = n.b;
      const std::size_t outer = y.numel() / (len * inner);
      auto& gx = ensure_grad(n.inputs[0]);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
      break;
    }
    case Op::MaskedSoftmax: {
      if (!wants(0)) break;
      const Tensor& y = n.owned;
      const std::size_t m = y.dim(0), cols = y.dim(1);
      auto& gx = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y.at(i, j);
        for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += y.at(i, j) * (g[i * cols + j] - dot);
      }
      break;
    }
    case Op::LayerNorm: {
      const Tensor& gain = in_value(1);
      const std::size_t d = gain.numel();
      const std::size_t numel = n.owned.numel();
      const std::size_t rows = numel / d;
      const double* xhat = n.saved.data();
      const double* rstd = n.saved.data() + numel;
      if (wants(1)) {
        auto& gg = ensure_grad(n.inputs[1]);
        for (std::size_t i = 0; i < numel; ++i) gg[i % d] += g[i] * xhat[i];
      }
      if (wants(2)) {
        auto& gbias = ensure_grad(n.inputs[2]);
        for (std::size_t i = 0; i < numel; ++i) gbias[i % d] += g[i];
      }
      if (wants(0)) {
        auto& gx = ensure_grad(n.inputs[0]);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxhat = g[r * d + j] * gain[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[r * d + j];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxhat = g[r * d + j] * gain[j];
            gx[r * d + j] += rstd[r] * (dxhat - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
          }
        }
      }
      break;
    }
    case Op::Gelu: {
      if (!wants(0)) break;
      const Tensor& x = in_value(0);
      auto& gx = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double t = n.saved[i];
        const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
      break;
    }
    case Op::Relu: {
      if (!wants(0)) break;
      const Tensor& x = in_value(0);
      auto& gx = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::Dropout: {
      if (!wants(0)) break;
      auto& gx = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * n.saved[i];
      break;
    }
    case Op::GatherRows: {
      if (!wants(0)) break;
      auto& gt = ensure_grad(n.inputs[0]);
      const std::size_t d = n.owned.dim(1);
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(n.index[i]) * d;
        for (std::size_t j = 0; j < d; ++j) gt[base + j] += g[i * d + j];
      }
      break;
    }
    case Op::SliceCols: {
      if (!wants(0)) break;
      const Tensor& x = in_value(0);
      auto& gx = ensure_grad(n.inputs[0]);
      const std::size_t m = n.owned.dim(0), w = n.owned.dim(1), cols = x.dim(1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * cols + n.a + j] += g[i * w + j];
      break;
    }
    case Op::ConcatCols: {
      const std::size_t m = n.owned.dim(0), total = n.owned.dim(1);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = in_value(k).dim(1);
        if (wants(k)) {
          auto& gp = ensure_grad(n.inputs[k]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + offset + j];
        }
        offset += w;
      }
      break;
    }
    case Op::CrossEntropy: {
      if (!wants(0)) break;
      const Tensor& logits = in_value(0);
      const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
      const double divisor = n.saved.back();
      const double scale = g[0] / divisor;
      const auto ignore = static_cast<TokenId>(n.scalar);
      auto& gl = ensure_grad(n.inputs[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const TokenId t = static_cast<TokenId>(n.index[r]);
        if (t == ignore) continue;
        for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += scale * n.saved[r * vocab + j];
        gl[r * vocab + static_cast<std::size_t>(t)] -= scale;
      }
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      if (!wants(0)) break;
      auto& gx = ensure_grad(n.inputs[0]);
      const double each = n.op == Op::Sum ? g[0] : g[0] / static_cast<double>(gx.size());
      for (double& v : gx) v += each;
      break;
    }
  }
}

}  // namespace defgen
