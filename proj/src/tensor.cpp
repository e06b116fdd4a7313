#include "eaa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace eaa {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using Backprop = std::function<void(const std::vector<double>&,
                                    const std::vector<std::vector<double>*>&)>;

Node* req(const Tensor& t, const char* what) {
  if (!t.defined()) throw ValueError(std::string(what) + ": undefined tensor");
  return t.node().get();
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ValueError("tensor shape must have at least one axis");
  for (std::size_t e : shape)
    if (e == 0) throw ValueError("tensor shape has a zero extent: " + shape_str(shape));
}

NodePtr make_node(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                  Backprop bp) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(bp);
  }
  return n;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// Right-aligned broadcast plan: out shape plus per-axis strides into each
// input, zero where the input's extent is 1 (or the axis is missing).
struct Bcast {
  Shape out;
  std::vector<std::size_t> astride, bstride;
};

Bcast make_bcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Bcast bc;
  bc.out.resize(rank);
  bc.astride.assign(rank, 0);
  bc.bstride.assign(rank, 0);
  auto as = row_major_strides(a);
  auto bs = row_major_strides(b);
  for (std::size_t d = 0; d < rank; ++d) {
    const bool a_has = d >= rank - a.size();
    const bool b_has = d >= rank - b.size();
    const std::size_t ae = a_has ? a[d - (rank - a.size())] : 1;
    const std::size_t be = b_has ? b[d - (rank - b.size())] : 1;
    if (ae != be && ae != 1 && be != 1)
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    bc.out[d] = std::max(ae, be);
    if (a_has && ae == bc.out[d] && ae != 1) bc.astride[d] = as[d - (rank - a.size())];
    if (b_has && be == bc.out[d] && be != 1) bc.bstride[d] = bs[d - (rank - b.size())];
  }
  return bc;
}

// Visit every output element of a broadcast op together with the flat indices
// of the contributing input elements. Deterministic row-major order.
template <class F>
void for_each_bcast(const Bcast& bc, F&& f) {
  const std::size_t n = numel(bc.out);
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> ctr(rank, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t k = 0; k < n; ++k) {
    f(k, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      ++ctr[d];
      ai += bc.astride[d];
      bi += bc.bstride[d];
      if (ctr[d] < bc.out[d]) break;
      ai -= bc.astride[d] * bc.out[d];
      bi -= bc.bstride[d] * bc.out[d];
      ctr[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul, div };

Tensor binary_op(const Tensor& ta, const Tensor& tb, BinOp op, const char* name) {
  Node* a = req(ta, name);
  Node* b = req(tb, name);
  Bcast bc = make_bcast(a->shape, b->shape);
  std::vector<double> out(numel(bc.out));
  const double* A = a->data.data();
  const double* B = b->data.data();
  switch (op) {
    case BinOp::add:
      for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) { out[k] = A[ai] + B[bi]; });
      break;
    case BinOp::sub:
      for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) { out[k] = A[ai] - B[bi]; });
      break;
    case BinOp::mul:
      for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) { out[k] = A[ai] * B[bi]; });
      break;
    case BinOp::div:
      for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) { out[k] = A[ai] / B[bi]; });
      break;
  }
  NodePtr an = ta.node(), bn = tb.node();
  Backprop bp = [an, bn, bc, op](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& pg) {
    const double* A = an->data.data();
    const double* B = bn->data.data();
    double* ga = pg[0] ? pg[0]->data() : nullptr;
    double* gb = pg[1] ? pg[1]->data() : nullptr;
    switch (op) {
      case BinOp::add:
        for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) {
          if (ga) ga[ai] += g[k];
          if (gb) gb[bi] += g[k];
        });
        break;
      case BinOp::sub:
        for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) {
          if (ga) ga[ai] += g[k];
          if (gb) gb[bi] -= g[k];
        });
        break;
      case BinOp::mul:
        for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) {
          if (ga) ga[ai] += g[k] * B[bi];
          if (gb) gb[bi] += g[k] * A[ai];
        });
        break;
      case BinOp::div:
        for_each_bcast(bc, [&](std::size_t k, std::size_t ai, std::size_t bi) {
          if (ga) ga[ai] += g[k] / B[bi];
          if (gb) gb[bi] -= g[k] * A[ai] / (B[bi] * B[bi]);
        });
        break;
    }
  };
  return Tensor(make_node(bc.out, std::move(out), {an, bn}, std::move(bp)));
}

Tensor unary_op(const Tensor& ta, const char* name, const std::function<double(double)>& f,
                // dfdx(x, y) where y = f(x)
                const std::function<double(double, double)>& dfdx) {
  Node* a = req(ta, name);
  std::vector<double> out(a->data.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(a->data[k]);
  NodePtr an = ta.node();
  std::vector<double> saved = out;
  Backprop bp = [an, dfdx, saved = std::move(saved)](
                    const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    double* ga = pg[0]->data();
    const double* x = an->data.data();
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * dfdx(x[k], saved[k]);
  };
  return Tensor(make_node(a->shape, std::move(out), {an}, std::move(bp)));
}

}  // namespace

Tensor Tensor::create(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (data.size() != numel(shape))
    throw ValueError("create: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  std::vector<double> d(numel(shape), 0.0);
  return create(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  std::vector<double> d(numel(shape), value);
  return create(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value) { return create({1}, {value}); }

Tensor Tensor::rand_uniform(Shape shape, double lo, double hi, SplitMix64& rng,
                            bool requires_grad) {
  check_shape(shape);
  std::vector<double> d(numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return create(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const { return req(*this, "shape")->shape; }
std::size_t Tensor::size() const { return req(*this, "size")->data.size(); }
std::size_t Tensor::rank() const { return req(*this, "rank")->shape.size(); }

const std::vector<double>& Tensor::data() const { return req(*this, "data")->data; }

std::vector<double>& Tensor::mutable_data() {
  Node* n = req(*this, "mutable_data");
  if (!n->is_leaf()) throw ValueError("mutable_data: only leaf tensors may be edited in place");
  return n->data;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  Node* n = req(*this, "at");
  if (index.size() != n->shape.size())
    throw ShapeError("at: index rank " + std::to_string(index.size()) + " vs tensor rank " +
                     std::to_string(n->shape.size()));
  auto strides = row_major_strides(n->shape);
  std::size_t flat = 0, d = 0;
  for (std::size_t i : index) {
    if (i >= n->shape[d]) throw ShapeError("at: index out of range on axis " + std::to_string(d));
    flat += i * strides[d];
    ++d;
  }
  return n->data[flat];
}

double Tensor::value() const {
  Node* n = req(*this, "value");
  if (n->data.size() != 1)
    throw ValueError("value: tensor has " + std::to_string(n->data.size()) + " elements");
  return n->data[0];
}

bool Tensor::requires_grad() const { return req(*this, "requires_grad")->requires_grad; }
bool Tensor::has_grad() const { return !req(*this, "has_grad")->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  Node* n = req(*this, "grad");
  if (n->grad.empty()) throw ValueError("grad: gradient not populated");
  return n->grad;
}

std::vector<double> Tensor::grad_or_zero() const {
  Node* n = req(*this, "grad_or_zero");
  if (n->grad.empty()) return std::vector<double>(n->data.size(), 0.0);
  return n->grad;
}

void Tensor::zero_grad() { req(*this, "zero_grad")->grad.clear(); }

void Tensor::backward() const {
  Node* root = req(*this, "backward");
  if (root->data.size() != 1)
    throw ValueError("backward: expected a scalar loss, got shape " + shape_str(root->shape));

  // Reverse post-order over parent edges is a topological order: every node
  // is handled before the nodes that produced its inputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      Node* p = top.first->parents[top.second++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> buf;
  buf.emplace(root, std::vector<double>{1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto found = buf.find(n);
    if (found == buf.end()) continue;
    if (!n->is_leaf()) {
      std::vector<std::vector<double>*> pg(n->parents.size(), nullptr);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        Node* p = n->parents[i].get();
        if (!p->requires_grad) continue;
        auto ins = buf.try_emplace(p);
        if (ins.second) ins.first->second.assign(p->data.size(), 0.0);
        pg[i] = &ins.first->second;
      }
      n->backprop(found->second, pg);
    } else if (n->requires_grad) {
      if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
      for (std::size_t k = 0; k < n->grad.size(); ++k) n->grad[k] += found->second[k];
    }
  }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::div, "div"); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(a, "mul_scalar", [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor sub_from_scalar(double c, const Tensor& a) {
  return unary_op(a, "sub_from_scalar", [c](double x) { return c - x; },
                  [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor abs(const Tensor& a) {
  // Subgradient 0 at the kink.
  return unary_op(a, "abs", [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor log_clamped(const Tensor& a, double eps) {
  if (eps <= 0.0) throw ValueError("log_clamped: eps must be positive");
  return unary_op(a, "log_clamped", [eps](double x) { return std::log(x < eps ? eps : x); },
                  [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  auto s = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary_op(a, "sigmoid", s, [](double, double y) { return y * (1.0 - y); });
}

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_stride_per_axis;  // 0 on reduced axes
  std::size_t count = 1;                         // elements folded into each output
};

ReducePlan make_reduce_plan(const Shape& in, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size())
      throw ShapeError("reduce: axis " + std::to_string(axes[i]) + " out of range for " +
                       shape_str(in));
    if (i && axes[i] == axes[i - 1])
      throw ShapeError("reduce: repeated axis " + std::to_string(axes[i]));
  }
  ReducePlan plan;
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t a : axes) {
    reduced[a] = true;
    plan.count *= in[a];
  }
  for (std::size_t d = 0; d < in.size(); ++d)
    if (!reduced[d]) plan.out_shape.push_back(in[d]);
  if (plan.out_shape.empty()) plan.out_shape = {1};
  auto ostr = row_major_strides(plan.out_shape);
  plan.out_stride_per_axis.assign(in.size(), 0);
  std::size_t oi = 0;
  for (std::size_t d = 0; d < in.size(); ++d)
    if (!reduced[d]) plan.out_stride_per_axis[d] = ostr[oi++];
  return plan;
}

// Calls f(input_flat, output_flat) over the whole input, row-major.
template <class F>
void for_each_reduce(const Shape& in, const ReducePlan& plan, F&& f) {
  const std::size_t n = numel(in);
  std::vector<std::size_t> ctr(in.size(), 0);
  std::size_t oi = 0;
  for (std::size_t k = 0; k < n; ++k) {
    f(k, oi);
    for (std::size_t d = in.size(); d-- > 0;) {
      ++ctr[d];
      oi += plan.out_stride_per_axis[d];
      if (ctr[d] < in[d]) break;
      oi -= plan.out_stride_per_axis[d] * in[d];
      ctr[d] = 0;
    }
  }
}

Tensor reduce_impl(const Tensor& ta, std::vector<std::size_t> axes, bool mean, const char* name) {
  Node* a = req(ta, name);
  if (axes.empty()) {
    // Reduction over no axes is the identity.
    NodePtr an = ta.node();
    Backprop bp = [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
      if (!pg[0]) return;
      double* ga = pg[0]->data();
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
    };
    return Tensor(make_node(a->shape, a->data, {an}, std::move(bp)));
  }
  ReducePlan plan = make_reduce_plan(a->shape, std::move(axes));
  std::vector<double> out(numel(plan.out_shape), 0.0);
  const double* A = a->data.data();
  for_each_reduce(a->shape, plan, [&](std::size_t k, std::size_t oi) { out[oi] += A[k]; });
  const double scale = mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
  if (mean)
    for (auto& v : out) v *= scale;
  NodePtr an = ta.node();
  Shape in_shape = a->shape;
  Backprop bp = [plan, in_shape, scale](const std::vector<double>& g,
                                        const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    double* ga = pg[0]->data();
    for_each_reduce(in_shape, plan, [&](std::size_t k, std::size_t oi) { ga[k] += g[oi] * scale; });
  };
  return Tensor(make_node(plan.out_shape, std::move(out), {an}, std::move(bp)));
}

}  // namespace

Tensor reduce_sum(const Tensor& a, std::vector<std::size_t> axes) {
  return reduce_impl(a, std::move(axes), false, "reduce_sum");
}

Tensor reduce_sum_all(const Tensor& a) {
  std::vector<std::size_t> axes(req(a, "reduce_sum_all")->shape.size());
  for (std::size_t d = 0; d < axes.size(); ++d) axes[d] = d;
  return reduce_impl(a, std::move(axes), false, "reduce_sum_all");
}

Tensor reduce_mean(const Tensor& a, std::vector<std::size_t> axes) {
  return reduce_impl(a, std::move(axes), true, "reduce_mean");
}

Tensor reduce_mean_all(const Tensor& a) {
  std::vector<std::size_t> axes(req(a, "reduce_mean_all")->shape.size());
  for (std::size_t d = 0; d < axes.size(); ++d) axes[d] = d;
  return reduce_impl(a, std::move(axes), true, "reduce_mean_all");
}

Tensor softmax(const Tensor& ta, std::size_t axis) {
  Node* a = req(ta, "softmax");
  if (axis >= a->shape.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a->shape));
  const std::size_t K = a->shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a->shape[d];
  for (std::size_t d = axis + 1; d < a->shape.size(); ++d) inner *= a->shape[d];
  std::vector<double> out(a->data.size());
  const double* A = a->data.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * K * inner + i;
      double m = A[base];
      for (std::size_t k = 1; k < K; ++k) m = std::max(m, A[base + k * inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double e = std::exp(A[base + k * inner] - m);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < K; ++k) out[base + k * inner] /= sum;
    }
  }
  NodePtr an = ta.node();
  std::vector<double> p = out;
  Backprop bp = [p = std::move(p), K, outer, inner](const std::vector<double>& g,
                                                    const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    double* ga = pg[0]->data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * K * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += g[base + k * inner] * p[base + k * inner];
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t idx = base + k * inner;
          ga[idx] += p[idx] * (g[idx] - dot);
        }
      }
    }
  };
  return Tensor(make_node(a->shape, std::move(out), {an}, std::move(bp)));
}

Tensor reshape(const Tensor& ta, Shape shape) {
  Node* a = req(ta, "reshape");
  check_shape(shape);
  if (numel(shape) != a->data.size())
    throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(shape));
  NodePtr an = ta.node();
  Backprop bp = [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    double* ga = pg[0]->data();
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  };
  return Tensor(make_node(std::move(shape), a->data, {an}, std::move(bp)));
}

Tensor concat(const Tensor& ta, const Tensor& tb, std::size_t axis) {
  Node* a = req(ta, "concat");
  Node* b = req(tb, "concat");
  if (a->shape.size() != b->shape.size())
    throw ShapeError("concat: rank mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  if (axis >= a->shape.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  for (std::size_t d = 0; d < a->shape.size(); ++d)
    if (d != axis && a->shape[d] != b->shape[d])
      throw ShapeError("concat: extents differ off the concat axis: " + shape_str(a->shape) +
                       " vs " + shape_str(b->shape));
  Shape out_shape = a->shape;
  out_shape[axis] += b->shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a->shape[d];
  for (std::size_t d = axis + 1; d < a->shape.size(); ++d) inner *= a->shape[d];
  const std::size_t ablk = a->shape[axis] * inner;
  const std::size_t bblk = b->shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a->data.data() + o * ablk, ablk, out.data() + o * (ablk + bblk));
    std::copy_n(b->data.data() + o * bblk, bblk, out.data() + o * (ablk + bblk) + ablk);
  }
  NodePtr an = ta.node(), bn = tb.node();
  Backprop bp = [outer, ablk, bblk](const std::vector<double>& g,
                                    const std::vector<std::vector<double>*>& pg) {
    for (std::size_t o = 0; o < outer; ++o) {
      const double* gsrc = g.data() + o * (ablk + bblk);
      if (pg[0]) {
        double* ga = pg[0]->data() + o * ablk;
        for (std::size_t k = 0; k < ablk; ++k) ga[k] += gsrc[k];
      }
      if (pg[1]) {
        double* gb = pg[1]->data() + o * bblk;
        for (std::size_t k = 0; k < bblk; ++k) gb[k] += gsrc[ablk + k];
      }
    }
  };
  return Tensor(make_node(std::move(out_shape), std::move(out), {an, bn}, std::move(bp)));
}

Tensor linear(const Tensor& tx, const Tensor& tw) {
  Node* x = req(tx, "linear");
  Node* w = req(tw, "linear");
  if (x->shape.size() != 2 || w->shape.size() != 2)
    throw ShapeError("linear: expected rank-2 tensors, got " + shape_str(x->shape) + " and " +
                     shape_str(w->shape));
  const std::size_t N = x->shape[0], F = x->shape[1], O = w->shape[0];
  if (w->shape[1] != F)
    throw ShapeError("linear: feature mismatch " + shape_str(x->shape) + " vs " +
                     shape_str(w->shape));
  std::vector<double> out(N * O, 0.0);
  const double* X = x->data.data();
  const double* W = w->data.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = 0.0;
      for (std::size_t f = 0; f < F; ++f) acc += X[n * F + f] * W[o * F + f];
      out[n * O + o] = acc;
    }
  NodePtr xn = tx.node(), wn = tw.node();
  Backprop bp = [xn, wn, N, F, O](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
    const double* X = xn->data.data();
    const double* W = wn->data.data();
    if (pg[0]) {
      double* gx = pg[0]->data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const double gv = g[n * O + o];
          for (std::size_t f = 0; f < F; ++f) gx[n * F + f] += gv * W[o * F + f];
        }
    }
    if (pg[1]) {
      double* gw = pg[1]->data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const double gv = g[n * O + o];
          for (std::size_t f = 0; f < F; ++f) gw[o * F + f] += gv * X[n * F + f];
        }
    }
  };
  return Tensor(make_node({N, O}, std::move(out), {xn, wn}, std::move(bp)));
}

namespace {

struct ConvDims {
  std::int64_t N, Ci, H, W, Co, K, OH, OW, stride, pad;
};

ConvDims conv_dims(const Node* x, const Node* w, const Node* b, std::size_t stride,
                   std::size_t padding, const char* name) {
  if (x->shape.size() != 4)
    throw ShapeError(std::string(name) + ": input must be [N,C,H,W], got " + shape_str(x->shape));
  if (w->shape.size() != 4)
    throw ShapeError(std::string(name) + ": weight must be rank 4, got " + shape_str(w->shape));
  if (w->shape[2] != w->shape[3])
    throw ShapeError(std::string(name) + ": kernel must be square, got " + shape_str(w->shape));
  if (b->shape.size() != 1)
    throw ShapeError(std::string(name) + ": bias must be rank 1, got " + shape_str(b->shape));
  if (stride == 0) throw ShapeError(std::string(name) + ": stride must be positive");
  ConvDims d;
  d.N = static_cast<std::int64_t>(x->shape[0]);
  d.Ci = static_cast<std::int64_t>(x->shape[1]);
  d.H = static_cast<std::int64_t>(x->shape[2]);
  d.W = static_cast<std::int64_t>(x->shape[3]);
  d.K = static_cast<std::int64_t>(w->shape[2]);
  d.stride = static_cast<std::int64_t>(stride);
  d.pad = static_cast<std::int64_t>(padding);
  return d;
}

}  // namespace

Tensor conv2d_raw(const Tensor& tx, const Tensor& tw, const Tensor& tb, std::size_t stride,
                  std::size_t padding) {
  Node* x = req(tx, "conv2d");
  Node* w = req(tw, "conv2d");
  Node* b = req(tb, "conv2d");
  ConvDims d = conv_dims(x, w, b, stride, padding, "conv2d");
  d.Co = static_cast<std::int64_t>(w->shape[0]);
  if (w->shape[1] != x->shape[1])
    throw ShapeError("conv2d: input has " + std::to_string(x->shape[1]) +
                     " channels but weight expects " + std::to_string(w->shape[1]));
  if (b->shape[0] != w->shape[0])
    throw ShapeError("conv2d: bias extent " + std::to_string(b->shape[0]) +
                     " does not match " + std::to_string(w->shape[0]) + " output channels");
  if (d.H + 2 * d.pad < d.K || d.W + 2 * d.pad < d.K)
    throw ShapeError("conv2d: kernel " + std::to_string(d.K) + " larger than padded input " +
                     shape_str(x->shape));
  d.OH = (d.H + 2 * d.pad - d.K) / d.stride + 1;
  d.OW = (d.W + 2 * d.pad - d.K) / d.stride + 1;

  std::vector<double> out(static_cast<std::size_t>(d.N * d.Co * d.OH * d.OW));
  const double* X = x->data.data();
  const double* W = w->data.data();
  const double* B = b->data.data();
  for (std::int64_t n = 0; n < d.N; ++n)
    for (std::int64_t co = 0; co < d.Co; ++co) {
      double* o = out.data() + (n * d.Co + co) * d.OH * d.OW;
      std::fill_n(o, d.OH * d.OW, B[co]);
      for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
        const double* xc = X + (n * d.Ci + ci) * d.H * d.W;
        const double* wc = W + (co * d.Ci + ci) * d.K * d.K;
        for (std::int64_t kh = 0; kh < d.K; ++kh)
          for (std::int64_t kw = 0; kw < d.K; ++kw) {
            const double wv = wc[kh * d.K + kw];
            for (std::int64_t oh = 0; oh < d.OH; ++oh) {
              const std::int64_t ih = oh * d.stride - d.pad + kh;
              if (ih < 0 || ih >= d.H) continue;
              const double* xrow = xc + ih * d.W;
              double* orow = o + oh * d.OW;
              for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                const std::int64_t iw = ow * d.stride - d.pad + kw;
                if (iw < 0 || iw >= d.W) continue;
                orow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }

  NodePtr xn = tx.node(), wn = tw.node(), bn = tb.node();
  Backprop bp = [xn, wn, d](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
    const double* X = xn->data.data();
    const double* W = wn->data.data();
    double* gx = pg[0] ? pg[0]->data() : nullptr;
    double* gw = pg[1] ? pg[1]->data() : nullptr;
    double* gb = pg[2] ? pg[2]->data() : nullptr;
    for (std::int64_t n = 0; n < d.N; ++n)
      for (std::int64_t co = 0; co < d.Co; ++co) {
        const double* go = g.data() + (n * d.Co + co) * d.OH * d.OW;
        if (gb) {
          double acc = 0.0;
          for (std::int64_t k = 0; k < d.OH * d.OW; ++k) acc += go[k];
          gb[co] += acc;
        }
        if (!gx && !gw) continue;
        for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
          const double* xc = X + (n * d.Ci + ci) * d.H * d.W;
          double* gxc = gx ? gx + (n * d.Ci + ci) * d.H * d.W : nullptr;
          const double* wc = W + (co * d.Ci + ci) * d.K * d.K;
          double* gwc = gw ? gw + (co * d.Ci + ci) * d.K * d.K : nullptr;
          for (std::int64_t kh = 0; kh < d.K; ++kh)
            for (std::int64_t kw = 0; kw < d.K; ++kw) {
              const double wv = wc[kh * d.K + kw];
              double wacc = 0.0;
              for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                const std::int64_t ih = oh * d.stride - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                const double* grow = go + oh * d.OW;
                const double* xrow = xc + ih * d.W;
                double* gxrow = gxc ? gxc + ih * d.W : nullptr;
                for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                  const std::int64_t iw = ow * d.stride - d.pad + kw;
                  if (iw < 0 || iw >= d.W) continue;
                  if (gxrow) gxrow[iw] += wv * grow[ow];
                  wacc += xrow[iw] * grow[ow];
                }
              }
              if (gwc) gwc[kh * d.K + kw] += wacc;
            }
        }
      }
  };
  Shape out_shape{static_cast<std::size_t>(d.N), static_cast<std::size_t>(d.Co),
                  static_cast<std::size_t>(d.OH), static_cast<std::size_t>(d.OW)};
  return Tensor(make_node(std::move(out_shape), std::move(out), {xn, wn, bn}, std::move(bp)));
}

Tensor conv_transpose2d_raw(const Tensor& tx, const Tensor& tw, const Tensor& tb,
                            std::size_t stride, std::size_t padding,
                            std::size_t output_padding) {
  Node* x = req(tx, "conv_transpose2d");
  Node* w = req(tw, "conv_transpose2d");
  Node* b = req(tb, "conv_transpose2d");
  ConvDims d = conv_dims(x, w, b, stride, padding, "conv_transpose2d");
  // Weight layout [Cin, Cout, k, k]: byte-compatible with the conv weight of
  // the adjoint map.
  d.Co = static_cast<std::int64_t>(w->shape[1]);
  if (w->shape[0] != x->shape[1])
    throw ShapeError("conv_transpose2d: input has " + std::to_string(x->shape[1]) +
                     " channels but weight expects " + std::to_string(w->shape[0]));
  if (b->shape[0] != w->shape[1])
    throw ShapeError("conv_transpose2d: bias extent " + std::to_string(b->shape[0]) +
                     " does not match " + std::to_string(w->shape[1]) + " output channels");
  const std::int64_t op = static_cast<std::int64_t>(output_padding);
  if (op >= d.stride && !(op == 0 && d.stride == 1))
    throw ShapeError("conv_transpose2d: output_padding must be smaller than stride");
  d.OH = (d.H - 1) * d.stride - 2 * d.pad + d.K + op;
  d.OW = (d.W - 1) * d.stride - 2 * d.pad + d.K + op;
  if (d.OH < 1 || d.OW < 1)
    throw ShapeError("conv_transpose2d: non-positive output extent for input " +
                     shape_str(x->shape));

  std::vector<double> out(static_cast<std::size_t>(d.N * d.Co * d.OH * d.OW));
  const double* X = x->data.data();
  const double* W = w->data.data();
  const double* B = b->data.data();
  for (std::int64_t n = 0; n < d.N; ++n)
    for (std::int64_t co = 0; co < d.Co; ++co) {
      double* o = out.data() + (n * d.Co + co) * d.OH * d.OW;
      std::fill_n(o, d.OH * d.OW, B[co]);
      for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
        const double* xc = X + (n * d.Ci + ci) * d.H * d.W;
        const double* wc = W + (ci * d.Co + co) * d.K * d.K;
        for (std::int64_t kh = 0; kh < d.K; ++kh)
          for (std::int64_t kw = 0; kw < d.K; ++kw) {
            const double wv = wc[kh * d.K + kw];
            for (std::int64_t ih = 0; ih < d.H; ++ih) {
              const std::int64_t oh = ih * d.stride - d.pad + kh;
              if (oh < 0 || oh >= d.OH) continue;
              const double* xrow = xc + ih * d.W;
              double* orow = o + oh * d.OW;
              for (std::int64_t iw = 0; iw < d.W; ++iw) {
                const std::int64_t ow = iw * d.stride - d.pad + kw;
                if (ow < 0 || ow >= d.OW) continue;
                orow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }

  NodePtr xn = tx.node(), wn = tw.node(), bn = tb.node();
  Backprop bp = [xn, wn, d](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
    const double* X = xn->data.data();
    const double* W = wn->data.data();
    double* gx = pg[0] ? pg[0]->data() : nullptr;
    double* gw = pg[1] ? pg[1]->data() : nullptr;
    double* gb = pg[2] ? pg[2]->data() : nullptr;
    if (gb) {
      for (std::int64_t n = 0; n < d.N; ++n)
        for (std::int64_t co = 0; co < d.Co; ++co) {
          const double* go = g.data() + (n * d.Co + co) * d.OH * d.OW;
          double acc = 0.0;
          for (std::int64_t k = 0; k < d.OH * d.OW; ++k) acc += go[k];
          gb[co] += acc;
        }
    }
    if (!gx && !gw) return;
    for (std::int64_t n = 0; n < d.N; ++n)
      for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
        const double* xc = X + (n * d.Ci + ci) * d.H * d.W;
        double* gxc = gx ? gx + (n * d.Ci + ci) * d.H * d.W : nullptr;
        for (std::int64_t co = 0; co < d.Co; ++co) {
          const double* go = g.data() + (n * d.Co + co) * d.OH * d.OW;
          const double* wc = W + (ci * d.Co + co) * d.K * d.K;
          double* gwc = gw ? gw + (ci * d.Co + co) * d.K * d.K : nullptr;
          for (std::int64_t kh = 0; kh < d.K; ++kh)
            for (std::int64_t kw = 0; kw < d.K; ++kw) {
              const double wv = wc[kh * d.K + kw];
              double wacc = 0.0;
              for (std::int64_t ih = 0; ih < d.H; ++ih) {
                const std::int64_t oh = ih * d.stride - d.pad + kh;
                if (oh < 0 || oh >= d.OH) continue;
                const double* grow = go + oh * d.OW;
                const double* xrow = xc + ih * d.W;
                double* gxrow = gxc ? gxc + ih * d.W : nullptr;
                for (std::int64_t iw = 0; iw < d.W; ++iw) {
                  const std::int64_t ow = iw * d.stride - d.pad + kw;
                  if (ow < 0 || ow >= d.OW) continue;
                  if (gxrow) gxrow[iw] += wv * grow[ow];
                  wacc += xrow[iw] * grow[ow];
                }
              }
              if (gwc) gwc[kh * d.K + kw] += wacc;
            }
        }
      }
  };
  Shape out_shape{static_cast<std::size_t>(d.N), static_cast<std::size_t>(d.Co),
                  static_cast<std::size_t>(d.OH), static_cast<std::size_t>(d.OW)};
  return Tensor(make_node(std::move(out_shape), std::move(out), {xn, wn, bn}, std::move(bp)));
}

Tensor maxpool2d(const Tensor& tx) {
  Node* x = req(tx, "maxpool2d");
  if (x->shape.size() != 4)
    throw ShapeError("maxpool2d: input must be [N,C,H,W], got " + shape_str(x->shape));
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("maxpool2d: extents must be even, got " + shape_str(x->shape));
  const std::size_t OH = H / 2, OW = W / 2;
  std::vector<double> out(N * C * OH * OW);
  std::vector<std::size_t> arg(out.size());
  const double* X = x->data.data();
  std::size_t oi = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* xc = X + nc * H * W;
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow, ++oi) {
        const std::size_t h0 = oh * 2, w0 = ow * 2;
        std::size_t best = h0 * W + w0;
        double bv = xc[best];
        const std::size_t cands[3] = {h0 * W + w0 + 1, (h0 + 1) * W + w0, (h0 + 1) * W + w0 + 1};
        for (std::size_t c : cands)
          if (xc[c] > bv) {
            bv = xc[c];
            best = c;
          }
        out[oi] = bv;
        arg[oi] = base + best;
      }
  }
  NodePtr xn = tx.node();
  Backprop bp = [arg = std::move(arg)](const std::vector<double>& g,
                                       const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    double* gx = pg[0]->data();
    for (std::size_t k = 0; k < g.size(); ++k) gx[arg[k]] += g[k];
  };
  return Tensor(make_node({N, C, OH, OW}, std::move(out), {xn}, std::move(bp)));
}

namespace {

void check_bn_shapes(const Node* x, const Node* gamma, const Node* beta, const char* name) {
  if (x->shape.size() != 4)
    throw ShapeError(std::string(name) + ": input must be [N,C,H,W], got " + shape_str(x->shape));
  const std::size_t C = x->shape[1];
  if (gamma->shape != Shape{C} || beta->shape != Shape{C})
    throw ShapeError(std::string(name) + ": gamma/beta must have shape [" + std::to_string(C) +
                     "], got " + shape_str(gamma->shape) + " and " + shape_str(beta->shape));
}

}  // namespace

Tensor batchnorm_train(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta, double eps,
                       std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  Node* x = req(tx, "batchnorm_train");
  Node* gamma = req(tgamma, "batchnorm_train");
  Node* beta = req(tbeta, "batchnorm_train");
  check_bn_shapes(x, gamma, beta, "batchnorm_train");
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const std::size_t m = N * H * W;
  if (m <= 1)
    throw ValueError("batchnorm_train: batch statistics need more than one value per channel");
  const std::size_t plane = H * W;
  const double* X = x->data.data();
  std::vector<double> mean(C, 0.0), var(C, 0.0), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = X + (n * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
    }
    mean[c] = s / static_cast<double>(m);
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = X + (n * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double dlt = p[k] - mean[c];
        v += dlt * dlt;
      }
    }
    var[c] = v / static_cast<double>(m);
    invstd[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  std::vector<double> xhat(x->data.size());
  std::vector<double> out(x->data.size());
  const double* G = gamma->data.data();
  const double* Bt = beta->data.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = X + (n * C + c) * plane;
      double* xh = xhat.data() + (n * C + c) * plane;
      double* o = out.data() + (n * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        xh[k] = (p[k] - mean[c]) * invstd[c];
        o[k] = G[c] * xh[k] + Bt[c];
      }
    }

  NodePtr xn = tx.node(), gn = tgamma.node(), bn = tbeta.node();
  Backprop bp = [gn, xhat = std::move(xhat), invstd = std::move(invstd), N, C, plane, m](
                    const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
    const double* G = gn->data.data();
    const double md = static_cast<double>(m);
    for (std::size_t c = 0; c < C; ++c) {
      double gsum = 0.0, gxsum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          gsum += g[off + k];
          gxsum += g[off + k] * xhat[off + k];
        }
      }
      if (pg[1]) (*pg[1])[c] += gxsum;
      if (pg[2]) (*pg[2])[c] += gsum;
      if (pg[0]) {
        double* gx = pg[0]->data();
        const double scale = G[c] * invstd[c] / md;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * plane;
          for (std::size_t k = 0; k < plane; ++k)
            gx[off + k] += scale * (md * g[off + k] - gsum - xhat[off + k] * gxsum);
        }
      }
    }
  };
  return Tensor(make_node(x->shape, std::move(out), {xn, gn, bn}, std::move(bp)));
}

Tensor batchnorm_eval(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta,
                      const std::vector<double>& running_mean,
                      const std::vector<double>& running_var, double eps) {
  Node* x = req(tx, "batchnorm_eval");
  Node* gamma = req(tgamma, "batchnorm_eval");
  Node* beta = req(tbeta, "batchnorm_eval");
  check_bn_shapes(x, gamma, beta, "batchnorm_eval");
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (running_mean.size() != C || running_var.size() != C)
    throw ShapeError("batchnorm_eval: running statistics extent does not match " +
                     std::to_string(C) + " channels");
  const std::size_t plane = H * W;
  std::vector<double> invstd(C);
  for (std::size_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
  std::vector<double> out(x->data.size());
  const double* X = x->data.data();
  const double* G = gamma->data.data();
  const double* Bt = beta->data.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = X + (n * C + c) * plane;
      double* o = out.data() + (n * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) o[k] = G[c] * (p[k] - running_mean[c]) * invstd[c] + Bt[c];
    }
  NodePtr xn = tx.node(), gn = tgamma.node(), bn = tbeta.node();
  Backprop bp = [xn, gn, rm = running_mean, invstd = std::move(invstd), N, C, plane](
                    const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
    const double* X = xn->data.data();
    const double* G = gn->data.data();
    for (std::size_t c = 0; c < C; ++c) {
      double gsum = 0.0, gxsum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          gsum += g[off + k];
          gxsum += g[off + k] * (X[off + k] - rm[c]) * invstd[c];
        }
      }
      if (pg[1]) (*pg[1])[c] += gxsum;
      if (pg[2]) (*pg[2])[c] += gsum;
      if (pg[0]) {
        double* gx = pg[0]->data();
        const double scale = G[c] * invstd[c];
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * plane;
          for (std::size_t k = 0; k < plane; ++k) gx[off + k] += scale * g[off + k];
        }
      }
    }
  };
  return Tensor(make_node(x->shape, std::move(out), {xn, gn, bn}, std::move(bp)));
}

std::vector<std::uint8_t> argmax_channel(const Tensor& scores) {
  Node* s = req(scores, "argmax_channel");
  if (s->shape.size() != 4)
    throw ShapeError("argmax_channel: expected [N,K,H,W], got " + shape_str(s->shape));
  const std::size_t N = s->shape[0], K = s->shape[1], H = s->shape[2], W = s->shape[3];
  const std::size_t plane = H * W;
  std::vector<std::uint8_t> out(N * plane);
  const double* X = s->data.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      double bv = X[n * K * plane + p];
      for (std::size_t k = 1; k < K; ++k) {
        const double v = X[(n * K + k) * plane + p];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[n * plane + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

}  // namespace eaa
