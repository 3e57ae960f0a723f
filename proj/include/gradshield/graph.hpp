#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <string_view>
#include <type_traits>
#include <vector>

#include "gradshield/tensor.hpp"

namespace gradshield {

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Conv2d,
  Upsample2x,
  LeakyRelu,
  Sigmoid,
  Abs,
  Square,
  Concat,
  Slice,
  Sum,
  Mean,
  Reflect,
};

std::string_view op_name(OpKind kind);

// c + k (c - x), evaluated one precision level up so that x == c returns c exactly
// and k == 1 returns the correctly rounded 2c - x.
template <typename T>
T reflect_about(T x, T c, T k) {
  using Wide = std::conditional_t<std::is_same_v<T, float>, double, long double>;
  const Wide cw = c;
  return static_cast<T>(cw + static_cast<Wide>(k) * (cw - static_cast<Wide>(x)));
}

struct OpAttrs {
  double scalar = 0.0;      // Scale factor, LeakyRelu slope
  std::size_t stride = 1;   // Conv2d
  std::size_t padding = 0;  // Conv2d
  std::size_t axis = 1;     // Concat, Slice
  std::size_t begin = 0;    // Slice [begin, end)
  std::size_t end = 0;
};

enum class TapKind { Identity, Negate, Scale };

// Rewrites the gradient leaving `node` towards its inputs. Forward values are untouched.
struct GradientTap {
  NodeId node = 0;
  TapKind kind = TapKind::Identity;
  double factor = 1.0;  // used by TapKind::Scale
};

template <typename T>
class GradientMap {
 public:
  explicit GradientMap(std::size_t nodes = 0) : grads_(nodes) {}

  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  // Throws if no gradient was recorded for `id`. Every requires_grad leaf has an entry.
  const BasicTensor<T>& at(NodeId id) const;
  std::optional<BasicTensor<T>>& slot(NodeId id) { return grads_.at(id); }

 private:
  std::vector<std::optional<BasicTensor<T>>> grads_;
};

// Define-by-run reverse-mode tape. Nodes are appended in topological order.
template <typename T>
class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<NodeId> inputs;
    BasicTensor<T> value;
    OpAttrs attrs;
    bool needs_grad = false;
    std::optional<GradientTap> tap;
  };

  NodeId leaf(BasicTensor<T> value);
  NodeId constant(BasicTensor<T> value) {
    value.requires_grad = false;
    return leaf(std::move(value));
  }
  NodeId parameter(BasicTensor<T> value) {
    value.requires_grad = true;
    return leaf(std::move(value));
  }

  NodeId forward(OpKind kind, std::span<const NodeId> inputs, const OpAttrs& attrs = {});
  NodeId forward(OpKind kind, std::initializer_list<NodeId> inputs, const OpAttrs& attrs = {}) {
    return forward(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), attrs);
  }

  // Populates `grad` on every requires_grad leaf and returns the full map.
  GradientMap<T> backward(NodeId loss);

  void apply_tap(const GradientTap& tap);

  const BasicTensor<T>& value(NodeId id) const { return node(id).value; }
  const Node& node(NodeId id) const;
  BasicTensor<T>& leaf_tensor(NodeId id);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  Node& mutable_node(NodeId id);
  std::deque<Node> nodes_;  // deque: references to values stay valid as the graph grows
};

extern template class Graph<float>;
extern template class Graph<double>;
extern template class GradientMap<float>;
extern template class GradientMap<double>;

// Lightweight handle for writing expressions against a graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  NodeId id = 0;

  const BasicTensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape; }
};

template <typename T>
Var<T> leaf(Graph<T>& g, BasicTensor<T> v) {
  return {&g, g.leaf(std::move(v))};
}
template <typename T>
Var<T> constant(Graph<T>& g, BasicTensor<T> v) {
  return {&g, g.constant(std::move(v))};
}
template <typename T>
Var<T> parameter(Graph<T>& g, BasicTensor<T> v) {
  return {&g, g.parameter(std::move(v))};
}

namespace detail {
template <typename T>
Var<T> apply(OpKind kind, std::initializer_list<Var<T>> in, const OpAttrs& attrs = {}) {
  Graph<T>* g = in.begin()->graph;
  std::vector<NodeId> ids;
  for (const auto& v : in) {
    if (v.graph != g) throw ShapeError(std::string(op_name(kind)) + ": operands from different graphs");
    ids.push_back(v.id);
  }
  return {g, g->forward(kind, ids, attrs)};
}
}  // namespace detail

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return detail::apply(OpKind::Add, {a, b}); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return detail::apply(OpKind::Sub, {a, b}); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return detail::apply(OpKind::Mul, {a, b}); }
template <typename T> Var<T> scale(Var<T> a, double c) {
  OpAttrs at;
  at.scalar = c;
  return detail::apply(OpKind::Scale, {a}, at);
}
template <typename T> Var<T> matmul(Var<T> a, Var<T> b) { return detail::apply(OpKind::MatMul, {a, b}); }

// Kernel is (out_ch, in_ch, kh, kw); bias is (out_ch).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t stride = 1, std::size_t padding = 1) {
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  return detail::apply(OpKind::Conv2d, {x, kernel, bias}, at);
}
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::size_t stride = 1, std::size_t padding = 1) {
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  return detail::apply(OpKind::Conv2d, {x, kernel}, at);
}
template <typename T> Var<T> upsample2x(Var<T> x) { return detail::apply(OpKind::Upsample2x, {x}); }
template <typename T> Var<T> leaky_relu(Var<T> x, double slope) {
  OpAttrs at;
  at.scalar = slope;
  return detail::apply(OpKind::LeakyRelu, {x}, at);
}
template <typename T> Var<T> sigmoid(Var<T> x) { return detail::apply(OpKind::Sigmoid, {x}); }
template <typename T> Var<T> abs(Var<T> x) { return detail::apply(OpKind::Abs, {x}); }
template <typename T> Var<T> square(Var<T> x) { return detail::apply(OpKind::Square, {x}); }
template <typename T> Var<T> sum(Var<T> x) { return detail::apply(OpKind::Sum, {x}); }
template <typename T> Var<T> mean(Var<T> x) { return detail::apply(OpKind::Mean, {x}); }
// Elementwise center + gain * (center - x); all three operands share one shape.
template <typename T> Var<T> reflect(Var<T> x, Var<T> center, Var<T> gain) {
  return detail::apply(OpKind::Reflect, {x, center, gain});
}

// Concatenation along axis 1 (channels) or 0 (batch).
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis = 1) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<NodeId> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  OpAttrs at;
  at.axis = axis;
  return {parts.front().graph, parts.front().graph->forward(OpKind::Concat, ids, at)};
}
template <typename T>
Var<T> concat(Var<T> a, Var<T> b, std::size_t axis = 1) {
  const Var<T> parts[] = {a, b};
  return concat<T>(std::span<const Var<T>>(parts), axis);
}

// Rows [begin, end) along `axis` (0 = batch).
template <typename T>
Var<T> slice(Var<T> x, std::size_t begin, std::size_t end, std::size_t axis = 0) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return detail::apply(OpKind::Slice, {x}, at);
}

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator*(double c, Var<T> a) { return scale(a, c); }

}  // namespace gradshield
