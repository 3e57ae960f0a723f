#include "gradshield/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace gradshield {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Upsample2x: return "upsample2x";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Abs: return "abs";
    case OpKind::Square: return "square";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Reflect: return "reflect";
  }
  return "unknown";
}

template <typename T>
const BasicTensor<T>& GradientMap<T>::at(NodeId id) const {
  if (!has(id)) throw ShapeError("gradient map: no gradient for node " + std::to_string(id));
  return *grads_[id];
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void expect_inputs(OpKind kind, std::size_t got, std::size_t lo, std::size_t hi) {
  if (got < lo || got > hi) {
    shape_fail(kind, "expects " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                         " inputs, got " + std::to_string(got));
  }
}

// Geometry shared by the conv2d forward and backward kernels.
struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

ConvDims conv_dims(const Shape& x, const Shape& k, std::size_t stride, std::size_t pad) {
  if (x.size() != 4) shape_fail(OpKind::Conv2d, "input must be NCHW, got " + shape_str(x));
  if (k.size() != 4) shape_fail(OpKind::Conv2d, "kernel must be (out,in,kh,kw), got " + shape_str(k));
  if (k[1] != x[1]) {
    shape_fail(OpKind::Conv2d, "kernel in_ch " + std::to_string(k[1]) + " vs input channels " +
                                   std::to_string(x[1]) + " (input " + shape_str(x) + ", kernel " +
                                   shape_str(k) + ")");
  }
  if (stride < 1 || stride > 2) shape_fail(OpKind::Conv2d, "stride must be 1 or 2");
  if (x[2] + 2 * pad < k[2] || x[3] + 2 * pad < k[3]) {
    shape_fail(OpKind::Conv2d, "kernel " + shape_str(k) + " larger than padded input " + shape_str(x));
  }
  ConvDims d{x[0], x[1], x[2], x[3], k[0], k[2], k[3], stride, pad, 0, 0};
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// Output columns ox whose input column ox*stride + kx - pad lies inside [0, w).
inline void valid_cols(const ConvDims& d, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  const long off = static_cast<long>(kx) - static_cast<long>(d.pad);
  const long s = static_cast<long>(d.stride);
  long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long last = (static_cast<long>(d.w) - 1 - off);  // ox*s <= last
  long end = last < 0 ? 0 : last / s + 1;
  end = std::min<long>(end, static_cast<long>(d.wo));
  lo = static_cast<std::size_t>(std::min(first, end));
  hi = static_cast<std::size_t>(end);
}

// Unrolls one image (cin x h x w) into columns: row (c, ky, kx), column (oy, ox).
template <typename T>
void im2col(const ConvDims& d, const T* img, T* col) {
  const std::size_t out_plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin; ++c) {
    const T* ip = img + c * d.h * d.w;
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        T* row = col + ((c * d.kh + ky) * d.kw + kx) * out_plane;
        std::size_t lo, hi;
        valid_cols(d, kx, lo, hi);
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          T* dst = row + oy * d.wo;
          const long iy = static_cast<long>(oy * d.stride + ky) - static_cast<long>(d.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h) || lo >= hi) {
            std::fill(dst, dst + d.wo, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + d.wo, T(0));
          const T* src = ip + static_cast<std::size_t>(iy) * d.w + (lo * d.stride + kx - d.pad);
          if (d.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t i = 0; i < hi - lo; ++i) dst[lo + i] = src[2 * i];
          }
        }
      }
    }
  }
}

// Inverse scatter of im2col: accumulates column gradients back into the image gradient.
template <typename T>
void col2im(const ConvDims& d, const T* col, T* img) {
  const std::size_t out_plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin; ++c) {
    T* ip = img + c * d.h * d.w;
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        const T* row = col + ((c * d.kh + ky) * d.kw + kx) * out_plane;
        std::size_t lo, hi;
        valid_cols(d, kx, lo, hi);
        if (lo >= hi) continue;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + ky) - static_cast<long>(d.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          const T* src = row + oy * d.wo + lo;
          T* dst = ip + static_cast<std::size_t>(iy) * d.w + (lo * d.stride + kx - d.pad);
          const std::size_t s = d.stride;
          for (std::size_t i = 0; i < hi - lo; ++i) dst[s * i] += src[i];
        }
      }
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void conv_forward(const ConvDims& d, const T* x, const T* k, const T* bias, T* out) {
  const std::size_t out_plane = d.ho * d.wo;
  const std::size_t rows = d.cin * d.kh * d.kw;
  std::vector<T> col(rows * out_plane);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(d, x + n * d.cin * d.h * d.w, col.data());
    for (std::size_t o = 0; o < d.cout; ++o) {
      T* op = out + (n * d.cout + o) * out_plane;
      std::fill(op, op + out_plane, bias ? bias[o] : T(0));
      const T* kr = k + o * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const T wv = kr[r];
        const T* cr = col.data() + r * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) op[i] += wv * cr[i];
      }
    }
  }
}

template <typename T>
void conv_backward(const ConvDims& d, const T* x, const T* k, const T* gout, T* gx, T* gk, T* gb) {
  const std::size_t out_plane = d.ho * d.wo;
  const std::size_t rows = d.cin * d.kh * d.kw;
  std::vector<T> col(rows * out_plane);
  std::vector<T> gcol(gx ? rows * out_plane : 0);
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* gn = gout + n * d.cout * out_plane;
    if (gb) {
      for (std::size_t o = 0; o < d.cout; ++o) {
        const T* gp = gn + o * out_plane;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
        gb[o] += acc;
      }
    }
    if (gk) {
      im2col(d, x + n * d.cin * d.h * d.w, col.data());
      for (std::size_t o = 0; o < d.cout; ++o) {
        const T* gp = gn + o * out_plane;
        T* gkr = gk + o * rows;
        for (std::size_t r = 0; r < rows; ++r) gkr[r] += dot(gp, col.data() + r * out_plane, out_plane);
      }
    }
    if (gx) {
      std::fill(gcol.begin(), gcol.end(), T(0));
      for (std::size_t o = 0; o < d.cout; ++o) {
        const T* gp = gn + o * out_plane;
        const T* kr = k + o * rows;
        for (std::size_t r = 0; r < rows; ++r) {
          const T wv = kr[r];
          T* cr = gcol.data() + r * out_plane;
          for (std::size_t i = 0; i < out_plane; ++i) cr[i] += wv * gp[i];
        }
      }
      col2im(d, gcol.data(), gx + n * d.cin * d.h * d.w);
    }
  }
}

// Splits a shape around `axis` into (outer, axis extent, inner) for concat/slice.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
bool is_scalar(const BasicTensor<T>& t) {
  return t.size() == 1;
}

// Elementwise binary op with optional scalar broadcast of either side.
template <typename T, typename F>
BasicTensor<T> binary(OpKind kind, const BasicTensor<T>& a, const BasicTensor<T>& b, F f) {
  if (a.shape == b.shape) {
    BasicTensor<T> out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
  }
  if (is_scalar(b)) {
    BasicTensor<T> out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[0]);
    return out;
  }
  if (is_scalar(a)) {
    BasicTensor<T> out(b.shape);
    for (std::size_t i = 0; i < b.size(); ++i) out.data[i] = f(a.data[0], b.data[i]);
    return out;
  }
  shape_fail(kind, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Reduces an elementwise gradient onto an operand that may have been scalar-broadcast.
template <typename T>
void accumulate_operand(BasicTensor<T>& target, const BasicTensor<T>& operand, const std::vector<T>& g) {
  if (operand.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) target.data[i] += g[i];
  } else {
    T acc = 0;
    for (T v : g) acc += v;
    target.data[0] += acc;
  }
}

template <typename T>
T sigmoid_of(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (id >= nodes_.size()) throw ShapeError("graph: unknown node id " + std::to_string(id));
  return nodes_[id];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::mutable_node(NodeId id) {
  if (id >= nodes_.size()) throw ShapeError("graph: unknown node id " + std::to_string(id));
  return nodes_[id];
}

template <typename T>
BasicTensor<T>& Graph<T>::leaf_tensor(NodeId id) {
  Node& n = mutable_node(id);
  if (n.kind != OpKind::Leaf) throw ShapeError("graph: node " + std::to_string(id) + " is not a leaf");
  return n.value;
}

template <typename T>
NodeId Graph<T>::leaf(BasicTensor<T> value) {
  if (value.data.size() != numel(value.shape)) {
    throw ShapeError("leaf: shape " + shape_str(value.shape) + " does not match " +
                     std::to_string(value.data.size()) + " values");
  }
  Node n;
  n.kind = OpKind::Leaf;
  n.needs_grad = value.requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
void Graph<T>::apply_tap(const GradientTap& tap) {
  mutable_node(tap.node).tap = tap;
}

template <typename T>
NodeId Graph<T>::forward(OpKind kind, std::span<const NodeId> inputs, const OpAttrs& attrs) {
  std::vector<const BasicTensor<T>*> in;
  bool needs = false;
  for (NodeId id : inputs) {
    const Node& src = node(id);
    if (!src.value.all_finite()) {
      throw NumericError(std::string(op_name(kind)) + ": non-finite value in input node " + std::to_string(id));
    }
    in.push_back(&src.value);
    needs = needs || src.needs_grad;
  }

  BasicTensor<T> out;
  switch (kind) {
    case OpKind::Leaf:
      shape_fail(kind, "use Graph::leaf to create leaves");
    case OpKind::Add:
      expect_inputs(kind, in.size(), 2, 2);
      out = binary(kind, *in[0], *in[1], [](T a, T b) { return a + b; });
      break;
    case OpKind::Sub:
      expect_inputs(kind, in.size(), 2, 2);
      out = binary(kind, *in[0], *in[1], [](T a, T b) { return a - b; });
      break;
    case OpKind::Mul:
      expect_inputs(kind, in.size(), 2, 2);
      out = binary(kind, *in[0], *in[1], [](T a, T b) { return a * b; });
      break;
    case OpKind::Scale: {
      expect_inputs(kind, in.size(), 1, 1);
      out = BasicTensor<T>(in[0]->shape);
      const T c = static_cast<T>(attrs.scalar);
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = c * in[0]->data[i];
      break;
    }
    case OpKind::MatMul: {
      expect_inputs(kind, in.size(), 2, 2);
      const auto& a = *in[0];
      const auto& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        shape_fail(kind, "cannot multiply " + shape_str(a.shape) + " by " + shape_str(b.shape));
      }
      const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
      out = BasicTensor<T>(Shape{m, n});
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < kk; ++p) {
          const T av = a.data[i * kk + p];
          for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += av * b.data[p * n + j];
        }
      }
      break;
    }
    case OpKind::Conv2d: {
      expect_inputs(kind, in.size(), 2, 3);
      const ConvDims d = conv_dims(in[0]->shape, in[1]->shape, attrs.stride, attrs.padding);
      if (in.size() == 3 && (in[2]->rank() != 1 || in[2]->dim(0) != d.cout)) {
        shape_fail(kind, "bias " + shape_str(in[2]->shape) + " must be (" + std::to_string(d.cout) + ")");
      }
      out = BasicTensor<T>(Shape{d.n, d.cout, d.ho, d.wo});
      conv_forward(d, in[0]->data.data(), in[1]->data.data(), in.size() == 3 ? in[2]->data.data() : nullptr,
                   out.data.data());
      break;
    }
    case OpKind::Upsample2x: {
      expect_inputs(kind, in.size(), 1, 1);
      const auto& x = *in[0];
      if (x.rank() != 4) shape_fail(kind, "input must be NCHW, got " + shape_str(x.shape));
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      out = BasicTensor<T>(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w});
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) {
            out.data[(p * 2 * h + y) * 2 * w + xx] = x.data[(p * h + y / 2) * w + xx / 2];
          }
        }
      }
      break;
    }
    case OpKind::LeakyRelu: {
      expect_inputs(kind, in.size(), 1, 1);
      out = BasicTensor<T>(in[0]->shape);
      const T slope = static_cast<T>(attrs.scalar);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = in[0]->data[i];
        out.data[i] = v > 0 ? v : slope * v;
      }
      break;
    }
    case OpKind::Sigmoid:
      expect_inputs(kind, in.size(), 1, 1);
      out = BasicTensor<T>(in[0]->shape);
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = sigmoid_of(in[0]->data[i]);
      break;
    case OpKind::Abs:
      expect_inputs(kind, in.size(), 1, 1);
      out = BasicTensor<T>(in[0]->shape);
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::abs(in[0]->data[i]);
      break;
    case OpKind::Square:
      expect_inputs(kind, in.size(), 1, 1);
      out = BasicTensor<T>(in[0]->shape);
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = in[0]->data[i] * in[0]->data[i];
      break;
    case OpKind::Concat: {
      if (in.empty()) shape_fail(kind, "no inputs");
      const Shape& first = in[0]->shape;
      if (attrs.axis >= first.size()) shape_fail(kind, "axis " + std::to_string(attrs.axis) + " out of range");
      Shape s = first;
      s[attrs.axis] = 0;
      for (const auto* t : in) {
        bool ok = t->rank() == first.size();
        for (std::size_t i = 0; ok && i < first.size(); ++i) ok = i == attrs.axis || t->shape[i] == first[i];
        if (!ok) shape_fail(kind, "cannot join " + shape_str(t->shape) + " with " + shape_str(first));
        s[attrs.axis] += t->shape[attrs.axis];
      }
      out = BasicTensor<T>(s);
      const AxisSplit outs = split_at(s, attrs.axis);
      std::size_t offset = 0;
      for (const auto* t : in) {
        const AxisSplit ts = split_at(t->shape, attrs.axis);
        const std::size_t chunk = ts.extent * ts.inner;
        for (std::size_t o = 0; o < ts.outer; ++o) {
          std::copy_n(t->data.begin() + o * chunk, chunk,
                      out.data.begin() + (o * outs.extent + offset) * outs.inner);
        }
        offset += ts.extent;
      }
      break;
    }
    case OpKind::Slice: {
      expect_inputs(kind, in.size(), 1, 1);
      const auto& x = *in[0];
      if (attrs.axis >= x.rank() || attrs.begin >= attrs.end || attrs.end > x.dim(attrs.axis)) {
        shape_fail(kind, "range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) +
                             ") on axis " + std::to_string(attrs.axis) + " invalid for " + shape_str(x.shape));
      }
      Shape s = x.shape;
      s[attrs.axis] = attrs.end - attrs.begin;
      out = BasicTensor<T>(s);
      const AxisSplit xs = split_at(x.shape, attrs.axis);
      const std::size_t chunk = s[attrs.axis] * xs.inner;
      for (std::size_t o = 0; o < xs.outer; ++o) {
        std::copy_n(x.data.begin() + (o * xs.extent + attrs.begin) * xs.inner, chunk,
                    out.data.begin() + o * chunk);
      }
      break;
    }
    case OpKind::Reflect: {
      expect_inputs(kind, in.size(), 3, 3);
      if (in[1]->shape != in[0]->shape || in[2]->shape != in[0]->shape) {
        shape_fail(kind, "operands " + shape_str(in[0]->shape) + ", " + shape_str(in[1]->shape) + ", " +
                             shape_str(in[2]->shape) + " must match");
      }
      out = BasicTensor<T>(in[0]->shape);
      for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = reflect_about(in[0]->data[i], in[1]->data[i], in[2]->data[i]);
      }
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      expect_inputs(kind, in.size(), 1, 1);
      if (in[0]->size() == 0) shape_fail(kind, "empty input");
      T acc = 0;
      for (T v : in[0]->data) acc += v;
      if (kind == OpKind::Mean) acc /= static_cast<T>(in[0]->size());
      out = BasicTensor<T>(Shape{1}, std::vector<T>{acc});
      break;
    }
  }

  Node n;
  n.kind = kind;
  n.inputs.assign(inputs.begin(), inputs.end());
  n.value = std::move(out);
  n.attrs = attrs;
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
GradientMap<T> Graph<T>::backward(NodeId loss) {
  const Node& ln = node(loss);
  if (ln.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape));
  }
  GradientMap<T> grads(nodes_.size());
  grads.slot(loss) = BasicTensor<T>(ln.value.shape, T(1));

  auto grad_for = [&](NodeId id) -> BasicTensor<T>& {
    auto& slot = grads.slot(id);
    if (!slot) slot = BasicTensor<T>(nodes_[id].value.shape);
    return *slot;
  };

  for (NodeId id = loss + 1; id-- > 0;) {
    Node& nd = nodes_[id];
    if (!nd.needs_grad || nd.kind == OpKind::Leaf || !grads.has(id)) continue;

    std::vector<T> g = grads.slot(id)->data;
    if (nd.tap) {
      switch (nd.tap->kind) {
        case TapKind::Identity: break;
        case TapKind::Negate:
          for (T& v : g) v = -v;
          break;
        case TapKind::Scale: {
          const T c = static_cast<T>(nd.tap->factor);
          for (T& v : g) v *= c;
          break;
        }
      }
    }

    auto wants = [&](std::size_t i) { return nodes_[nd.inputs[i]].needs_grad; };
    const auto& x0 = nodes_[nd.inputs[0]].value;

    switch (nd.kind) {
      case OpKind::Leaf: break;
      case OpKind::Add:
      case OpKind::Sub: {
        if (wants(0)) accumulate_operand(grad_for(nd.inputs[0]), x0, g);
        if (wants(1)) {
          std::vector<T> gb = g;
          if (nd.kind == OpKind::Sub) {
            for (T& v : gb) v = -v;
          }
          accumulate_operand(grad_for(nd.inputs[1]), nodes_[nd.inputs[1]].value, gb);
        }
        break;
      }
      case OpKind::Mul: {
        const auto& x1 = nodes_[nd.inputs[1]].value;
        auto other = [&](const BasicTensor<T>& t, std::size_t i) { return t.size() == 1 ? t.data[0] : t.data[i]; };
        if (wants(0)) {
          std::vector<T> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * other(x1, i);
          accumulate_operand(grad_for(nd.inputs[0]), x0, ga);
        }
        if (wants(1)) {
          std::vector<T> gb(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * other(x0, i);
          accumulate_operand(grad_for(nd.inputs[1]), x1, gb);
        }
        break;
      }
      case OpKind::Scale: {
        auto& gx = grad_for(nd.inputs[0]);
        const T c = static_cast<T>(nd.attrs.scalar);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += c * g[i];
        break;
      }
      case OpKind::MatMul: {
        const auto& b = nodes_[nd.inputs[1]].value;
        const std::size_t m = x0.dim(0), kk = x0.dim(1), n = b.dim(1);
        if (wants(0)) {
          auto& ga = grad_for(nd.inputs[0]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < kk; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b.data[p * n + j];
              ga.data[i * kk + p] += acc;
            }
        }
        if (wants(1)) {
          auto& gb = grad_for(nd.inputs[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < kk; ++p) {
              const T av = x0.data[i * kk + p];
              for (std::size_t j = 0; j < n; ++j) gb.data[p * n + j] += av * g[i * n + j];
            }
        }
        break;
      }
      case OpKind::Conv2d: {
        const auto& k = nodes_[nd.inputs[1]].value;
        const ConvDims d = conv_dims(x0.shape, k.shape, nd.attrs.stride, nd.attrs.padding);
        T* gx = wants(0) ? grad_for(nd.inputs[0]).data.data() : nullptr;
        T* gk = wants(1) ? grad_for(nd.inputs[1]).data.data() : nullptr;
        T* gb = nd.inputs.size() == 3 && wants(2) ? grad_for(nd.inputs[2]).data.data() : nullptr;
        conv_backward(d, x0.data.data(), k.data.data(), g.data(), gx, gk, gb);
        break;
      }
      case OpKind::Upsample2x: {
        auto& gx = grad_for(nd.inputs[0]);
        const std::size_t planes = x0.dim(0) * x0.dim(1), h = x0.dim(2), w = x0.dim(3);
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
              gx.data[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
        break;
      }
      case OpKind::LeakyRelu: {
        auto& gx = grad_for(nd.inputs[0]);
        const T slope = static_cast<T>(nd.attrs.scalar);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += x0.data[i] > 0 ? g[i] : slope * g[i];
        break;
      }
      case OpKind::Sigmoid: {
        auto& gx = grad_for(nd.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = nd.value.data[i];
          gx.data[i] += g[i] * s * (T(1) - s);
        }
        break;
      }
      case OpKind::Abs: {
        auto& gx = grad_for(nd.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = x0.data[i];
          gx.data[i] += v > 0 ? g[i] : (v < 0 ? -g[i] : T(0));
        }
        break;
      }
      case OpKind::Square: {
        auto& gx = grad_for(nd.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += T(2) * x0.data[i] * g[i];
        break;
      }
      case OpKind::Concat: {
        const AxisSplit outs = split_at(nd.value.shape, nd.attrs.axis);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
          const auto& t = nodes_[nd.inputs[i]].value;
          const AxisSplit ts = split_at(t.shape, nd.attrs.axis);
          if (wants(i)) {
            auto& gt = grad_for(nd.inputs[i]);
            const std::size_t chunk = ts.extent * ts.inner;
            for (std::size_t o = 0; o < ts.outer; ++o) {
              const T* src = g.data() + (o * outs.extent + offset) * outs.inner;
              T* dst = gt.data.data() + o * chunk;
              for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
            }
          }
          offset += ts.extent;
        }
        break;
      }
      case OpKind::Slice: {
        auto& gx = grad_for(nd.inputs[0]);
        const AxisSplit xs = split_at(x0.shape, nd.attrs.axis);
        const std::size_t chunk = (nd.attrs.end - nd.attrs.begin) * xs.inner;
        for (std::size_t o = 0; o < xs.outer; ++o) {
          T* dst = gx.data.data() + (o * xs.extent + nd.attrs.begin) * xs.inner;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += g[o * chunk + j];
        }
        break;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        auto& gx = grad_for(nd.inputs[0]);
        const T v = nd.kind == OpKind::Mean ? g[0] / static_cast<T>(x0.size()) : g[0];
        for (T& e : gx.data) e += v;
        break;
      }
      case OpKind::Reflect: {
        const auto& c = nodes_[nd.inputs[1]].value;
        const auto& k = nodes_[nd.inputs[2]].value;
        if (wants(0)) {
          auto& gx = grad_for(nd.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] -= k.data[i] * g[i];
        }
        if (wants(1)) {
          auto& gc = grad_for(nd.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gc.data[i] += (T(1) + k.data[i]) * g[i];
        }
        if (wants(2)) {
          auto& gk = grad_for(nd.inputs[2]);
          for (std::size_t i = 0; i < g.size(); ++i) gk.data[i] += (c.data[i] - x0.data[i]) * g[i];
        }
        break;
      }
    }
  }

  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& nd = nodes_[id];
    if (nd.kind != OpKind::Leaf || !nd.value.requires_grad) continue;
    if (!grads.has(id)) grads.slot(id) = BasicTensor<T>(nd.value.shape);
    nd.value.grad = grads.at(id).data;
  }
  return grads;
}

template class Graph<float>;
template class Graph<double>;
template class GradientMap<float>;
template class GradientMap<double>;

}  // namespace gradshield
