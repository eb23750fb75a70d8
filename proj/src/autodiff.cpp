#include "xfsl/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "xfsl/error.hpp"

namespace xfsl::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, const Conv2dAttrs& a, std::size_t Ho, std::size_t Wo,
            std::vector<double>& cols) {
  cols.assign(C * kh * kw * Ho * Wo, 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(a.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        double* out = cols.data() + row * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          const double* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * a.stride + kj) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            out[oy * Wo + ox] = src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, const Conv2dAttrs& a, std::size_t Ho, std::size_t Wo,
                double* gx) {
  const auto pad = static_cast<std::ptrdiff_t>(a.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        const double* in = cols + row * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = gx + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * a.stride + kj) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[ix] += in[oy * Wo + ox];
          }
        }
      }
    }
  }
}

// Source taps of one output coordinate under half-pixel alignment.
struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double max_src = static_cast<double>(in - 1);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, max_src);
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    shape_fail(op, "operand shapes differ: expected " + to_string(a) + ", got " + to_string(b));
  }
}

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::vector<double>& slot(std::vector<std::vector<double>>& grads, NodeId id, std::size_t n) {
  auto& g = grads[id.index];
  if (g.empty()) g.assign(n, 0.0);
  return g;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.values.assign(numel(shape), 0.0);
  t.shape = std::move(shape);
  t.requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.shape = std::move(shape);
  t.values = std::move(values);
  t.requires_grad = requires_grad;
  return t;
}

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::dense_affine: return "dense_affine";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::neg_sq_euclidean: return "neg_sq_euclidean";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::bilinear_upsample: return "bilinear_upsample";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::reshape: return "reshape";
    case OpKind::stack: return "stack";
    case OpKind::index: return "index";
    case OpKind::gather: return "gather";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs) {
    if (in.index >= nodes_.size()) {
      throw ValidationError(std::string(to_string(node.kind)) + ": input node " +
                            std::to_string(in.index) + " does not exist");
    }
  }
  nodes_.push_back(std::move(node));
  const std::size_t i = nodes_.size() - 1;
  const Node& n = nodes_[i];
  const bool ready = std::all_of(n.inputs.begin(), n.inputs.end(),
                                 [&](NodeId in) { return nodes_[in.index].has_value; });
  if (n.kind != OpKind::input && n.kind != OpKind::constant && n.kind != OpKind::parameter &&
      ready) {
    forward(i);
  }
  return NodeId{static_cast<std::uint32_t>(i)};
}

const Graph::Node& Graph::at(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw ValidationError("node " + std::to_string(id.index) + " does not exist");
  }
  return nodes_[id.index];
}

const std::vector<double>& Graph::val(std::size_t i) const {
  const Node& n = nodes_[i];
  return n.kind == OpKind::parameter ? n.tensor->values : n.value;
}

NodeId Graph::input(Shape shape, bool requires_grad) {
  Node n;
  n.kind = OpKind::input;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Graph::input(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    shape_fail("input", "shape " + to_string(shape) + " vs " + std::to_string(values.size()) +
                            " values");
  }
  Node n;
  n.kind = OpKind::input;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.has_value = true;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Graph::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    shape_fail("constant", "shape " + to_string(shape) + " vs " +
                               std::to_string(values.size()) + " values");
  }
  Node n;
  n.kind = OpKind::constant;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.has_value = true;
  return push(std::move(n));
}

NodeId Graph::parameter(Tensor& tensor) {
  if (numel(tensor.shape) != tensor.values.size()) {
    shape_fail("parameter", "tensor shape " + to_string(tensor.shape) + " vs " +
                                std::to_string(tensor.values.size()) + " values");
  }
  Node n;
  n.kind = OpKind::parameter;
  n.shape = tensor.shape;
  n.tensor = &tensor;
  n.writable = &tensor;
  n.has_value = true;
  n.requires_grad = tensor.requires_grad;
  return push(std::move(n));
}

NodeId Graph::frozen(const Tensor& tensor) {
  if (numel(tensor.shape) != tensor.values.size()) {
    shape_fail("frozen", "tensor shape " + to_string(tensor.shape) + " vs " +
                             std::to_string(tensor.values.size()) + " values");
  }
  Node n;
  n.kind = OpKind::parameter;
  n.shape = tensor.shape;
  n.tensor = &tensor;
  n.has_value = true;
  return push(std::move(n));
}

namespace {
template <class NodeT>
NodeT unary(OpKind kind, NodeId x, const Shape& shape) {
  NodeT n;
  n.kind = kind;
  n.inputs = {x};
  n.shape = shape;
  return n;
}
}  // namespace

#define XFSL_BINARY(name, op_kind)                   \
  NodeId Graph::name(NodeId a, NodeId b) {           \
    require_same(#name, at(a).shape, at(b).shape);   \
    Node n;                                          \
    n.kind = op_kind;                                \
    n.inputs = {a, b};                               \
    n.shape = at(a).shape;                           \
    return push(std::move(n));                       \
  }

XFSL_BINARY(add, OpKind::add)
XFSL_BINARY(sub, OpKind::sub)
XFSL_BINARY(mul, OpKind::mul)
XFSL_BINARY(div, OpKind::div)
#undef XFSL_BINARY

NodeId Graph::scalar_mul(NodeId x, double factor) {
  auto n = unary<Node>(OpKind::scalar_mul, x, at(x).shape);
  n.scalar_attr = factor;
  return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId x, double offset) {
  auto n = unary<Node>(OpKind::add_scalar, x, at(x).shape);
  n.scalar_attr = offset;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) { return push(unary<Node>(OpKind::relu, x, at(x).shape)); }
NodeId Graph::log(NodeId x) { return push(unary<Node>(OpKind::log, x, at(x).shape)); }

NodeId Graph::clamp_min(NodeId x, double floor) {
  auto n = unary<Node>(OpKind::clamp_min, x, at(x).shape);
  n.scalar_attr = floor;
  return push(std::move(n));
}

NodeId Graph::stop_gradient(NodeId x) {
  return push(unary<Node>(OpKind::stop_gradient, x, at(x).shape));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    shape_fail("matmul", "expected (m,k) x (k,n), got " + to_string(sa) + " x " + to_string(sb));
  }
  Node n;
  n.kind = OpKind::matmul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Conv2dAttrs attrs) {
  const Shape& sx = at(x).shape;
  const Shape& sw = at(weight).shape;
  if (sx.size() != 3 || sw.size() != 4 || sw[1] != sx[0]) {
    shape_fail("conv2d", "expected input (Cin,H,W) and weight (Cout,Cin,kh,kw), got " +
                             to_string(sx) + " and " + to_string(sw));
  }
  if (attrs.stride == 0) shape_fail("conv2d", "stride must be positive");
  if (sx[1] + 2 * attrs.padding < sw[2] || sx[2] + 2 * attrs.padding < sw[3]) {
    shape_fail("conv2d", "kernel " + to_string(sw) + " larger than padded input " + to_string(sx));
  }
  Node n;
  n.kind = OpKind::conv2d;
  n.inputs = {x, weight};
  if (bias) {
    if (at(*bias).shape != Shape{sw[0]}) {
      shape_fail("conv2d", "bias expected " + to_string(Shape{sw[0]}) + ", got " +
                               to_string(at(*bias).shape));
    }
    n.inputs.push_back(*bias);
  }
  n.conv = attrs;
  n.shape = {sw[0], conv_out(sx[1], sw[2], attrs.stride, attrs.padding),
             conv_out(sx[2], sw[3], attrs.stride, attrs.padding)};
  return push(std::move(n));
}

NodeId Graph::maxpool2d(NodeId x, std::size_t kernel, std::size_t stride) {
  const Shape& sx = at(x).shape;
  if (sx.size() != 3 || kernel == 0 || stride == 0 || sx[1] < kernel || sx[2] < kernel) {
    shape_fail("maxpool2d", "input " + to_string(sx) + " incompatible with kernel " +
                                std::to_string(kernel));
  }
  auto n = unary<Node>(OpKind::maxpool2d, x,
                       {sx[0], (sx[1] - kernel) / stride + 1, (sx[2] - kernel) / stride + 1});
  n.kernel = kernel;
  n.stride = stride;
  return push(std::move(n));
}

NodeId Graph::global_avg_pool(NodeId x) {
  const Shape& sx = at(x).shape;
  if (sx.size() != 3) shape_fail("global_avg_pool", "expected (C,H,W), got " + to_string(sx));
  return push(unary<Node>(OpKind::global_avg_pool, x, {sx[0]}));
}

NodeId Graph::dense_affine(NodeId x, NodeId weight, NodeId bias) {
  const Shape& sx = at(x).shape;
  const Shape& sw = at(weight).shape;
  const Shape& sb = at(bias).shape;
  if (sx.size() != 1 || sw.size() != 2 || sw[1] != sx[0] || sb != Shape{sw[0]}) {
    shape_fail("dense_affine", "expected x (n), W (m,n), b (m), got " + to_string(sx) + ", " +
                                   to_string(sw) + ", " + to_string(sb));
  }
  Node n;
  n.kind = OpKind::dense_affine;
  n.inputs = {x, weight, bias};
  n.shape = {sw[0]};
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
  const Shape& sx = at(x).shape;
  if (sx.size() != 1) shape_fail("softmax", "expected a vector, got " + to_string(sx));
  return push(unary<Node>(OpKind::softmax, x, sx));
}

NodeId Graph::neg_sq_euclidean(NodeId query, NodeId points) {
  const Shape& sq = at(query).shape;
  const Shape& sp = at(points).shape;
  if (sq.size() != 1 || sp.size() != 2 || sp[1] != sq[0]) {
    shape_fail("neg_sq_euclidean", "expected query (d) and points (N,d), got " + to_string(sq) +
                                       " and " + to_string(sp));
  }
  Node n;
  n.kind = OpKind::neg_sq_euclidean;
  n.inputs = {query, points};
  n.shape = {sp[0]};
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) { return push(unary<Node>(OpKind::sum, x, {1})); }
NodeId Graph::mean(NodeId x) { return push(unary<Node>(OpKind::mean, x, {1})); }

NodeId Graph::bilinear_upsample(NodeId x, std::size_t out_h, std::size_t out_w) {
  const Shape& sx = at(x).shape;
  if ((sx.size() != 2 && sx.size() != 3) || out_h == 0 || out_w == 0) {
    shape_fail("bilinear_upsample", "expected (h,w) or (C,h,w), got " + to_string(sx));
  }
  Shape out = sx;
  out[out.size() - 2] = out_h;
  out[out.size() - 1] = out_w;
  return push(unary<Node>(OpKind::bilinear_upsample, x, out));
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  if (numel(shape) != numel(at(x).shape)) {
    shape_fail("reshape", "cannot view " + to_string(at(x).shape) + " as " + to_string(shape));
  }
  return push(unary<Node>(OpKind::reshape, x, shape));
}

NodeId Graph::stack(std::span<const NodeId> parts) {
  if (parts.empty()) shape_fail("stack", "no operands");
  const Shape& s0 = at(parts[0]).shape;
  for (NodeId p : parts) require_same("stack", s0, at(p).shape);
  Node n;
  n.kind = OpKind::stack;
  n.inputs.assign(parts.begin(), parts.end());
  n.shape = {parts.size()};
  n.shape.insert(n.shape.end(), s0.begin(), s0.end());
  return push(std::move(n));
}

NodeId Graph::index(NodeId x, std::size_t i) {
  if (i >= numel(at(x).shape)) {
    shape_fail("index", "index " + std::to_string(i) + " out of range for " +
                            to_string(at(x).shape));
  }
  auto n = unary<Node>(OpKind::index, x, {1});
  n.indices = {i};
  return push(std::move(n));
}

NodeId Graph::gather(NodeId x, std::vector<std::size_t> perm) {
  const std::size_t count = numel(at(x).shape);
  if (perm.size() != count) {
    shape_fail("gather", "permutation length " + std::to_string(perm.size()) + " vs " +
                             std::to_string(count) + " elements");
  }
  std::vector<char> seen(count, 0);
  for (std::size_t p : perm) {
    if (p >= count || seen[p]) shape_fail("gather", "argument is not a permutation");
    seen[p] = 1;
  }
  auto n = unary<Node>(OpKind::gather, x, at(x).shape);
  n.indices = std::move(perm);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward

void Graph::forward(std::size_t i) {
  Node& n = nodes_[i];
  auto in = [&](std::size_t k) -> const std::vector<double>& { return val(n.inputs[k].index); };
  auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[n.inputs[k].index].shape; };
  std::vector<double>& out = n.value;
  out.assign(numel(n.shape), 0.0);

  switch (n.kind) {
    case OpKind::input:
    case OpKind::constant:
    case OpKind::parameter:
      return;
    case OpKind::add: {
      const auto &a = in(0), &b = in(1);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] + b[j];
      break;
    }
    case OpKind::sub: {
      const auto &a = in(0), &b = in(1);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] - b[j];
      break;
    }
    case OpKind::mul: {
      const auto &a = in(0), &b = in(1);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] * b[j];
      break;
    }
    case OpKind::div: {
      const auto &a = in(0), &b = in(1);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] / b[j];
      break;
    }
    case OpKind::scalar_mul: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] * n.scalar_attr;
      break;
    }
    case OpKind::add_scalar: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] + n.scalar_attr;
      break;
    }
    case OpKind::relu: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] > 0.0 ? a[j] : 0.0;
      break;
    }
    case OpKind::log: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::log(a[j]);
      break;
    }
    case OpKind::clamp_min: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(a[j], n.scalar_attr);
      break;
    }
    case OpKind::stop_gradient:
    case OpKind::reshape:
      out = in(0);
      break;
    case OpKind::matmul: {
      const Shape &sa = in_shape(0), &sb = in_shape(1);
      MapMat(out.data(), static_cast<Eigen::Index>(sa[0]), static_cast<Eigen::Index>(sb[1])) =
          CMapMat(in(0).data(), static_cast<Eigen::Index>(sa[0]),
                  static_cast<Eigen::Index>(sa[1])) *
          CMapMat(in(1).data(), static_cast<Eigen::Index>(sb[0]),
                  static_cast<Eigen::Index>(sb[1]));
      break;
    }
    case OpKind::conv2d: {
      const Shape &sx = in_shape(0), &sw = in_shape(1);
      const std::size_t Ho = n.shape[1], Wo = n.shape[2];
      const std::size_t K = sw[1] * sw[2] * sw[3];
      std::vector<double> cols;
      im2col(in(0).data(), sx[0], sx[1], sx[2], sw[2], sw[3], n.conv, Ho, Wo, cols);
      MapMat o(out.data(), static_cast<Eigen::Index>(sw[0]), static_cast<Eigen::Index>(Ho * Wo));
      o.noalias() = CMapMat(in(1).data(), static_cast<Eigen::Index>(sw[0]),
                            static_cast<Eigen::Index>(K)) *
                    CMapMat(cols.data(), static_cast<Eigen::Index>(K),
                            static_cast<Eigen::Index>(Ho * Wo));
      if (n.inputs.size() == 3) {
        const auto& b = in(2);
        for (std::size_t c = 0; c < sw[0]; ++c) o.row(static_cast<Eigen::Index>(c)).array() += b[c];
      }
      break;
    }
    case OpKind::maxpool2d: {
      const Shape& sx = in_shape(0);
      const auto& a = in(0);
      const std::size_t C = sx[0], H = sx[1], W = sx[2];
      const std::size_t Ho = n.shape[1], Wo = n.shape[2];
      n.indices.assign(out.size(), 0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::size_t best = (c * H + oy * n.stride) * W + ox * n.stride;
            for (std::size_t ky = 0; ky < n.kernel; ++ky) {
              for (std::size_t kx = 0; kx < n.kernel; ++kx) {
                const std::size_t idx = (c * H + oy * n.stride + ky) * W + ox * n.stride + kx;
                if (a[idx] > a[best]) best = idx;
              }
            }
            const std::size_t o = (c * Ho + oy) * Wo + ox;
            out[o] = a[best];
            n.indices[o] = best;
          }
        }
      }
      break;
    }
    case OpKind::global_avg_pool: {
      const Shape& sx = in_shape(0);
      const auto& a = in(0);
      const std::size_t hw = sx[1] * sx[2];
      for (std::size_t c = 0; c < sx[0]; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += a[c * hw + j];
        out[c] = s / static_cast<double>(hw);
      }
      break;
    }
    case OpKind::dense_affine: {
      const Shape& sw = in_shape(1);
      const auto &x = in(0), &w = in(1), &b = in(2);
      for (std::size_t r = 0; r < sw[0]; ++r) {
        double s = b[r];
        for (std::size_t c = 0; c < sw[1]; ++c) s += w[r * sw[1] + c] * x[c];
        out[r] = s;
      }
      break;
    }
    case OpKind::softmax: {
      const auto& a = in(0);
      const double m = *std::max_element(a.begin(), a.end());
      double z = 0.0;
      for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = std::exp(a[j] - m);
        z += out[j];
      }
      for (double& v : out) v /= z;
      break;
    }
    case OpKind::neg_sq_euclidean: {
      const Shape& sp = in_shape(1);
      const auto &q = in(0), &p = in(1);
      for (std::size_t k = 0; k < sp[0]; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < sp[1]; ++j) {
          const double d = q[j] - p[k * sp[1] + j];
          s += d * d;
        }
        out[k] = -s;
      }
      break;
    }
    case OpKind::sum:
    case OpKind::mean: {
      const auto& a = in(0);
      double s = 0.0;
      for (double v : a) s += v;
      out[0] = n.kind == OpKind::mean ? s / static_cast<double>(a.size()) : s;
      break;
    }
    case OpKind::bilinear_upsample: {
      const Shape& sx = in_shape(0);
      const auto& a = in(0);
      const std::size_t h = sx[sx.size() - 2], w = sx[sx.size() - 1];
      const std::size_t H = n.shape[n.shape.size() - 2], W = n.shape[n.shape.size() - 1];
      const std::size_t C = sx.size() == 3 ? sx[0] : 1;
      const auto ty = bilinear_taps(h, H);
      const auto tx = bilinear_taps(w, W);
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = a.data() + c * h * w;
        double* dst = out.data() + c * H * W;
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            const Tap &vy = ty[y], &vx = tx[x];
            const double top = src[vy.lo * w + vx.lo] * (1 - vx.frac) + src[vy.lo * w + vx.hi] * vx.frac;
            const double bot = src[vy.hi * w + vx.lo] * (1 - vx.frac) + src[vy.hi * w + vx.hi] * vx.frac;
            dst[y * W + x] = top * (1 - vy.frac) + bot * vy.frac;
          }
        }
      }
      break;
    }
    case OpKind::stack: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& a = in(k);
        std::copy(a.begin(), a.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
        off += a.size();
      }
      break;
    }
    case OpKind::index:
      out[0] = in(0)[n.indices[0]];
      break;
    case OpKind::gather: {
      const auto& a = in(0);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[n.indices[j]];
      break;
    }
  }
  n.has_value = true;
}

void Graph::evaluate(const Feeds& feeds) {
  for (const auto& [id, values] : feeds) {
    const Node& n = at(id);
    if (n.kind != OpKind::input) {
      throw ValidationError("evaluate: node " + std::to_string(id.index) + " (" +
                            to_string(n.kind) + ") is not an input");
    }
    if (values.size() != numel(n.shape)) {
      throw ShapeError("evaluate: feed for node " + std::to_string(id.index) + " expected shape " +
                       to_string(n.shape) + " (" + std::to_string(numel(n.shape)) +
                       " values), got " + std::to_string(values.size()) + " values");
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::input) {
      auto it = feeds.find(NodeId{static_cast<std::uint32_t>(i)});
      if (it != feeds.end()) {
        n.value = it->second;
        n.has_value = true;
      } else if (!n.has_value) {
        throw ValidationError("evaluate: input node " + std::to_string(i) + " of shape " +
                              to_string(n.shape) + " has no feed");
      }
      continue;
    }
    if (n.kind == OpKind::parameter) {
      if (n.tensor->values.size() != numel(n.shape)) {
        throw ShapeError("evaluate: parameter node " + std::to_string(i) + " expected shape " +
                         to_string(n.shape) + ", tensor now has " +
                         std::to_string(n.tensor->values.size()) + " values");
      }
      continue;
    }
    if (n.kind == OpKind::constant) continue;
    forward(i);
  }
}

// ---------------------------------------------------------------------------
// Backward

void Graph::propagate(std::size_t i, const std::vector<double>& g,
                      std::vector<std::vector<double>>& grads,
                      const std::vector<char>& reach) const {
  const Node& n = nodes_[i];
  auto wants = [&](std::size_t k) { return reach[n.inputs[k].index] != 0; };
  auto gin = [&](std::size_t k) -> std::vector<double>& {
    return slot(grads, n.inputs[k], numel(nodes_[n.inputs[k].index].shape));
  };
  auto in = [&](std::size_t k) -> const std::vector<double>& { return val(n.inputs[k].index); };
  auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[n.inputs[k].index].shape; };
  const std::vector<double>& out = n.value;

  switch (n.kind) {
    case OpKind::input:
    case OpKind::constant:
    case OpKind::parameter:
    case OpKind::stop_gradient:
      return;
    case OpKind::add:
      if (wants(0)) add_into(gin(0), g);
      if (wants(1)) add_into(gin(1), g);
      return;
    case OpKind::sub:
      if (wants(0)) add_into(gin(0), g);
      if (wants(1)) {
        auto& d = gin(1);
        for (std::size_t j = 0; j < g.size(); ++j) d[j] -= g[j];
      }
      return;
    case OpKind::mul:
      if (wants(0)) {
        auto& d = gin(0);
        const auto& b = in(1);
        for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * b[j];
      }
      if (wants(1)) {
        auto& d = gin(1);
        const auto& a = in(0);
        for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * a[j];
      }
      return;
    case OpKind::div: {
      const auto &a = in(0), &b = in(1);
      if (wants(0)) {
        auto& d = gin(0);
        for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] / b[j];
      }
      if (wants(1)) {
        auto& d = gin(1);
        for (std::size_t j = 0; j < g.size(); ++j) d[j] -= g[j] * a[j] / (b[j] * b[j]);
      }
      return;
    }
    case OpKind::scalar_mul: {
      auto& d = gin(0);
      for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * n.scalar_attr;
      return;
    }
    case OpKind::add_scalar:
    case OpKind::reshape:
      add_into(gin(0), g);
      return;
    case OpKind::relu: {
      auto& d = gin(0);
      const auto& a = in(0);
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (a[j] > 0.0) d[j] += g[j];
      }
      return;
    }
    case OpKind::log: {
      auto& d = gin(0);
      const auto& a = in(0);
      for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] / a[j];
      return;
    }
    case OpKind::clamp_min: {
      auto& d = gin(0);
      const auto& a = in(0);
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (a[j] > n.scalar_attr) d[j] += g[j];
      }
      return;
    }
    case OpKind::matmul: {
      const Shape &sa = in_shape(0), &sb = in_shape(1);
      const auto m = static_cast<Eigen::Index>(sa[0]), k = static_cast<Eigen::Index>(sa[1]),
                 nn = static_cast<Eigen::Index>(sb[1]);
      CMapMat G(g.data(), m, nn);
      if (wants(0)) MapMat(gin(0).data(), m, k).noalias() += G * CMapMat(in(1).data(), k, nn).transpose();
      if (wants(1)) MapMat(gin(1).data(), k, nn).noalias() += CMapMat(in(0).data(), m, k).transpose() * G;
      return;
    }
    case OpKind::conv2d: {
      const Shape &sx = in_shape(0), &sw = in_shape(1);
      const std::size_t Ho = n.shape[1], Wo = n.shape[2];
      const auto K = static_cast<Eigen::Index>(sw[1] * sw[2] * sw[3]);
      const auto Cout = static_cast<Eigen::Index>(sw[0]);
      const auto P = static_cast<Eigen::Index>(Ho * Wo);
      CMapMat G(g.data(), Cout, P);
      if (wants(1)) {
        std::vector<double> cols;
        im2col(in(0).data(), sx[0], sx[1], sx[2], sw[2], sw[3], n.conv, Ho, Wo, cols);
        MapMat(gin(1).data(), Cout, K).noalias() += G * CMapMat(cols.data(), K, P).transpose();
      }
      if (n.inputs.size() == 3 && wants(2)) {
        auto& d = gin(2);
        // Plain loop: Eigen's vectorized sum splits by address alignment,
        // which makes the rounding depend on where the buffer was allocated.
        for (Eigen::Index c = 0; c < Cout; ++c) {
          double s = 0.0;
          for (Eigen::Index p = 0; p < P; ++p) s += G(c, p);
          d[static_cast<std::size_t>(c)] += s;
        }
      }
      if (wants(0)) {
        std::vector<double> dcols(static_cast<std::size_t>(K * P));
        MapMat(dcols.data(), K, P).noalias() = CMapMat(in(1).data(), Cout, K).transpose() * G;
        col2im_add(dcols.data(), sx[0], sx[1], sx[2], sw[2], sw[3], n.conv, Ho, Wo,
                   gin(0).data());
      }
      return;
    }
    case OpKind::maxpool2d: {
      auto& d = gin(0);
      for (std::size_t j = 0; j < g.size(); ++j) d[n.indices[j]] += g[j];
      return;
    }
    case OpKind::global_avg_pool: {
      const Shape& sx = in_shape(0);
      auto& d = gin(0);
      const std::size_t hw = sx[1] * sx[2];
      for (std::size_t c = 0; c < sx[0]; ++c) {
        const double v = g[c] / static_cast<double>(hw);
        for (std::size_t j = 0; j < hw; ++j) d[c * hw + j] += v;
      }
      return;
    }
    case OpKind::dense_affine: {
      const Shape& sw = in_shape(1);
      const auto &x = in(0), &w = in(1);
      if (wants(0)) {
        auto& d = gin(0);
        for (std::size_t r = 0; r < sw[0]; ++r)
          for (std::size_t c = 0; c < sw[1]; ++c) d[c] += w[r * sw[1] + c] * g[r];
      }
      if (wants(1)) {
        auto& d = gin(1);
        for (std::size_t r = 0; r < sw[0]; ++r)
          for (std::size_t c = 0; c < sw[1]; ++c) d[r * sw[1] + c] += g[r] * x[c];
      }
      if (wants(2)) {
        auto& d = gin(2);
        for (std::size_t r = 0; r < sw[0]; ++r) d[r] += g[r];
      }
      return;
    }
    case OpKind::softmax: {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * out[j];
      auto& d = gin(0);
      for (std::size_t j = 0; j < g.size(); ++j) d[j] += out[j] * (g[j] - dot);
      return;
    }
    case OpKind::neg_sq_euclidean: {
      const Shape& sp = in_shape(1);
      const auto &q = in(0), &p = in(1);
      const std::size_t N = sp[0], D = sp[1];
      if (wants(0)) {
        auto& d = gin(0);
        for (std::size_t k = 0; k < N; ++k)
          for (std::size_t j = 0; j < D; ++j) d[j] += -2.0 * g[k] * (q[j] - p[k * D + j]);
      }
      if (wants(1)) {
        auto& d = gin(1);
        for (std::size_t k = 0; k < N; ++k)
          for (std::size_t j = 0; j < D; ++j) d[k * D + j] += 2.0 * g[k] * (q[j] - p[k * D + j]);
      }
      return;
    }
    case OpKind::sum:
    case OpKind::mean: {
      auto& d = gin(0);
      const double v = n.kind == OpKind::mean ? g[0] / static_cast<double>(d.size()) : g[0];
      for (double& x : d) x += v;
      return;
    }
    case OpKind::bilinear_upsample: {
      const Shape& sx = in_shape(0);
      const std::size_t h = sx[sx.size() - 2], w = sx[sx.size() - 1];
      const std::size_t H = n.shape[n.shape.size() - 2], W = n.shape[n.shape.size() - 1];
      const std::size_t C = sx.size() == 3 ? sx[0] : 1;
      const auto ty = bilinear_taps(h, H);
      const auto tx = bilinear_taps(w, W);
      auto& d = gin(0);
      for (std::size_t c = 0; c < C; ++c) {
        double* dst = d.data() + c * h * w;
        const double* src = g.data() + c * H * W;
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            const Tap &vy = ty[y], &vx = tx[x];
            const double v = src[y * W + x];
            dst[vy.lo * w + vx.lo] += v * (1 - vy.frac) * (1 - vx.frac);
            dst[vy.lo * w + vx.hi] += v * (1 - vy.frac) * vx.frac;
            dst[vy.hi * w + vx.lo] += v * vy.frac * (1 - vx.frac);
            dst[vy.hi * w + vx.hi] += v * vy.frac * vx.frac;
          }
        }
      }
      return;
    }
    case OpKind::stack: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t len = numel(in_shape(k));
        if (wants(k)) {
          auto& d = gin(k);
          for (std::size_t j = 0; j < len; ++j) d[j] += g[off + j];
        }
        off += len;
      }
      return;
    }
    case OpKind::index:
      gin(0)[n.indices[0]] += g[0];
      return;
    case OpKind::gather: {
      auto& d = gin(0);
      for (std::size_t j = 0; j < g.size(); ++j) d[n.indices[j]] += g[j];
      return;
    }
  }
}

std::vector<std::vector<double>> Graph::run_backward(std::size_t root,
                                                     const std::vector<char>& reach) const {
  const Node& r = nodes_[root];
  if (numel(r.shape) != 1) {
    throw ShapeError("backward: node " + std::to_string(root) + " (" + to_string(r.kind) +
                     ") is not scalar, shape " + to_string(r.shape));
  }
  for (std::size_t i = 0; i <= root; ++i) {
    if (reach[i] && !nodes_[i].has_value) {
      throw ValidationError("backward: node " + std::to_string(i) + " (" +
                            to_string(nodes_[i].kind) + ") has not been evaluated");
    }
  }
  if (!r.has_value) {
    throw ValidationError("backward: loss node " + std::to_string(root) + " has not been evaluated");
  }
  std::vector<std::vector<double>> grads(root + 1);
  grads[root] = {1.0};
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!reach[i] || grads[i].empty()) continue;
    propagate(i, grads[i], grads, reach);
  }
  return grads;
}

void Graph::backward(NodeId loss) {
  at(loss);
  const std::size_t root = loss.index;
  std::vector<char> reach(root + 1, 0);
  for (std::size_t i = 0; i <= root; ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::stop_gradient) continue;
    if ((n.kind == OpKind::parameter || n.kind == OpKind::input) && n.requires_grad) {
      reach[i] = 1;
      continue;
    }
    for (NodeId in : n.inputs) {
      if (reach[in.index]) {
        reach[i] = 1;
        break;
      }
    }
  }
  auto grads = run_backward(root, reach);
  for (std::size_t i = 0; i <= root; ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::input && n.requires_grad && n.grad.empty()) {
      n.grad.assign(n.value.size(), 0.0);
    }
    if (!reach[i] || grads[i].empty() || !n.requires_grad) continue;
    if (n.kind == OpKind::parameter) {
      if (n.writable == nullptr) continue;
      Tensor& t = *n.writable;
      if (t.grad.size() != t.values.size()) t.grad.assign(t.values.size(), 0.0);
      for (std::size_t j = 0; j < t.grad.size(); ++j) t.grad[j] += grads[i][j];
    } else if (n.kind == OpKind::input) {
      add_into(n.grad, grads[i]);
    }
  }
}

std::vector<std::vector<double>> Graph::gradients(NodeId of, std::span<const NodeId> wrt) const {
  at(of);
  const std::size_t root = of.index;
  std::vector<char> reach(root + 1, 0);
  for (NodeId w : wrt) {
    at(w);
    if (w.index <= root) reach[w.index] = 1;
  }
  for (std::size_t i = 0; i <= root; ++i) {
    const Node& n = nodes_[i];
    if (reach[i] || n.kind == OpKind::stop_gradient) continue;
    for (NodeId in : n.inputs) {
      if (reach[in.index]) {
        reach[i] = 1;
        break;
      }
    }
  }
  auto grads = run_backward(root, reach);
  std::vector<std::vector<double>> result;
  result.reserve(wrt.size());
  for (NodeId w : wrt) {
    const std::size_t len = numel(nodes_[w.index].shape);
    if (w.index <= root && grads[w.index].size() == len) {
      result.push_back(grads[w.index]);
    } else {
      result.emplace_back(len, 0.0);
    }
  }
  return result;
}

void Graph::zero_grads() {
  for (Node& n : nodes_) {
    if (n.kind == OpKind::parameter && n.writable && n.writable->requires_grad) {
      n.writable->zero_grad();
    }
    if (n.kind == OpKind::input) n.grad.clear();
  }
}

// ---------------------------------------------------------------------------
// Accessors

const std::vector<double>& Graph::value(NodeId id) const {
  const Node& n = at(id);
  if (!n.has_value) {
    throw ValidationError("node " + std::to_string(id.index) + " (" + to_string(n.kind) +
                          ") has not been evaluated");
  }
  return val(id.index);
}

double Graph::scalar(NodeId id) const {
  const auto& v = value(id);
  if (v.size() != 1) {
    throw ShapeError("node " + std::to_string(id.index) + " is not scalar, shape " +
                     to_string(at(id).shape));
  }
  return v[0];
}

const Shape& Graph::shape(NodeId id) const { return at(id).shape; }
OpKind Graph::kind(NodeId id) const { return at(id).kind; }
bool Graph::has_value(NodeId id) const { return at(id).has_value; }

const std::vector<double>& Graph::input_grad(NodeId id) const {
  const Node& n = at(id);
  if (n.kind != OpKind::input) {
    throw ValidationError("node " + std::to_string(id.index) + " is not an input");
  }
  return n.grad;
}

std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> point,
    double step) {
  if (!(step > 0.0)) throw ValidationError("finite_difference_gradient: step must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_gradient: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace xfsl::ad
