#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. A Graph is a tape: nodes are appended in creation order,
// which is also a valid topological order. Ops whose inputs already carry
// values are evaluated eagerly; placeholders created without a value defer
// evaluation of everything downstream until Graph::evaluate supplies feeds.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xfsl::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Value + accumulated gradient. Model parameters live in Tensors owned by the
// caller; graphs only reference them.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty means "absent"
  bool requires_grad = false;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(values.size(), 0.0); }
};

struct NodeId {
  std::uint32_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

enum class OpKind {
  input,
  constant,
  parameter,
  add,
  sub,
  mul,
  div,
  matmul,
  conv2d,
  relu,
  maxpool2d,
  global_avg_pool,
  dense_affine,
  softmax,
  log,
  neg_sq_euclidean,
  sum,
  mean,
  bilinear_upsample,
  clamp_min,
  scalar_mul,
  add_scalar,
  stop_gradient,
  reshape,
  stack,
  index,
  gather,
};

const char* to_string(OpKind kind);

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

using Feeds = std::map<NodeId, std::vector<double>>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves.
  NodeId input(Shape shape, bool requires_grad = false);
  NodeId input(Shape shape, std::vector<double> values, bool requires_grad = false);
  NodeId constant(Shape shape, std::vector<double> values);
  NodeId parameter(Tensor& tensor);
  // Read-only view of a tensor: never receives gradient.
  NodeId frozen(const Tensor& tensor);

  // Elementwise binary ops; operands must have identical shapes.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);

  NodeId scalar_mul(NodeId x, double factor);
  NodeId add_scalar(NodeId x, double offset);
  NodeId relu(NodeId x);
  NodeId log(NodeId x);
  NodeId clamp_min(NodeId x, double floor);
  NodeId stop_gradient(NodeId x);

  // (m,k) x (k,n) -> (m,n)
  NodeId matmul(NodeId a, NodeId b);
  // x: (Cin,H,W), weight: (Cout,Cin,kh,kw), bias: (Cout). Cross-correlation.
  NodeId conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Conv2dAttrs attrs);
  // x: (C,H,W); square window, floor output size. Ties go to the first
  // element in row-major scan order.
  NodeId maxpool2d(NodeId x, std::size_t kernel, std::size_t stride);
  // (C,H,W) -> (C)
  NodeId global_avg_pool(NodeId x);
  // x: (n), weight: (m,n), bias: (m) -> (m)
  NodeId dense_affine(NodeId x, NodeId weight, NodeId bias);
  // Softmax over a 1-D vector, max-subtracted.
  NodeId softmax(NodeId x);
  // query: (d), points: (N,d) -> (N) with entry k = -||query - points_k||^2
  NodeId neg_sq_euclidean(NodeId query, NodeId points);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  // (h,w) -> (H,W) or (C,h,w) -> (C,H,W); half-pixel centres, border clamp.
  NodeId bilinear_upsample(NodeId x, std::size_t out_h, std::size_t out_w);
  NodeId reshape(NodeId x, Shape shape);
  // n nodes of identical shape S -> (n, S...)
  NodeId stack(std::span<const NodeId> parts);
  // Flat element i as a shape-{1} node.
  NodeId index(NodeId x, std::size_t i);
  // out[i] = x[perm[i]]; perm must be a permutation of [0, numel).
  NodeId gather(NodeId x, std::vector<std::size_t> perm);

  // Re-runs the forward pass in creation order. Feeds replace the values of
  // input nodes; parameter nodes re-read their tensors.
  void evaluate(const Feeds& feeds = {});

  // Reverse accumulation from a scalar node into every reachable parameter
  // tensor that requires grad and into input nodes created with
  // requires_grad. Repeated calls accumulate.
  void backward(NodeId loss);

  // d(of)/d(node) for each node in `wrt`, without touching any parameter
  // tensor. Returned arrays have the shape of the corresponding node.
  std::vector<std::vector<double>> gradients(NodeId of, std::span<const NodeId> wrt) const;

  // Resets accumulated gradients of referenced parameters and grad inputs.
  void zero_grads();

  const std::vector<double>& value(NodeId id) const;
  double scalar(NodeId id) const;
  const Shape& shape(NodeId id) const;
  OpKind kind(NodeId id) const;
  bool has_value(NodeId id) const;
  // Gradient accumulated on an input node created with requires_grad.
  const std::vector<double>& input_grad(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::input;
    std::vector<NodeId> inputs;
    Shape shape;
    std::vector<double> value;
    bool has_value = false;
    bool requires_grad = false;
    const Tensor* tensor = nullptr;
    Tensor* writable = nullptr;
    double scalar_attr = 0.0;
    Conv2dAttrs conv;
    std::size_t kernel = 0;
    std::size_t stride = 0;
    std::vector<std::size_t> indices;  // maxpool argmax, gather perm, index
    std::vector<double> grad;          // input nodes only
  };

  NodeId push(Node node);
  const Node& at(NodeId id) const;
  const std::vector<double>& val(std::size_t i) const;
  void forward(std::size_t i);
  std::vector<std::vector<double>> run_backward(std::size_t root,
                                                const std::vector<char>& reach) const;
  void propagate(std::size_t i, const std::vector<double>& gout,
                 std::vector<std::vector<double>>& grads,
                 const std::vector<char>& reach) const;

  std::vector<Node> nodes_;
};

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h. Throws NumericError
// naming the coordinate when f is non-finite at a probe point.
std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> point,
    double step);

}  // namespace xfsl::ad
