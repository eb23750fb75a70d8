#include "xfsl/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "xfsl/error.hpp"
#include "xfsl/pgm.hpp"

namespace xfsl::attribution {

const char* to_string(Method method) {
  return method == Method::gradcam ? "gradcam" : "ig";
}

Method method_from_string(const std::string& name) {
  if (name == "gradcam") return Method::gradcam;
  if (name == "ig" || name == "integrated_gradients") return Method::integrated_gradients;
  throw ValidationError("unknown attribution method '" + name + "'");
}

ad::NodeId class_score(ad::Graph& g, ad::NodeId embedding, ad::NodeId prototypes,
                       std::size_t target) {
  const auto& ps = g.shape(prototypes);
  if (ps.size() != 2 || target >= ps[0]) {
    throw ValidationError("class_score: target class " + std::to_string(target) +
                          " out of range for prototypes " + ad::to_string(ps));
  }
  return g.index(g.neg_sq_euclidean(embedding, prototypes), target);
}

Heatmap normalize_minmax(std::vector<double> values, std::size_t height, std::size_t width) {
  Heatmap h{height, width, std::move(values), Normalization::minmax_unit, false};
  const auto [lo_it, hi_it] = std::minmax_element(h.values.begin(), h.values.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  if (!(range > 0.0)) {
    std::fill(h.values.begin(), h.values.end(), 0.0);
    h.degenerate = true;
    return h;
  }
  for (double& v : h.values) v = (v - lo) / range;
  return h;
}

GradCam grad_cam(ad::Graph& g, ad::NodeId score, ad::NodeId activations, std::size_t out_h,
                 std::size_t out_w, Mode mode) {
  const ad::Shape shape = g.shape(activations);
  if (shape.size() != 3) {
    throw ShapeError("grad_cam: activations must be (C,h,w), got " + ad::to_string(shape));
  }
  const std::size_t C = shape[0], hw = shape[1] * shape[2];
  const ad::NodeId wrt[] = {activations};
  const auto grads = g.gradients(score, wrt);
  std::vector<double> weights(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += grads[0][c * hw + j];
    weights[c] = s / static_cast<double>(hw);
  }
  for (double w : weights) {
    if (!std::isfinite(w)) throw NumericError("grad_cam: non-finite channel weight");
  }

  const ad::NodeId acts = mode == Mode::detached ? g.stop_gradient(activations) : activations;
  const ad::NodeId w = g.constant({1, C}, weights);
  const ad::NodeId lin = g.matmul(w, g.reshape(acts, {C, hw}));
  const ad::NodeId raw = g.reshape(g.relu(lin), {shape[1], shape[2]});
  const ad::NodeId up = g.bilinear_upsample(raw, out_h, out_w);

  Heatmap heat = normalize_minmax(g.value(up), out_h, out_w);
  ad::NodeId map;
  if (heat.degenerate) {
    map = g.scalar_mul(up, 0.0);
  } else {
    // The subtracted minimum stays on the graph (it is one of the map's own
    // cells); only the range used as divisor is a constant.
    const auto& v = g.value(up);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const std::size_t n = out_h * out_w;
    const ad::NodeId min_cell =
        g.reshape(g.index(up, static_cast<std::size_t>(lo - v.begin())), {1, 1});
    const ad::NodeId floor =
        g.reshape(g.matmul(g.constant({n, 1}, std::vector<double>(n, 1.0)), min_cell),
                  {out_h, out_w});
    map = g.div(g.sub(up, floor), g.constant({out_h, out_w}, std::vector<double>(n, *hi - *lo)));
  }
  return {map, std::move(heat)};
}

Heatmap grad_cam(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                 const Image& image, std::size_t target) {
  ad::Graph g;
  const auto x = g.constant({image.channels, image.height, image.width}, image.values);
  const auto out = encoder.encode_frozen(g, x);
  const auto p = g.constant({prototypes.n_way(), prototypes.dim()}, prototypes.flat());
  const auto score = class_score(g, out.embedding, p, target);
  return grad_cam(g, score, out.last_conv, image.height, image.width, Mode::detached).heatmap;
}

std::vector<double> integrated_gradients_signed(const ScoreBuilder& score_of,
                                                const ad::Shape& shape,
                                                std::span<const double> input,
                                                std::size_t steps) {
  if (steps == 0) throw ValidationError("integrated_gradients: steps must be >= 1");
  if (input.size() != ad::numel(shape)) {
    throw ShapeError("integrated_gradients: input has " + std::to_string(input.size()) +
                     " values, shape " + ad::to_string(shape) + " needs " +
                     std::to_string(ad::numel(shape)));
  }
  ad::Graph g;
  const auto x = g.input(shape, true);
  const auto score = score_of(g, x);
  const ad::NodeId wrt[] = {x};

  std::vector<double> mean_grad(input.size(), 0.0);
  std::vector<double> scaled(input.size());
  for (std::size_t j = 1; j <= steps; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(steps);
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = t * input[i];
    g.evaluate({{x, scaled}});
    const auto grad = g.gradients(score, wrt);
    for (std::size_t i = 0; i < mean_grad.size(); ++i) mean_grad[i] += grad[0][i];
  }
  std::vector<double> ig(input.size());
  for (std::size_t i = 0; i < ig.size(); ++i) {
    ig[i] = input[i] * mean_grad[i] / static_cast<double>(steps);
    if (!std::isfinite(ig[i])) {
      throw NumericError("integrated_gradients: non-finite gradient at element " +
                         std::to_string(i));
    }
  }
  return ig;
}

std::vector<double> integrated_gradients_signed(const Encoder& encoder,
                                                const fewshot::PrototypeSet& prototypes,
                                                const Image& image, std::size_t target,
                                                std::size_t steps) {
  if (target >= prototypes.n_way()) {
    throw ValidationError("integrated_gradients: target class " + std::to_string(target) +
                          " out of range");
  }
  const auto flat = prototypes.flat();
  const ScoreBuilder score_of = [&](ad::Graph& g, ad::NodeId x) {
    const auto out = encoder.encode_frozen(g, x);
    const auto p = g.constant({prototypes.n_way(), prototypes.dim()}, flat);
    return class_score(g, out.embedding, p, target);
  };
  return integrated_gradients_signed(score_of, {image.channels, image.height, image.width},
                                     image.values, steps);
}

Heatmap integrated_gradients(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                             const Image& image, std::size_t target, std::size_t steps) {
  const auto ig = integrated_gradients_signed(encoder, prototypes, image, target, steps);
  const std::size_t hw = image.height * image.width;
  std::vector<double> grid(hw, 0.0);
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) grid[i] += std::abs(ig[c * hw + i]);
  return normalize_minmax(std::move(grid), image.height, image.width);
}

Heatmap attribute(Method method, const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                  const Image& image, std::size_t target, std::size_t ig_steps) {
  return method == Method::gradcam
             ? grad_cam(encoder, prototypes, image, target)
             : integrated_gradients(encoder, prototypes, image, target, ig_steps);
}

std::filesystem::path dump_heatmap(const Heatmap& heatmap, const std::filesystem::path& dir,
                                   const std::string& sample_id, Method method) {
  const auto path = dir / (sample_id + "." + to_string(method) + ".pgm");
  pgm::write(pgm::from_unit(heatmap.values, heatmap.height, heatmap.width), path);
  return path;
}

}  // namespace xfsl::attribution
