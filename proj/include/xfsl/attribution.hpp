#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xfsl/autodiff.hpp"
#include "xfsl/encoder.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/sample.hpp"

namespace xfsl::attribution {

enum class Method { gradcam, integrated_gradients };
enum class Mode { differentiable, detached };
enum class Normalization { minmax_unit, raw };

const char* to_string(Method method);
Method method_from_string(const std::string& name);

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  Normalization normalization = Normalization::minmax_unit;
  // Set when max == min before normalization; values are then all zero.
  bool degenerate = false;
};

// -||embedding - prototypes[target]||^2, the pre-softmax logit of `target`.
ad::NodeId class_score(ad::Graph& g, ad::NodeId embedding, ad::NodeId prototypes,
                       std::size_t target);

struct GradCam {
  ad::NodeId map;  // (H, W) node holding the normalized heatmap
  Heatmap heatmap;
};

// Grad-CAM of an arbitrary scalar `score` with respect to the (C, h, w)
// activation block, upsampled to out_h x out_w and min-max normalized.
// Channel weights are always constants. In differentiable mode the map keeps
// its graph connection through the activations (the subtracted minimum
// included) while the range used as divisor enters as a constant; in
// detached mode the activations themselves are cut off with stop_gradient.
GradCam grad_cam(ad::Graph& g, ad::NodeId score, ad::NodeId activations, std::size_t out_h,
                 std::size_t out_w, Mode mode);

// Detached Grad-CAM of a single image under a frozen encoder.
Heatmap grad_cam(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                 const Image& image, std::size_t target);

// Builds a scalar score node from an input node on `g`.
using ScoreBuilder = std::function<ad::NodeId(ad::Graph& g, ad::NodeId input)>;

// x * mean_j grad(score)((j / steps) x), j = 1..steps, for an arbitrary
// differentiable score of an input of the given shape.
std::vector<double> integrated_gradients_signed(const ScoreBuilder& score, const ad::Shape& shape,
                                                std::span<const double> input,
                                                std::size_t steps);

// x * mean_j grad(score)((j / steps) x), j = 1..steps (black baseline,
// right-endpoint Riemann sum). Shape (C, H, W), signed.
std::vector<double> integrated_gradients_signed(const Encoder& encoder,
                                                const fewshot::PrototypeSet& prototypes,
                                                const Image& image, std::size_t target,
                                                std::size_t steps);

// Channel-summed |IG| over (H, W), min-max normalized.
Heatmap integrated_gradients(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                             const Image& image, std::size_t target, std::size_t steps);

// Min-max normalization to [0, 1]; a flat map becomes all zeros, flagged.
Heatmap normalize_minmax(std::vector<double> values, std::size_t height, std::size_t width);

Heatmap attribute(Method method, const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                  const Image& image, std::size_t target, std::size_t ig_steps = 64);

// Writes `<dir>/<sample_id>.<method>.pgm` with bytes round(255 v).
std::filesystem::path dump_heatmap(const Heatmap& heatmap, const std::filesystem::path& dir,
                                   const std::string& sample_id, Method method);

}  // namespace xfsl::attribution
