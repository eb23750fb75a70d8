#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xfsl/autodiff.hpp"
#include "xfsl/encoder.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/sample.hpp"

namespace xfsl::train {

enum class Mode { baseline, guided, random_cam_control };

const char* to_string(Mode mode);
Mode mode_from_string(const std::string& name);

struct TrainConfig {
  Mode mode = Mode::guided;
  double alpha = 0.10;
  std::size_t n_way = 3;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 5;
  std::size_t epochs = 10;
  std::size_t episodes_per_epoch = 20;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double smoothing_eps = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  // alpha as actually applied: 0 in baseline mode.
  double effective_alpha() const { return mode == Mode::baseline ? 0.0 : alpha; }
  // The explanation term is built whenever the mode asks for it, even at
  // alpha = 0 (it is then reported but carries no gradient).
  bool builds_explanation_term() const { return mode != Mode::baseline; }
};

struct LossBreakdown {
  double l_proto = 0.0;
  double l_exp = 0.0;
  double l_total = 0.0;
};

struct EpisodeLoss {
  LossBreakdown values;
  ad::NodeId total;
};

// Builds L_total = L_proto + alpha * L_exp for one episode on `g`, with the
// encoder's parameters as trainable leaves. L_proto and L_exp are means over
// the episode's queries; L_exp is the smoothed Dice loss between the
// differentiable Grad-CAM at the query's true class and its mask. In
// random-CAM mode every heatmap is permuted (seeded from `perm_seed`) first.
EpisodeLoss episode_total_loss(ad::Graph& g, Encoder& encoder, const fewshot::Episode& episode,
                               const TrainConfig& config, std::uint64_t perm_seed = 0);

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps);
  // One update of every tensor from its accumulated gradient.
  void step(std::span<ad::Tensor* const> params);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainTrace {
  std::vector<LossBreakdown> epochs;  // mean over each epoch's episodes
};

// Seeds used for episode sampling and CAM permutation; exposed for
// diagnostics.
std::uint64_t episode_seed(std::uint64_t seed, std::size_t epoch, std::size_t episode);

// Episodic training with one Adam step per episode. Throws NumericError
// naming the episode seed on a non-finite loss.
TrainTrace train(Encoder& encoder, std::span<const Sample> pool, const TrainConfig& config);

struct EvalReport {
  double accuracy = 0.0;
  double macro_auc = 0.0;
  std::vector<double> per_class_f1;
  double mean_cam_mask_iou = 0.0;
  std::vector<std::size_t> confusion;  // row-major, [true][pred]
  std::size_t n_classes = 0;
  std::vector<std::string> support_ids;
};

// Fixed evaluation support draw (K per class, seeded by config.seed) from the
// support pool, then per-sample classification and detached Grad-CAM at the
// predicted class scored by IoU against the mask.
EvalReport evaluate(const Encoder& encoder, std::span<const Sample> support_pool,
                    std::span<const Sample> test_set, const TrainConfig& config);

fewshot::PrototypeSet support_prototypes(const Encoder& encoder,
                                         std::span<const Sample> support_pool,
                                         const TrainConfig& config,
                                         std::vector<std::string>* support_ids = nullptr);

std::vector<double> embed(const Encoder& encoder, const Image& image);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_trace_csv(const TrainTrace& trace, const std::filesystem::path& path);

}  // namespace xfsl::train
