#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xfsl/attribution.hpp"
#include "xfsl/autodiff.hpp"
#include "xfsl/encoder.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/sample.hpp"

namespace xfsl::alignment {

struct AlignmentConfig {
  double smoothing_eps = 1.0;
  double binarize_threshold = 0.5;
  double tau = 0.4;

  void validate() const;
};

// 1 - (2 sum(G*M) + eps) / (sum G + sum M + eps), differentiable in G.
ad::NodeId soft_dice_loss(ad::Graph& g, ad::NodeId heatmap, std::span<const double> mask,
                          double eps);
double soft_dice_loss(std::span<const double> heatmap, std::span<const double> mask, double eps);

// Hard overlap of {G >= threshold} with {M > 0.5}. Both empty -> 1, exactly
// one empty -> 0.
double hard_dice(std::span<const double> heatmap, std::span<const double> mask, double threshold);
double binary_iou(std::span<const double> heatmap, std::span<const double> mask,
                  double threshold);

// Uniformly random permutation of [0, n) from a seed (Fisher-Yates).
std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed);

attribution::Heatmap permute_heatmap(const attribution::Heatmap& heatmap, std::uint64_t seed);

// Fraction of samples whose detached Grad-CAM at the true class reaches
// hard Dice >= tau against the expert mask.
double h_aligned_fraction(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                          std::span<const Sample> dataset, double tau,
                          double threshold = 0.5);

}  // namespace xfsl::alignment
