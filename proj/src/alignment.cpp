#include "xfsl/alignment.hpp"

#include <random>

#include "xfsl/error.hpp"
#include "xfsl/parallel.hpp"

namespace xfsl::alignment {

namespace {

void require_match(const char* op, std::size_t a, std::size_t b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": heatmap has " + std::to_string(a) +
                     " cells, mask has " + std::to_string(b));
  }
}

struct Counts {
  std::size_t pred = 0, truth = 0, both = 0;
};

Counts count(std::span<const double> g, std::span<const double> m, double threshold,
             const char* op) {
  require_match(op, g.size(), m.size());
  Counts c;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool p = g[i] >= threshold;
    const bool t = m[i] > 0.5;
    c.pred += p;
    c.truth += t;
    c.both += p && t;
  }
  return c;
}

}  // namespace

void AlignmentConfig::validate() const {
  if (!(smoothing_eps > 0.0)) throw ConfigError("alignment: smoothing_eps must be positive");
  if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0)) {
    throw ConfigError("alignment: binarize_threshold must lie in (0, 1)");
  }
  if (!(tau >= 0.0)) throw ConfigError("alignment: tau must be non-negative");
}

ad::NodeId soft_dice_loss(ad::Graph& g, ad::NodeId heatmap, std::span<const double> mask,
                          double eps) {
  const ad::Shape shape = g.shape(heatmap);
  require_match("soft_dice_loss", ad::numel(shape), mask.size());
  double mask_sum = 0.0;
  for (double v : mask) mask_sum += v;
  const auto m = g.constant(shape, std::vector<double>(mask.begin(), mask.end()));
  const auto inter = g.sum(g.mul(heatmap, m));
  const auto num = g.add_scalar(g.scalar_mul(inter, 2.0), eps);
  const auto den = g.add_scalar(g.sum(heatmap), mask_sum + eps);
  return g.add_scalar(g.scalar_mul(g.div(num, den), -1.0), 1.0);
}

double soft_dice_loss(std::span<const double> heatmap, std::span<const double> mask, double eps) {
  ad::Graph g;
  const auto h = g.constant({heatmap.size()}, std::vector<double>(heatmap.begin(), heatmap.end()));
  return g.scalar(soft_dice_loss(g, h, mask, eps));
}

double hard_dice(std::span<const double> heatmap, std::span<const double> mask, double threshold) {
  const Counts c = count(heatmap, mask, threshold, "hard_dice");
  if (c.pred + c.truth == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.truth);
}

double binary_iou(std::span<const double> heatmap, std::span<const double> mask,
                  double threshold) {
  const Counts c = count(heatmap, mask, threshold, "binary_iou");
  const std::size_t uni = c.pred + c.truth - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

attribution::Heatmap permute_heatmap(const attribution::Heatmap& heatmap, std::uint64_t seed) {
  const auto perm = random_permutation(heatmap.values.size(), seed);
  attribution::Heatmap out = heatmap;
  for (std::size_t i = 0; i < perm.size(); ++i) out.values[i] = heatmap.values[perm[i]];
  return out;
}

double h_aligned_fraction(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                          std::span<const Sample> dataset, double tau, double threshold) {
  if (dataset.empty()) throw ValidationError("h_aligned_fraction: empty dataset");
  std::vector<char> aligned(dataset.size(), 0);
  parallel_for(dataset.size(), [&](std::size_t i) {
    const Sample& s = dataset[i];
    if (!s.has_mask()) throw ValidationError("h_aligned_fraction: sample " + s.id + " has no mask");
    const auto heat = attribution::grad_cam(encoder, prototypes, s.image, s.label);
    aligned[i] = hard_dice(heat.values, s.mask, threshold) >= tau;
  });
  std::size_t hits = 0;
  for (char a : aligned) hits += a;
  return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

}  // namespace xfsl::alignment
