#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "xfsl/alignment.hpp"
#include "xfsl/attribution.hpp"
#include "xfsl/error.hpp"
#include "xfsl/pgm.hpp"
#include "xfsl/trainer.hpp"

using namespace xfsl;
using namespace xfsl::attribution;

namespace {

EncoderConfig toy_config() {
  EncoderConfig c;
  c.height = 32;
  c.width = 32;
  c.blocks = {{6, 3, 1, 2}, {8, 3, 1, 2}};
  c.embedding_dim = 6;
  c.seed = 11;
  return c;
}

// Dark image with one bright blob inside the 8x8 patch at (2, 1).
Image blob_image() {
  Image im{1, 32, 32, std::vector<double>(32 * 32, 0.0)};
  for (std::size_t r = 18; r < 22; ++r)
    for (std::size_t c = 10; c < 14; ++c) im.values[r * 32 + c] = 1.0;
  return im;
}

std::vector<double> embed(const Encoder& e, const Image& im) { return train::embed(e, im); }

double score_of(const Encoder& e, const fewshot::PrototypeSet& p, const Image& im,
                std::size_t target) {
  const auto emb = embed(e, im);
  double d = 0.0;
  for (std::size_t j = 0; j < emb.size(); ++j) {
    d += (emb[j] - p.prototypes[target][j]) * (emb[j] - p.prototypes[target][j]);
  }
  return -d;
}

// Target prototype pushed past the image's embedding along its offset from
// the blank-image embedding, other prototypes random.
fewshot::PrototypeSet toy_prototypes(const Encoder& e, const Image& im, double reach) {
  const auto emb = embed(e, im);
  const auto blank = embed(e, Image{im.channels, im.height, im.width,
                                    std::vector<double>(im.size(), 0.0)});
  fewshot::PrototypeSet p;
  std::vector<double> c0(emb.size());
  for (std::size_t j = 0; j < emb.size(); ++j) c0[j] = blank[j] + reach * (emb[j] - blank[j]);
  p.prototypes.push_back(c0);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> c(emb.size());
    for (auto& v : c) v = d(rng);
    p.prototypes.push_back(c);
  }
  return p;
}

void expect_unit_heatmap(const Heatmap& h) {
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  EXPECT_GE(*lo, 0.0);
  EXPECT_TRUE(*hi == 1.0 || *hi == 0.0) << *hi;
  if (h.degenerate) EXPECT_EQ(*hi, 0.0);
}

}  // namespace

TEST(ClassScore, ZeroAtPrototypeNegativeElsewhere) {
  ad::Graph g;
  const auto e = g.constant({2}, {1.0, 2.0});
  const auto p = g.constant({2, 2}, {1.0, 2.0, 0.0, 0.0});
  EXPECT_EQ(g.scalar(class_score(g, e, p, 0)), 0.0);
  EXPECT_LT(g.scalar(class_score(g, e, p, 1)), 0.0);
  EXPECT_THROW(class_score(g, e, p, 2), ValidationError);
}

TEST(ClassScore, ImageGradientMatchesFiniteDifferences) {
  EncoderConfig c = toy_config();
  c.height = 16;
  c.width = 16;
  Encoder enc(c);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> img(256);
  for (auto& v : img) v = u(rng);
  fewshot::PrototypeSet protos{{std::vector<double>(6, 0.3), std::vector<double>(6, -0.2)}};
  ad::Graph g;
  const auto x = g.input({1, 16, 16}, img, true);
  const auto out = enc.encode_frozen(g, x);
  const auto p = g.constant({2, 6}, protos.flat());
  const auto s = class_score(g, out.embedding, p, 1);
  const ad::NodeId wrt[] = {x};
  const auto analytic = g.gradients(s, wrt)[0];
  const auto f = [&](std::span<const double> v) {
    g.evaluate({{x, std::vector<double>(v.begin(), v.end())}});
    return g.scalar(s);
  };
  const auto numeric = ad::finite_difference_gradient(f, img, 1e-5);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
    EXPECT_LE(std::abs(analytic[i] - numeric[i]) / scale, 1e-4) << i;
  }
}

TEST(GradCam, SingleChannelIsNormalizedActivation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::vector<double> a(16);
  for (auto& v : a) v = u(rng);
  ad::Graph g;
  const auto acts = g.input({1, 4, 4}, a, true);
  const auto score = g.scalar_mul(g.sum(acts), 0.5);
  const auto cam = grad_cam(g, score, acts, 4, 4, Mode::detached);
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(cam.heatmap.values[i], (a[i] - *lo) / (*hi - *lo), 1e-12);
  }
  EXPECT_EQ(*std::max_element(cam.heatmap.values.begin(), cam.heatmap.values.end()), 1.0);
  EXPECT_FALSE(cam.heatmap.degenerate);
  EXPECT_EQ(g.value(cam.map), cam.heatmap.values);
}

TEST(GradCam, NonPositiveWeightsGiveDegenerateZeroMap) {
  ad::Graph g;
  const auto acts = g.input({2, 3, 3}, std::vector<double>(18, 0.7), true);
  const auto score = g.scalar_mul(g.sum(acts), -1.0);
  const auto cam = grad_cam(g, score, acts, 6, 6, Mode::differentiable);
  EXPECT_TRUE(cam.heatmap.degenerate);
  for (double v : cam.heatmap.values) EXPECT_EQ(v, 0.0);
  expect_unit_heatmap(cam.heatmap);
}

TEST(GradCam, PeakMatchesOcclusionOracle) {
  Encoder enc(toy_config());
  const Image im = blob_image();
  const auto protos = toy_prototypes(enc, im, 3.0);
  const Heatmap h = grad_cam(enc, protos, im, 0);
  expect_unit_heatmap(h);
  const std::size_t peak =
      static_cast<std::size_t>(std::max_element(h.values.begin(), h.values.end()) - h.values.begin());
  const std::size_t peak_patch = (peak / 32 / 8) * 4 + (peak % 32) / 8;

  const double base = score_of(enc, protos, im, 0);
  std::size_t best = 0;
  double best_drop = -1e300;
  for (std::size_t pr = 0; pr < 4; ++pr) {
    for (std::size_t pc = 0; pc < 4; ++pc) {
      Image occ = im;
      for (std::size_t r = pr * 8; r < pr * 8 + 8; ++r)
        for (std::size_t c = pc * 8; c < pc * 8 + 8; ++c) occ.values[r * 32 + c] = 0.0;
      const double drop = base - score_of(enc, protos, occ, 0);
      if (drop > best_drop) {
        best_drop = drop;
        best = pr * 4 + pc;
      }
    }
  }
  EXPECT_EQ(best, 2u * 4 + 1);
  EXPECT_EQ(peak_patch, best);
}

TEST(GradCam, PositiveScoreScalingInvariant) {
  Encoder enc(toy_config());
  const Image im = blob_image();
  const auto protos = toy_prototypes(enc, im, 3.0);
  auto cam_for = [&](double factor) {
    ad::Graph g;
    const auto x = g.constant({1, 32, 32}, im.values);
    const auto out = enc.encode_frozen(g, x);
    const auto p = g.constant({3, 6}, protos.flat());
    const auto s = g.scalar_mul(class_score(g, out.embedding, p, 0), factor);
    return grad_cam(g, s, out.last_conv, 32, 32, Mode::detached).heatmap.values;
  };
  const auto a = cam_for(1.0);
  const auto b = cam_for(37.5);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(GradCam, DetachedCarriesNoGradientDifferentiableDoes) {
  std::vector<double> mask(32 * 32, 0.0);
  for (std::size_t r = 16; r < 24; ++r)
    for (std::size_t c = 8; c < 16; ++c) mask[r * 32 + c] = 1.0;
  const Image im = blob_image();
  for (Mode mode : {Mode::detached, Mode::differentiable}) {
    Encoder enc(toy_config());
    const auto protos = toy_prototypes(enc, im, 3.0);
    ad::Graph g;
    const auto out = enc.encode(g, g.constant({1, 32, 32}, im.values));
    const auto p = g.constant({3, 6}, protos.flat());
    const auto cam = grad_cam(g, class_score(g, out.embedding, p, 0), out.last_conv, 32, 32, mode);
    ASSERT_FALSE(cam.heatmap.degenerate);
    const auto loss = alignment::soft_dice_loss(g, cam.map, mask, 1.0);
    enc.zero_grads();
    g.backward(loss);
    double norm = 0.0;
    for (const ad::Tensor* t : enc.parameters())
      for (double v : t->grad) norm += std::abs(v);
    if (mode == Mode::detached) {
      EXPECT_EQ(norm, 0.0);
    } else {
      EXPECT_GT(std::abs(enc.parameters()[0]->grad[0]) + norm, 0.0);
      double conv = 0.0;
      for (double v : enc.parameters()[2]->grad) conv += std::abs(v);
      EXPECT_GT(conv, 0.0);
    }
  }
}

TEST(GradCam, HeatmapsAreUnitRange) {
  Encoder enc(toy_config());
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Image im{1, 32, 32, std::vector<double>(1024)};
    for (auto& v : im.values) v = u(rng);
    const auto protos = toy_prototypes(enc, im, 0.5 + trial);
    for (std::size_t t = 0; t < 3; ++t) expect_unit_heatmap(grad_cam(enc, protos, im, t));
    expect_unit_heatmap(integrated_gradients(enc, protos, im, 1, 8));
  }
}

TEST(IntegratedGradients, LinearScoreIsExact) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> w(12), x(12);
  for (auto& v : w) v = d(rng);
  for (auto& v : x) v = d(rng);
  const ScoreBuilder linear = [&](ad::Graph& g, ad::NodeId in) {
    return g.sum(g.mul(in, g.constant({3, 4}, w)));
  };
  for (std::size_t steps : {1u, 3u, 64u}) {
    const auto ig = integrated_gradients_signed(linear, {3, 4}, x, steps);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(ig[i], w[i] * x[i], 1e-12 * (1 + std::abs(w[i] * x[i])));
  }
}

TEST(IntegratedGradients, CompletenessWithinOnePercent) {
  Encoder enc(toy_config());
  const Image im = blob_image();
  const auto protos = toy_prototypes(enc, im, 20.0);
  const auto ig = integrated_gradients_signed(enc, protos, im, 0, 64);
  double total = 0.0;
  for (double v : ig) total += v;
  const Image blank{1, 32, 32, std::vector<double>(1024, 0.0)};
  const double delta = score_of(enc, protos, im, 0) - score_of(enc, protos, blank, 0);
  ASSERT_NE(delta, 0.0);
  EXPECT_LE(std::abs(total - delta) / std::abs(delta), 0.01);
}

TEST(IntegratedGradients, StepConvergence) {
  Encoder enc(toy_config());
  const Image im = blob_image();
  const auto protos = toy_prototypes(enc, im, 20.0);
  const auto a = integrated_gradients(enc, protos, im, 0, 128);
  const auto b = integrated_gradients(enc, protos, im, 0, 256);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  EXPECT_LT(worst, 1e-3);
}

TEST(IntegratedGradients, ZeroStepsRejected) {
  Encoder enc(toy_config());
  const Image im = blob_image();
  const auto protos = toy_prototypes(enc, im, 2.0);
  EXPECT_THROW(integrated_gradients(enc, protos, im, 0, 0), ValidationError);
}

TEST(Heatmap, DumpWritesQuantizedPgm) {
  Heatmap h = normalize_minmax({0.0, 1.0, 2.0, 4.0}, 2, 2);
  const auto dir = std::filesystem::temp_directory_path() / "xfsl_heatmaps";
  std::filesystem::create_directories(dir);
  const auto path = dump_heatmap(h, dir, "s01", Method::gradcam);
  EXPECT_EQ(path.filename().string(), "s01.gradcam.pgm");
  const auto grey = pgm::read(path);
  EXPECT_EQ(grey.pixels, (std::vector<std::uint8_t>{0, 64, 128, 255}));
  EXPECT_EQ(dump_heatmap(h, dir, "s01", Method::integrated_gradients).filename().string(),
            "s01.ig.pgm");
}

TEST(Heatmap, FlatMapIsDegenerate) {
  const auto h = normalize_minmax(std::vector<double>(9, 0.4), 3, 3);
  EXPECT_TRUE(h.degenerate);
  for (double v : h.values) EXPECT_EQ(v, 0.0);
}
