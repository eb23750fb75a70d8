#include "xfsl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "xfsl/autodiff.hpp"
#include "xfsl/error.hpp"
#include "xfsl/encoder.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/trainer.hpp"

namespace xfsl::gradcheck {

namespace {

using ad::Graph;
using ad::NodeId;
using ad::Shape;
using Rng = std::mt19937_64;
using Sampler = std::function<std::vector<double>(Rng&, std::size_t)>;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<double> normal(Rng& rng, std::size_t n) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<double> uniform(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Magnitudes in [lo, hi] with random sign: keeps values off a kink at 0.
std::vector<double> off_zero(Rng& rng, std::size_t n, double lo, double hi) {
  auto v = uniform(rng, n, lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : v) x = sign(rng) ? x : -x;
  return v;
}

// Distinct values at least 0.1 apart, so no window max changes under a probe.
std::vector<double> distinct(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  const auto jitter = uniform(rng, n, 0.0, 0.01);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.1 * v[i] + jitter[i];
  return v;
}

void record(CaseResult& r, std::span<const double> analytic, std::span<const double> numeric,
            double tolerance) {
  bool bad = analytic.size() != numeric.size();
  for (std::size_t i = 0; i < std::min(analytic.size(), numeric.size()); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    r.worst_error = std::max(r.worst_error, e);
    if (!(e <= tolerance)) bad = true;
  }
  if (bad) ++r.failures;
}

struct InputSpec {
  Shape shape;
  Sampler sample;
};

using Builder = std::function<NodeId(Graph&, const std::vector<NodeId>&, Rng&)>;

// loss = sum(w * op(inputs)) with a random constant w, differentiated with
// respect to every input and compared against central differences of the
// same graph re-evaluated with perturbed feeds.
void op_trial(CaseResult& r, const std::vector<InputSpec>& specs, const Builder& build, Rng& rng,
              double tolerance) {
  Graph g;
  std::vector<NodeId> inputs;
  for (const auto& s : specs) inputs.push_back(g.input(s.shape, s.sample(rng, ad::numel(s.shape)), true));
  const NodeId y = build(g, inputs, rng);
  const Shape out_shape = g.shape(y);
  const NodeId w = g.constant(out_shape, normal(rng, ad::numel(out_shape)));
  const NodeId loss = g.sum(g.mul(y, w));
  const auto analytic = g.gradients(loss, inputs);

  bool bad = false;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> base = g.value(inputs[k]);
    const auto f = [&](std::span<const double> x) {
      g.evaluate({{inputs[k], std::vector<double>(x.begin(), x.end())}});
      return g.scalar(loss);
    };
    const auto numeric = ad::finite_difference_gradient(f, base, kStep);
    g.evaluate({{inputs[k], base}});
    CaseResult part;
    record(part, analytic[k], numeric, tolerance);
    r.worst_error = std::max(r.worst_error, part.worst_error);
    bad = bad || part.failures > 0;
  }
  if (bad) ++r.failures;
}

CaseResult op_case(const std::string& name, std::size_t trials, std::uint64_t seed,
                   double tolerance, const std::vector<InputSpec>& specs, const Builder& build) {
  CaseResult r{name, trials, 0, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(mix(seed, t));
    op_trial(r, specs, build, rng, tolerance);
  }
  return r;
}

Sampler normal_sampler() { return [](Rng& rng, std::size_t n) { return normal(rng, n); }; }

Builder unary(std::function<NodeId(Graph&, NodeId)> op) {
  return [op](Graph& g, const std::vector<NodeId>& in, Rng&) { return op(g, in[0]); };
}

Builder binary(std::function<NodeId(Graph&, NodeId, NodeId)> op) {
  return [op](Graph& g, const std::vector<NodeId>& in, Rng&) { return op(g, in[0], in[1]); };
}

// stop_gradient: the stopped branch must contribute exactly nothing, so the
// gradient of sum(w x) + sum(v sg(x)) is compared with central differences
// of sum(w x) alone.
CaseResult stop_gradient_case(std::size_t trials, std::uint64_t seed, double tolerance) {
  CaseResult r{"stop_gradient", trials, 0, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(mix(seed, t));
    const auto x0 = normal(rng, 6);
    const auto w = normal(rng, 6);
    const auto v = normal(rng, 6);
    Graph g;
    const NodeId x = g.input({2, 3}, x0, true);
    const NodeId loss = g.add(g.sum(g.mul(x, g.constant({2, 3}, w))),
                              g.sum(g.mul(g.stop_gradient(x), g.constant({2, 3}, v))));
    const auto analytic = g.gradients(loss, std::vector<NodeId>{x});
    Graph h;
    const NodeId hx = h.input({2, 3}, x0, true);
    const NodeId hloss = h.sum(h.mul(hx, h.constant({2, 3}, w)));
    const auto f = [&](std::span<const double> p) {
      h.evaluate({{hx, std::vector<double>(p.begin(), p.end())}});
      return h.scalar(hloss);
    };
    record(r, analytic[0], ad::finite_difference_gradient(f, x0, kStep), tolerance);
  }
  return r;
}

EncoderConfig micro_encoder(std::uint64_t seed) {
  EncoderConfig c;
  c.channels = 1;
  c.height = 8;
  c.width = 8;
  c.blocks = {{4, 3, 1, 2}, {6, 3, 1, 2}};
  c.embedding_dim = 5;
  c.seed = seed;
  return c;
}

// Perturbs each parameter in place and re-evaluates the recorded graph, so
// any value the graph holds as a constant (Grad-CAM channel weights and
// normalization bounds) stays fixed, matching what backward differentiates.
// The network is piecewise smooth; coordinates whose one-sided slopes
// disagree have a kink inside [x - h, x + h], where the central difference
// is not a derivative estimate, and are counted instead of compared.
void parameter_trial(CaseResult& r, Graph& g, NodeId loss, Encoder& encoder, double tolerance) {
  encoder.zero_grads();
  g.backward(loss);
  const double f0 = g.scalar(loss);
  bool bad = false;
  for (ad::Tensor* p : encoder.parameters()) {
    const std::vector<double> analytic = p->grad;
    const std::vector<double> base = p->values;
    for (std::size_t i = 0; i < base.size(); ++i) {
      p->values[i] = base[i] + kStep;
      g.evaluate();
      const double up = g.scalar(loss);
      p->values[i] = base[i] - kStep;
      g.evaluate();
      const double down = g.scalar(loss);
      p->values[i] = base[i];
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("gradcheck: non-finite loss at coordinate " + std::to_string(i));
      }
      const double forward = (up - f0) / kStep;
      const double backward = (f0 - down) / kStep;
      const double scale = std::max({std::abs(forward), std::abs(backward), kFloor});
      if (std::abs(forward - backward) > kKinkRatio * scale) {
        ++r.kinks_skipped;
        continue;
      }
      const double e = relative_error(analytic[i], (up - down) / (2.0 * kStep));
      r.worst_error = std::max(r.worst_error, e);
      if (!(e <= tolerance)) bad = true;
    }
  }
  g.evaluate();
  if (bad) ++r.failures;
}

CaseResult encoder_case(std::size_t trials, std::uint64_t seed, double tolerance) {
  CaseResult r{"encoder_embedding_norm", trials, 0, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(mix(seed, t));
    Encoder encoder(micro_encoder(mix(seed, t + 1000)));
    // Nonzero biases so the zero-initialized path is not the only one tested.
    for (ad::Tensor* p : encoder.parameters()) {
      if (p->shape.size() == 1) p->values = uniform(rng, p->size(), -0.1, 0.1);
    }
    Graph g;
    const NodeId x = g.constant({1, 8, 8}, uniform(rng, 64, 0.0, 1.0));
    const auto out = encoder.encode(g, x);
    const NodeId loss = g.sum(g.mul(out.embedding, out.embedding));
    parameter_trial(r, g, loss, encoder, tolerance);
  }
  return r;
}

Sample micro_sample(Rng& rng, const std::string& id, std::size_t label) {
  Sample s;
  s.id = id;
  s.label = label;
  s.image = Image{1, 8, 8, uniform(rng, 64, 0.0, 1.0)};
  s.mask.assign(64, 0.0);
  std::uniform_int_distribution<int> corner(0, 4);
  const int r0 = corner(rng);
  const int c0 = corner(rng);
  for (int r = r0; r < r0 + 3; ++r) {
    for (int c = c0; c < c0 + 3; ++c) s.mask[static_cast<std::size_t>(r * 8 + c)] = 1.0;
  }
  return s;
}

CaseResult episode_case(const std::string& name, train::Mode mode, double alpha,
                        std::size_t trials, std::uint64_t seed, double tolerance) {
  CaseResult r{name, trials, 0, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(mix(seed, t));
    Encoder encoder(micro_encoder(mix(seed, t + 2000)));
    for (ad::Tensor* p : encoder.parameters()) {
      if (p->shape.size() == 1) p->values = uniform(rng, p->size(), -0.1, 0.1);
    }
    fewshot::Episode ep;
    ep.n_way = 2;
    ep.k_shot = 1;
    ep.q_per_class = 1;
    ep.classes = {0, 1};
    for (std::size_t k = 0; k < 2; ++k) {
      ep.support.push_back(micro_sample(rng, "s" + std::to_string(k), k));
      ep.query.push_back(micro_sample(rng, "q" + std::to_string(k), k));
    }
    train::TrainConfig config;
    config.mode = mode;
    config.alpha = alpha;
    config.n_way = 2;
    config.k_shot = 1;
    config.q_per_class = 1;
    Graph g;
    const auto loss = train::episode_total_loss(g, encoder, ep, config, mix(seed, t + 3000));
    parameter_trial(r, g, loss.total, encoder, tolerance);
  }
  return r;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kFloor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const auto& c : run_all(0, 0, 0.0)) names.push_back(c.name);
  return names;
}

std::vector<CaseResult> run_all(std::size_t trials, std::uint64_t seed, double tolerance) {
  const auto n = normal_sampler();
  const Sampler positive = [](Rng& rng, std::size_t k) { return uniform(rng, k, 0.5, 2.0); };
  const Sampler away = [](Rng& rng, std::size_t k) { return off_zero(rng, k, 0.1, 2.0); };
  const Sampler pool = [](Rng& rng, std::size_t k) { return distinct(rng, k); };
  std::vector<CaseResult> out;
  std::uint64_t salt = 0;
  auto add = [&](const std::string& name, std::vector<InputSpec> specs, Builder build) {
    out.push_back(op_case(name, trials, mix(seed, ++salt), tolerance, specs, build));
  };

  add("add", {{{2, 3}, n}, {{2, 3}, n}}, binary([](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }));
  add("sub", {{{2, 3}, n}, {{2, 3}, n}}, binary([](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }));
  add("mul", {{{2, 3}, n}, {{2, 3}, n}}, binary([](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }));
  add("div", {{{2, 3}, n}, {{2, 3}, away}},
      binary([](Graph& g, NodeId a, NodeId b) { return g.div(a, b); }));
  add("scalar_mul", {{{4}, n}}, unary([](Graph& g, NodeId x) { return g.scalar_mul(x, -1.7); }));
  add("add_scalar", {{{4}, n}}, unary([](Graph& g, NodeId x) { return g.add_scalar(x, 0.3); }));
  add("relu", {{{2, 4}, away}}, unary([](Graph& g, NodeId x) { return g.relu(x); }));
  add("log", {{{5}, positive}}, unary([](Graph& g, NodeId x) { return g.log(x); }));
  add("clamp_min", {{{6}, away}}, unary([](Graph& g, NodeId x) { return g.clamp_min(x, 0.0); }));
  out.push_back(stop_gradient_case(trials, mix(seed, ++salt), tolerance));
  add("matmul", {{{3, 4}, n}, {{4, 2}, n}},
      binary([](Graph& g, NodeId a, NodeId b) { return g.matmul(a, b); }));
  add("conv2d_pad1_bias", {{{2, 5, 5}, n}, {{3, 2, 3, 3}, n}, {{3}, n}},
      [](Graph& g, const std::vector<NodeId>& in, Rng&) {
        return g.conv2d(in[0], in[1], in[2], {1, 1});
      });
  add("conv2d_stride2", {{{2, 6, 6}, n}, {{2, 2, 3, 3}, n}},
      [](Graph& g, const std::vector<NodeId>& in, Rng&) {
        return g.conv2d(in[0], in[1], std::nullopt, {2, 0});
      });
  add("maxpool2d", {{{2, 4, 4}, pool}}, unary([](Graph& g, NodeId x) { return g.maxpool2d(x, 2, 2); }));
  add("maxpool2d_overlap", {{{1, 5, 5}, pool}},
      unary([](Graph& g, NodeId x) { return g.maxpool2d(x, 3, 2); }));
  add("global_avg_pool", {{{3, 4, 4}, n}}, unary([](Graph& g, NodeId x) { return g.global_avg_pool(x); }));
  add("dense_affine", {{{4}, n}, {{3, 4}, n}, {{3}, n}},
      [](Graph& g, const std::vector<NodeId>& in, Rng&) {
        return g.dense_affine(in[0], in[1], in[2]);
      });
  add("softmax", {{{5}, n}}, unary([](Graph& g, NodeId x) { return g.softmax(x); }));
  add("neg_sq_euclidean", {{{4}, n}, {{3, 4}, n}},
      binary([](Graph& g, NodeId q, NodeId p) { return g.neg_sq_euclidean(q, p); }));
  add("sum", {{{2, 3}, n}}, unary([](Graph& g, NodeId x) { return g.sum(x); }));
  add("mean", {{{2, 3}, n}}, unary([](Graph& g, NodeId x) { return g.mean(x); }));
  add("bilinear_upsample_2d", {{{3, 3}, n}},
      unary([](Graph& g, NodeId x) { return g.bilinear_upsample(x, 8, 8); }));
  add("bilinear_upsample_3d", {{{2, 2, 3}, n}},
      unary([](Graph& g, NodeId x) { return g.bilinear_upsample(x, 5, 7); }));
  add("reshape", {{{2, 3}, n}}, unary([](Graph& g, NodeId x) { return g.reshape(x, {3, 2}); }));
  add("stack", {{{2, 2}, n}, {{2, 2}, n}, {{2, 2}, n}},
      [](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.stack(in); });
  add("index", {{{5}, n}}, unary([](Graph& g, NodeId x) { return g.index(x, 3); }));
  add("gather", {{{6}, n}}, [](Graph& g, const std::vector<NodeId>& in, Rng& rng) {
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    return g.gather(in[0], perm);
  });

  out.push_back(encoder_case(trials, mix(seed, ++salt), tolerance));
  out.push_back(episode_case("episode_guided_alpha0.1", train::Mode::guided, 0.10, trials,
                             mix(seed, ++salt), tolerance));
  out.push_back(episode_case("episode_guided_alpha1", train::Mode::guided, 1.0, trials,
                             mix(seed, ++salt), tolerance));
  out.push_back(episode_case("episode_random_cam_alpha1", train::Mode::random_cam_control, 1.0,
                             trials, mix(seed, ++salt), tolerance));
  return out;
}

}  // namespace xfsl::gradcheck
