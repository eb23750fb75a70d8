// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 when
// any criterion fails. Criteria can be selected by number on the command
// line (e.g. `acceptance 1 3 8`); the default runs all ten.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xfsl/active.hpp"
#include "xfsl/alignment.hpp"
#include "xfsl/attribution.hpp"
#include "xfsl/error.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/gradcheck.hpp"
#include "xfsl/metrics.hpp"
#include "xfsl/pgm.hpp"
#include "xfsl/synthdata.hpp"
#include "xfsl/trainer.hpp"

using namespace xfsl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed checks so one criterion can report everything it saw.
struct Checks {
  std::vector<std::string> failures;
  std::size_t count = 0;

  void expect(bool ok, const std::string& what) {
    ++count;
    if (!ok) failures.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream os;
    os.precision(17);
    os << what << ": got " << got << ", want " << want << " +- " << tol;
    expect(std::abs(got - want) <= tol, os.str());
  }
  void exact(double got, double want, const std::string& what) { near(got, want, 0.0, what); }
  template <class Ex, class F>
  void throws(F&& f, const std::string& what) {
    try {
      f();
    } catch (const Ex&) {
      ++count;
      return;
    } catch (const std::exception& e) {
      expect(false, what + ": wrong exception: " + e.what());
      return;
    }
    expect(false, what + ": no exception");
  }
  Outcome outcome() const {
    Outcome o;
    o.pass = failures.empty();
    o.detail = std::to_string(count - failures.size()) + "/" + std::to_string(count) + " checks";
    for (std::size_t i = 0; i < failures.size() && i < 5; ++i) o.detail += "; " + failures[i];
    return o;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

// ---------------------------------------------------------------------------
// Benchmark shared by criteria 5-7.

constexpr std::size_t kSeeds = 5;
constexpr double kAlpha = 0.10;
// Training schedule for the comparative runs.
constexpr std::size_t kEpochs = 15;
constexpr std::size_t kEpisodes = 40;

struct Benchmark {
  std::vector<Sample> pool;
  std::vector<Sample> test;
};

const Benchmark& benchmark() {
  static const Benchmark b = [] {
    synth::SynthConfig c;  // 200 per class pool at spurious rate 0.95
    c.train_per_class = 200;
    c.test_per_class = 100;
    c.confounded_test = false;
    c.seed = 0;
    Benchmark out;
    for (auto& s : synth::synthesize(c)) {
      (s.split == synth::Split::train_pool ? out.pool : out.test).push_back(std::move(s.sample));
    }
    return out;
  }();
  return b;
}

EncoderConfig bench_encoder(std::uint64_t seed) {
  EncoderConfig e;  // default 3-block encoder on 1x64x64
  e.seed = seed;
  return e;
}

train::TrainConfig bench_train(train::Mode mode, std::uint64_t seed) {
  train::TrainConfig t;
  t.mode = mode;
  t.alpha = kAlpha;
  t.n_way = 3;
  t.k_shot = 5;
  t.q_per_class = 5;
  t.epochs = kEpochs;
  t.episodes_per_epoch = kEpisodes;
  t.seed = seed;
  return t;
}

struct ModeRuns {
  std::vector<double> accuracy, iou;
};

// Trains and evaluates one mode over all seeds; cached because criteria 5
// and 6 share the guided runs.
const ModeRuns& mode_runs(train::Mode mode) {
  static std::map<train::Mode, ModeRuns> cache;
  auto it = cache.find(mode);
  if (it != cache.end()) return it->second;
  const Benchmark& b = benchmark();
  ModeRuns runs;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Encoder enc(bench_encoder(seed));
    const auto cfg = bench_train(mode, seed);
    const auto trace = train::train(enc, b.pool, cfg);
    const auto report = train::evaluate(enc, b.pool, b.test, cfg);
    runs.accuracy.push_back(report.accuracy);
    runs.iou.push_back(report.mean_cam_mask_iou);
    std::printf("  [%s seed %llu] l_exp %.4f -> %.4f, acc %.4f, iou %.4f\n", train::to_string(mode),
                static_cast<unsigned long long>(seed), trace.epochs.front().l_exp,
                trace.epochs.back().l_exp, report.accuracy, report.mean_cam_mask_iou);
    std::fflush(stdout);
  }
  return cache.emplace(mode, runs).first->second;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  const auto results = gradcheck::run_all(20, 20240601, 1e-4);
  Outcome o;
  double worst = 0.0;
  std::size_t skipped = 0;
  std::string failed;
  for (const auto& r : results) {
    worst = std::max(worst, r.worst_error);
    skipped += r.kinks_skipped;
    if (!r.passed()) {
      o.pass = false;
      failed += " " + r.name;
    }
  }
  o.detail = std::to_string(results.size()) + " cases x 20 trials, worst relative error " +
             fmt(worst, 8) + ", " + std::to_string(skipped) +
             " parameter coordinates skipped at kinks" + (failed.empty() ? "" : ", failed:" + failed);
  return o;
}

Outcome criterion2() {
  Checks c;
  // Prototypes are class means of support embeddings.
  {
    const std::vector<std::vector<double>> emb{{1.5, -2.0}, {0.25, 3.0}};
    const std::vector<std::size_t> labels{0, 1};
    const std::vector<std::string> ids{"a", "b"};
    const auto p = fewshot::compute_prototypes(emb, labels, ids, 2);
    c.expect(p.prototypes[0] == emb[0] && p.prototypes[1] == emb[1], "prototype single shot");
    const std::vector<std::vector<double>> two{{1.0, 0.0}, {0.0, 1.0}};
    const std::vector<std::size_t> same{0, 0};
    const auto m = fewshot::compute_prototypes(two, same, ids, 1);
    c.expect(m.prototypes[0] == std::vector<double>{0.5, 0.5}, "prototype mean");
  }
  // Distance softmax.
  {
    fewshot::PrototypeSet p{{{1.0, 0.0}, {-1.0, 0.0}, {0.0, 1.0}, {0.0, -1.0}}};
    const std::vector<double> origin{0.0, 0.0};
    for (double v : fewshot::classify_query(origin, p)) c.near(v, 0.25, 1e-15, "classify uniform");
    fewshot::PrototypeSet far{{{0.0, 0.0}, {10.0, 0.0}}};
    c.near(fewshot::classify_query(origin, far)[0], 1.0 / (1.0 + std::exp(-100.0)), 1e-15,
           "classify dominance");
    fewshot::PrototypeSet line{{{0.0}, {2.0}}};
    const std::vector<double> q{0.5};
    const auto probs = fewshot::classify_query(q, line);
    const double z = std::exp(-0.25) + std::exp(-2.25);
    c.near(probs[0], std::exp(-0.25) / z, 1e-6, "classify hand-evaluated p0");
    c.near(probs[1], std::exp(-2.25) / z, 1e-6, "classify hand-evaluated p1");
  }
  // Negative log-probability of the true class.
  {
    c.exact(fewshot::proto_loss(std::vector<double>{1.0, 0.0}, 0), 0.0, "proto loss certain");
    const std::vector<double> uniform{1.0 / 3, 1.0 / 3, 1.0 / 3};
    c.near(fewshot::proto_loss(uniform, 2), std::log(3.0), 1e-6, "proto loss uniform");
    const double z = std::exp(-0.25) + std::exp(-2.25);
    const std::vector<double> hand{std::exp(-0.25) / z, std::exp(-2.25) / z};
    c.near(fewshot::proto_loss(hand, 1), 2.0 + std::log1p(std::exp(-2.0)), 1e-6, "proto loss hand");
  }
  // Smoothed Dice loss.
  {
    std::vector<double> m(400, 0.0), g(400, 0.0);
    for (std::size_t i = 0; i < 100; ++i) m[2 * i] = 1.0;
    c.exact(alignment::soft_dice_loss(m, m, 1.0), 0.0, "soft dice perfect");
    c.near(alignment::soft_dice_loss(g, m, 1.0), 1.0 - 1.0 / 101.0, 1e-6, "soft dice empty prediction");
    for (std::size_t i = 0; i < 100; ++i) g[2 * i] = 0.5;
    c.near(alignment::soft_dice_loss(g, m, 1.0), 1.0 - 101.0 / 151.0, 1e-6, "soft dice half intensity");
  }
  // Total loss on a micro-episode.
  {
    synth::SynthConfig sc;
    sc.train_per_class = 4;
    sc.test_per_class = 1;
    sc.confounded_test = false;
    sc.image_size = 32;
    sc.radius_min = 3;
    sc.radius_max = 6;
    sc.tag_size = 4;
    std::vector<Sample> pool;
    for (auto& s : synth::synthesize(sc))
      if (s.split == synth::Split::train_pool) pool.push_back(s.sample);
    EncoderConfig ec;
    ec.height = ec.width = 32;
    ec.blocks = {{4, 3, 1, 2}, {6, 3, 1, 2}};
    ec.embedding_dim = 5;
    Encoder enc(ec);
    const auto ep = fewshot::sample_episode(pool, 2, 1, 1, 3);
    train::TrainConfig tc;
    tc.n_way = 2;
    tc.alpha = 0.0;
    ad::Graph g0;
    const auto l0 = train::episode_total_loss(g0, enc, ep, tc).values;
    c.exact(l0.l_total, l0.l_proto, "total loss alpha 0");
    tc.alpha = 0.1;
    ad::Graph g1;
    const auto l1 = train::episode_total_loss(g1, enc, ep, tc).values;
    c.near(l1.l_total, l1.l_proto + 0.1 * l1.l_exp, 1e-12, "total loss weighted sum");
    c.near(l1.l_total - l0.l_total, 0.1 * l0.l_exp, 1e-12, "total loss linear in alpha");
    c.near(1.0 + 0.1 * 0.5, 1.05, 1e-12, "total loss arithmetic");
  }
  // Entropy in nats.
  {
    const std::vector<double> uniform{1.0 / 3, 1.0 / 3, 1.0 / 3};
    c.near(active::entropy(uniform), std::log(3.0), 1e-12, "entropy uniform");
    c.exact(active::entropy(std::vector<double>{0.0, 1.0, 0.0}), 0.0, "entropy one-hot");
    c.near(active::entropy(std::vector<double>{0.7, 0.2, 0.1}), 0.801819, 1e-6, "entropy hand");
  }
  // Hard Dice complement.
  {
    std::vector<double> m(400, 0.0), g(400, 0.0), far(400, 0.0);
    for (std::size_t i = 0; i < 100; ++i) {
      m[i + 50] = 1.0;
      g[i] = 1.0;
    }
    far[399] = 1.0;
    c.exact(active::d_exp(m, m), 0.0, "d_exp equal");
    c.exact(active::d_exp(far, m), 1.0, "d_exp disjoint");
    c.exact(active::d_exp(g, m), 0.5, "d_exp half overlap");
  }
  // Acquisition score.
  {
    c.exact(active::acquisition_score(0.8, 0.4, 1.0), 0.8, "score lambda 1");
    c.exact(active::acquisition_score(0.8, 0.4, 0.0), 0.4, "score lambda 0");
    c.near(active::acquisition_score(0.8, 0.4, 0.5), 0.6, 1e-12, "score arithmetic");
  }
  return c.outcome();
}

Outcome criterion3() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> size(1, 500);
  std::size_t sets = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = size(rng);
    std::uniform_int_distribution<int> level(0, trial % 2 ? 5 : 1000000);
    std::vector<active::AcquisitionRecord> records(n);
    std::set<double> distinct;
    for (std::size_t i = 0; i < n; ++i) {
      records[i].sample_id = "id" + std::to_string(rng() % 1000000) + "_" + std::to_string(i);
      records[i].score = level(rng) / 7.0;
      distinct.insert(records[i].score);
    }
    ties += distinct.size() < n;
    // k strata: empty, single, interior, whole pool, beyond the pool.
    const std::size_t strata[] = {0, 1, n > 2 ? 1 + rng() % (n - 1) : n, n, n + 1 + rng() % 10};
    const std::size_t k = strata[trial % 5];
    auto oracle = records;
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return a.score != b.score ? a.score > b.score : a.sample_id < b.sample_id;
    });
    std::vector<std::string> want;
    for (std::size_t i = 0; i < std::min(k, n); ++i) want.push_back(oracle[i].sample_id);
    if (active::select_top_k(records, k) != want) {
      return {false, "mismatch at trial " + std::to_string(trial) + " (n " + std::to_string(n) +
                         ", k " + std::to_string(k) + ")"};
    }
    ++sets;
  }
  return {true, std::to_string(sets) + " record sets matched, " + std::to_string(ties) +
                    " with duplicated scores"};
}

Outcome criterion4() {
  synth::SynthConfig sc;
  sc.train_per_class = 20;
  sc.test_per_class = 6;
  sc.confounded_test = false;
  sc.image_size = 32;
  sc.radius_min = 3;
  sc.radius_max = 6;
  sc.tag_size = 4;
  std::vector<Sample> pool, test;
  for (auto& s : synth::synthesize(sc))
    (s.split == synth::Split::train_pool ? pool : test).push_back(s.sample);

  EncoderConfig ec;
  ec.height = ec.width = 32;
  ec.blocks = {{8, 3, 1, 2}, {16, 3, 1, 2}};
  ec.embedding_dim = 16;
  train::TrainConfig tc;
  tc.k_shot = 2;
  tc.q_per_class = 2;
  tc.epochs = 2;
  tc.episodes_per_epoch = 5;

  std::size_t rounds_compared = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ec.seed = seed;
    tc.seed = seed;
    active::ALConfig al;
    al.init_labeled = 18;
    al.rounds = 3;
    al.batch_k = 6;
    al.finetune_epochs = 1;
    al.finetune_episodes = 5;
    al.seed = seed;
    const auto run = [&](active::Strategy s, double lambda) {
      al.strategy = s;
      al.lambda = lambda;
      return active::run_al(pool, test, al, tc, ec);
    };
    const std::pair<std::pair<active::Strategy, double>, std::pair<active::Strategy, double>>
        pairs[] = {{{active::Strategy::xgal, 1.0}, {active::Strategy::entropy_only, 0.5}},
                   {{active::Strategy::xgal, 0.0}, {active::Strategy::dice_only, 0.5}}};
    for (const auto& [a, b] : pairs) {
      const auto ra = run(a.first, a.second);
      const auto rb = run(b.first, b.second);
      if (ra.audits.size() != rb.audits.size()) return {false, "round count differs"};
      for (std::size_t r = 0; r < ra.audits.size(); ++r) {
        if (ra.audits[r].selected != rb.audits[r].selected) {
          return {false, std::string("selection differs: ") + active::to_string(b.first) +
                             " seed " + std::to_string(seed) + " round " + std::to_string(r + 1)};
        }
        ++rounds_compared;
      }
    }
  }
  return {true, std::to_string(rounds_compared) + " rounds identical over 5 seeds"};
}

Outcome criterion5() {
  const auto& guided = mode_runs(train::Mode::guided);
  const auto& base = mode_runs(train::Mode::baseline);
  const double d_acc = mean(guided.accuracy) - mean(base.accuracy);
  const double d_iou = mean(guided.iou) - mean(base.iou);
  Outcome o;
  o.pass = d_acc >= 0.10 && d_iou >= 0.10;
  o.detail = "guided acc " + list(guided.accuracy) + " iou " + list(guided.iou) + "; baseline acc " +
             list(base.accuracy) + " iou " + list(base.iou) + "; mean acc gain " + fmt(d_acc) +
             " (need >= 0.10), mean iou gain " + fmt(d_iou) + " (need >= 0.10)";
  return o;
}

Outcome criterion6() {
  const auto& guided = mode_runs(train::Mode::guided);
  const auto& control = mode_runs(train::Mode::random_cam_control);
  const double gap = mean(guided.iou) - mean(control.iou);
  Outcome o;
  o.pass = gap >= 0.10;
  o.detail = "random-cam iou " + list(control.iou) + " acc " + list(control.accuracy) +
             "; guided mean iou " + fmt(mean(guided.iou)) + " minus control " +
             fmt(mean(control.iou)) + " = " + fmt(gap) + " (need >= 0.10)";
  return o;
}

Outcome criterion7() {
  const Benchmark& b = benchmark();
  std::map<active::Strategy, ModeRuns> finals;
  for (auto strategy : {active::Strategy::xgal, active::Strategy::random}) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      active::ALConfig al;
      al.strategy = strategy;
      al.lambda = 0.5;
      al.init_labeled = 40;
      al.rounds = 3;
      al.batch_k = 24;
      al.seed = seed;
      const auto tc = bench_train(train::Mode::guided, seed);
      const auto r = active::run_al(b.pool, b.test, al, tc, bench_encoder(seed));
      finals[strategy].accuracy.push_back(r.reports.back().accuracy);
      finals[strategy].iou.push_back(r.reports.back().mean_cam_mask_iou);
      std::printf("  [al %s seed %llu] acc %.4f -> %.4f, iou %.4f -> %.4f\n",
                  active::to_string(strategy), static_cast<unsigned long long>(seed),
                  r.reports.front().accuracy, r.reports.back().accuracy,
                  r.reports.front().mean_cam_mask_iou, r.reports.back().mean_cam_mask_iou);
      std::fflush(stdout);
    }
  }
  const auto& x = finals[active::Strategy::xgal];
  const auto& r = finals[active::Strategy::random];
  const double d_acc = mean(x.accuracy) - mean(r.accuracy);
  const double d_iou = mean(x.iou) - mean(r.iou);
  Outcome o;
  o.pass = d_acc >= 0.05 && d_iou > 0.0;
  o.detail = "xgal acc " + list(x.accuracy) + " iou " + list(x.iou) + "; random acc " +
             list(r.accuracy) + " iou " + list(r.iou) + "; mean acc gain " + fmt(d_acc) +
             " (need >= 0.05), mean iou gain " + fmt(d_iou) + " (need > 0)";
  return o;
}

Outcome criterion8() {
  Checks c;
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> size(2, 30), level(0, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<char> pos(static_cast<std::size_t>(n));
    for (auto& v : s) v = level(rng) / 5.0;
    for (auto& p : pos) p = static_cast<char>(rng() % 2);
    pos[0] = 1;
    pos[1] = 0;
    double wins = 0.0, pairs = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!pos[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < n; ++j) {
        if (pos[static_cast<std::size_t>(j)]) continue;
        pairs += 1.0;
        const double a = s[static_cast<std::size_t>(i)], b = s[static_cast<std::size_t>(j)];
        wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
      }
    }
    const double got = metrics::auc(s, pos);
    worst = std::max(worst, std::abs(got - wins / pairs));
    c.near(got, wins / pairs, 1e-12, "auc trial " + std::to_string(trial));
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double density = 0.6 * u(rng), t = trial % 4 == 0 ? 0.5 : u(rng);
    std::vector<double> g(100), m(100);
    for (auto& v : g) v = u(rng) < density ? u(rng) : 0.0;
    for (auto& v : m) v = u(rng) < density ? 1.0 : 0.0;
    std::set<std::size_t> a, b;
    for (std::size_t i = 0; i < 100; ++i) {
      if (g[i] >= t) a.insert(i);
      if (m[i] > 0.5) b.insert(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
    const bool empty = a.empty() && b.empty();
    const double dice = empty ? 1.0 : 2.0 * static_cast<double>(inter.size()) /
                                          static_cast<double>(a.size() + b.size());
    const double iou = empty ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    c.exact(alignment::hard_dice(g, m, t), dice, "dice trial " + std::to_string(trial));
    c.exact(alignment::binary_iou(g, m, t), iou, "iou trial " + std::to_string(trial));
  }
  auto o = c.outcome();
  o.detail += ", worst auc deviation " + fmt(worst, 15);
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

Outcome criterion9() {
  Checks c;
  const fs::path root = fs::temp_directory_path() / "xfsl_acceptance_c9";
  fs::remove_all(root);
  synth::SynthConfig sc;
  sc.train_per_class = 20;
  sc.test_per_class = 10;
  sc.seed = 9;
  EncoderConfig ec;
  ec.seed = 9;
  train::TrainConfig tc;
  tc.epochs = 1;
  tc.episodes_per_epoch = 3;
  tc.seed = 9;

  std::vector<std::string> reports;
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    synth::generate(sc, dir / "data");
    const auto manifest = synth::load_manifest(dir / "data" / "manifest.jsonl");
    const auto pool = synth::load_split(manifest, synth::Split::train_pool);
    const auto test = synth::load_split(manifest, synth::Split::test_deconfounded);
    Encoder enc(ec);
    train::train(enc, pool, tc);
    enc.save_checkpoint(dir / "checkpoint.bin");
    Encoder reloaded(ec);
    reloaded.load_checkpoint(dir / "checkpoint.bin");
    c.expect(reloaded.flatten() == enc.flatten(), std::string("checkpoint reload ") + run);
    reports.push_back(train::report_to_json(train::evaluate(reloaded, pool, test, tc)));
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = root / "b" / fs::relative(e.path(), root / "a");
    c.expect(slurp(e.path()) == slurp(other), "byte mismatch " + fs::relative(e.path(), root).string());
  }
  c.expect(reports[0] == reports[1], "reports differ");

  // Malformed-input corpus.
  const fs::path bad = root / "bad";
  fs::create_directories(bad);
  const std::string good_pgm = "P5\n2 2\n255\n\x01\x02\x03\x04";
  spit(bad / "truncated.pgm", good_pgm.substr(0, good_pgm.size() - 1));
  spit(bad / "header_cut.pgm", "P5\n2 2\n");
  spit(bad / "maxval.pgm", "P5\n2 2\n65535\n\x01\x02\x03\x04\x05\x06\x07\x08");
  spit(bad / "magic.pgm", "P2\n2 2\n255\n1 2 3 4\n");
  for (const char* name : {"truncated.pgm", "header_cut.pgm", "maxval.pgm", "magic.pgm"}) {
    c.throws<ParseError>([&] { pgm::read(bad / name); }, name);
  }
  auto manifest = synth::load_manifest(root / "a" / "data" / "manifest.jsonl");
  manifest.entries[6].id = manifest.entries[1].id;
  synth::write_manifest(manifest, root / "a" / "data" / "dup.jsonl");
  try {
    synth::load_manifest(root / "a" / "data" / "dup.jsonl");
    c.expect(false, "duplicate id accepted");
  } catch (const ParseError& e) {
    c.expect(e.offset() == 7, "duplicate id line " + std::to_string(e.offset()));
  }
  c.throws<ParseError>(
      [&] {
        auto m = synth::load_manifest(root / "a" / "data" / "manifest.jsonl");
        m.entries[0].label = 7;
        synth::write_manifest(m, root / "a" / "data" / "label.jsonl");
        synth::load_manifest(root / "a" / "data" / "label.jsonl");
      },
      "label out of range");
  fs::remove_all(root);
  auto o = c.outcome();
  o.detail += ", " + std::to_string(files) + " files compared";
  return o;
}

Outcome criterion10() {
  Checks c;
  // Linear score: IG equals w_i x_i exactly for any step count.
  std::mt19937_64 rng(10);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> w(48), x(48);
  for (auto& v : w) v = d(rng);
  for (auto& v : x) v = d(rng);
  const attribution::ScoreBuilder linear = [&](ad::Graph& g, ad::NodeId in) {
    return g.sum(g.mul(g.constant({3, 4, 4}, w), in));
  };
  for (std::size_t steps : {1u, 7u, 64u}) {
    const auto ig = attribution::integrated_gradients_signed(linear, {3, 4, 4}, x, steps);
    for (std::size_t i = 0; i < x.size(); ++i) c.near(ig[i], w[i] * x[i], 1e-12, "linear IG");
  }

  // Completeness on the toy model.
  EncoderConfig ec;
  ec.height = ec.width = 32;
  ec.blocks = {{6, 3, 1, 2}, {8, 3, 1, 2}};
  ec.embedding_dim = 6;
  ec.seed = 11;
  const Encoder enc(ec);
  Image im{1, 32, 32, std::vector<double>(1024, 0.0)};
  for (std::size_t r = 18; r < 22; ++r)
    for (std::size_t col = 10; col < 14; ++col) im.values[r * 32 + col] = 1.0;
  const Image blank{1, 32, 32, std::vector<double>(1024, 0.0)};
  const auto emb = train::embed(enc, im);
  const auto base = train::embed(enc, blank);
  fewshot::PrototypeSet protos;
  std::vector<double> c0(emb.size());
  for (std::size_t j = 0; j < emb.size(); ++j) c0[j] = base[j] + 20.0 * (emb[j] - base[j]);
  protos.prototypes.push_back(c0);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> other(emb.size());
    for (auto& v : other) v = d(rng);
    protos.prototypes.push_back(other);
  }
  const auto score = [&](const Image& image) {
    const auto e = train::embed(enc, image);
    double s = 0.0;
    for (std::size_t j = 0; j < e.size(); ++j) s -= (e[j] - c0[j]) * (e[j] - c0[j]);
    return s;
  };
  const auto ig = attribution::integrated_gradients_signed(enc, protos, im, 0, 64);
  const double total = std::accumulate(ig.begin(), ig.end(), 0.0);
  const double delta = score(im) - score(blank);
  const double rel = std::abs(total - delta) / std::abs(delta);
  c.expect(rel <= 0.01, "completeness relative error " + fmt(rel, 6));
  auto o = c.outcome();
  o.detail += ", completeness relative error " + fmt(rel, 6) + " (need <= 0.01)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<std::size_t> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted.empty() && !wanted.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %zu: %s (%.1fs) %s\n", i + 1, o.pass ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
