#include "xfsl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>

#include "xfsl/alignment.hpp"
#include "xfsl/attribution.hpp"
#include "xfsl/error.hpp"
#include "xfsl/metrics.hpp"
#include "xfsl/parallel.hpp"

namespace xfsl::train {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kSupportSalt = 0x5eed5a11ULL;
constexpr std::uint64_t kPermSalt = 0x9e4d0ULL;

ad::NodeId mean_of(ad::Graph& g, const std::vector<ad::NodeId>& terms) {
  ad::NodeId acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
  return g.scalar_mul(acc, 1.0 / static_cast<double>(terms.size()));
}

ad::NodeId image_node(ad::Graph& g, const Image& im) {
  return g.constant({im.channels, im.height, im.width}, im.values);
}

}  // namespace

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::baseline: return "baseline";
    case Mode::guided: return "guided";
    case Mode::random_cam_control: return "random-cam";
  }
  return "unknown";
}

Mode mode_from_string(const std::string& name) {
  if (name == "baseline") return Mode::baseline;
  if (name == "guided") return Mode::guided;
  if (name == "random-cam" || name == "random_cam" || name == "random_cam_control") {
    return Mode::random_cam_control;
  }
  throw ValidationError("unknown training mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("train: alpha must be >= 0");
  if (n_way < 2) throw ConfigError("train: n_way must be >= 2");
  if (k_shot == 0) throw ConfigError("train: k_shot must be positive");
  if (q_per_class == 0) throw ConfigError("train: q_per_class must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (!(smoothing_eps > 0.0)) throw ConfigError("train: smoothing_eps must be positive");
}

EpisodeLoss episode_total_loss(ad::Graph& g, Encoder& encoder, const fewshot::Episode& episode,
                               const TrainConfig& config, std::uint64_t perm_seed) {
  if (episode.support.empty() || episode.query.empty()) {
    throw ValidationError("episode_total_loss: empty support or query set");
  }
  std::vector<ad::NodeId> support_emb;
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  for (const Sample& s : episode.support) {
    support_emb.push_back(encoder.encode(g, image_node(g, s.image)).embedding);
    labels.push_back(s.label);
    ids.push_back(s.id);
  }
  const ad::NodeId protos =
      fewshot::compute_prototypes(g, support_emb, labels, ids, episode.n_way);

  const bool with_exp = config.builds_explanation_term();
  std::vector<ad::NodeId> proto_terms, exp_terms;
  for (std::size_t j = 0; j < episode.query.size(); ++j) {
    const Sample& q = episode.query[j];
    if (with_exp && !q.has_mask()) {
      throw ValidationError("episode_total_loss: query " + q.id + " has no mask in " +
                            to_string(config.mode) + " mode");
    }
    const EncoderOutput out = encoder.encode(g, image_node(g, q.image));
    const ad::NodeId probs = fewshot::classify_query(g, out.embedding, protos);
    proto_terms.push_back(fewshot::proto_loss(g, probs, q.label));
    if (!with_exp) continue;
    const ad::NodeId score = attribution::class_score(g, out.embedding, protos, q.label);
    ad::NodeId map = attribution::grad_cam(g, score, out.last_conv, q.image.height,
                                           q.image.width, attribution::Mode::differentiable)
                         .map;
    if (config.mode == Mode::random_cam_control) {
      map = g.gather(map, alignment::random_permutation(q.image.height * q.image.width,
                                                        mix(perm_seed, j)));
    }
    exp_terms.push_back(alignment::soft_dice_loss(g, map, q.mask, config.smoothing_eps));
  }

  EpisodeLoss result;
  const ad::NodeId l_proto = mean_of(g, proto_terms);
  result.values.l_proto = g.scalar(l_proto);
  const double alpha = config.effective_alpha();
  if (with_exp) {
    const ad::NodeId l_exp = mean_of(g, exp_terms);
    result.values.l_exp = g.scalar(l_exp);
    result.total = alpha > 0.0 ? g.add(l_proto, g.scalar_mul(l_exp, alpha)) : l_proto;
  } else {
    result.total = l_proto;
  }
  result.values.l_total = g.scalar(result.total);
  return result;
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<ad::Tensor* const> params) {
  if (m_.empty()) {
    for (const ad::Tensor* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ValidationError("adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor& p = *params[k];
    if (!p.has_grad()) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      p.values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

std::uint64_t episode_seed(std::uint64_t seed, std::size_t epoch, std::size_t episode) {
  return mix(mix(seed, epoch), episode);
}

TrainTrace train(Encoder& encoder, std::span<const Sample> pool, const TrainConfig& config) {
  config.validate();
  TrainTrace trace;
  if (config.epochs == 0 || config.episodes_per_epoch == 0) return trace;

  // Small labelled sets (active learning) may not hold K + Q per class; the
  // query count shrinks to what the smallest class allows.
  std::map<std::size_t, std::size_t> per_class;
  for (const Sample& s : pool) ++per_class[s.label];
  std::size_t smallest = per_class.empty() ? 0 : SIZE_MAX;
  for (const auto& [label, n] : per_class) smallest = std::min(smallest, n);
  if (per_class.size() < config.n_way || smallest <= config.k_shot) {
    throw ValidationError("train: pool needs " + std::to_string(config.n_way) +
                          " classes with more than " + std::to_string(config.k_shot) +
                          " samples each (smallest class has " + std::to_string(smallest) + ")");
  }
  const std::size_t q = std::min(config.q_per_class, smallest - config.k_shot);

  Adam adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
  const auto params = encoder.parameters();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    LossBreakdown acc;
    for (std::size_t e = 0; e < config.episodes_per_epoch; ++e) {
      const std::uint64_t seed = episode_seed(config.seed, epoch, e);
      const auto episode = fewshot::sample_episode(pool, config.n_way, config.k_shot, q, seed);
      const std::string where = "epoch " + std::to_string(epoch) + ", episode " +
                                std::to_string(e) + " (episode seed " + std::to_string(seed) + ")";
      ad::Graph g;
      EpisodeLoss loss;
      try {
        loss = episode_total_loss(g, encoder, episode, config, mix(seed, kPermSalt));
      } catch (const NumericError& ex) {
        throw NumericError("train: " + std::string(ex.what()) + " at " + where);
      }
      if (!std::isfinite(loss.values.l_total)) {
        throw NumericError("train: non-finite loss at " + where);
      }
      encoder.zero_grads();
      g.backward(loss.total);
      adam.step(params);
      acc.l_proto += loss.values.l_proto;
      acc.l_exp += loss.values.l_exp;
      acc.l_total += loss.values.l_total;
    }
    const double n = static_cast<double>(config.episodes_per_epoch);
    trace.epochs.push_back({acc.l_proto / n, acc.l_exp / n, acc.l_total / n});
  }
  return trace;
}

std::vector<double> embed(const Encoder& encoder, const Image& image) {
  ad::Graph g;
  return g.value(encoder.encode_frozen(g, image_node(g, image)).embedding);
}

fewshot::PrototypeSet support_prototypes(const Encoder& encoder,
                                         std::span<const Sample> support_pool,
                                         const TrainConfig& config,
                                         std::vector<std::string>* support_ids) {
  const auto draw = fewshot::sample_episode(support_pool, config.n_way, config.k_shot, 0,
                                            mix(config.seed, kSupportSalt));
  std::vector<std::vector<double>> emb(draw.support.size());
  parallel_for(draw.support.size(),
               [&](std::size_t i) { emb[i] = embed(encoder, draw.support[i].image); });
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  for (const Sample& s : draw.support) {
    labels.push_back(draw.classes[s.label]);
    ids.push_back(s.id);
  }
  if (support_ids) *support_ids = ids;
  return fewshot::compute_prototypes(emb, labels, ids, config.n_way);
}

EvalReport evaluate(const Encoder& encoder, std::span<const Sample> support_pool,
                    std::span<const Sample> test_set, const TrainConfig& config) {
  if (test_set.empty()) throw ValidationError("evaluate: empty test set");
  EvalReport report;
  report.n_classes = config.n_way;
  const auto prototypes = support_prototypes(encoder, support_pool, config, &report.support_ids);
  const std::size_t N = config.n_way;

  std::vector<double> scores(test_set.size() * N);
  std::vector<std::size_t> predicted(test_set.size()), labels(test_set.size());
  std::vector<double> iou(test_set.size(), -1.0);
  parallel_for(test_set.size(), [&](std::size_t i) {
    const Sample& s = test_set[i];
    if (s.label >= N) {
      throw ValidationError("evaluate: sample " + s.id + " label out of range");
    }
    ad::Graph g;
    const auto out = encoder.encode_frozen(g, image_node(g, s.image));
    const auto p = g.constant({N, prototypes.dim()}, prototypes.flat());
    const auto& probs = g.value(fewshot::classify_query(g, out.embedding, p));
    std::copy(probs.begin(), probs.end(), scores.begin() + static_cast<std::ptrdiff_t>(i * N));
    const std::size_t pred = fewshot::argmax(probs);
    predicted[i] = pred;
    labels[i] = s.label;
    if (s.has_mask()) {
      const auto score = attribution::class_score(g, out.embedding, p, pred);
      const auto heat = attribution::grad_cam(g, score, out.last_conv, s.image.height,
                                              s.image.width, attribution::Mode::detached)
                            .heatmap;
      iou[i] = alignment::binary_iou(heat.values, s.mask, 0.5);
    }
  });

  report.confusion = metrics::confusion(labels, predicted, N);
  report.accuracy = metrics::accuracy(report.confusion, N);
  report.per_class_f1 = metrics::per_class_f1(report.confusion, N);
  report.macro_auc = metrics::macro_auc(scores, labels, N);
  double iou_sum = 0.0;
  std::size_t iou_n = 0;
  for (double v : iou) {
    if (v >= 0.0) {
      iou_sum += v;
      ++iou_n;
    }
  }
  report.mean_cam_mask_iou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  return report;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["macro_auc"] = r.macro_auc;
  j["f1"] = r.per_class_f1;
  j["iou"] = r.mean_cam_mask_iou;
  j["confusion"] = r.confusion;
  j["n_classes"] = r.n_classes;
  j["support_ids"] = r.support_ids;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_auc = j.at("macro_auc").get<double>();
    r.per_class_f1 = j.at("f1").get<std::vector<double>>();
    r.mean_cam_mask_iou = j.at("iou").get<double>();
    r.confusion = j.at("confusion").get<std::vector<std::size_t>>();
    r.n_classes = j.at("n_classes").get<std::size_t>();
    r.support_ids = j.value("support_ids", std::vector<std::string>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what(), 0);
  }
}

void write_trace_csv(const TrainTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch,l_proto,l_exp,l_total\n";
  out.precision(17);
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    const auto& l = trace.epochs[e];
    out << e << ',' << l.l_proto << ',' << l.l_exp << ',' << l.l_total << '\n';
  }
}

}  // namespace xfsl::train
