#include "xfsl/active.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <random>
#include <set>
#include <unordered_map>

#include "xfsl/alignment.hpp"
#include "xfsl/attribution.hpp"
#include "xfsl/error.hpp"
#include "xfsl/parallel.hpp"

namespace xfsl::active {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Prototypes from every labelled sample (class means).
fewshot::PrototypeSet labeled_prototypes(const Encoder& encoder,
                                         const std::vector<const Sample*>& labeled,
                                         std::size_t n_way) {
  std::vector<std::vector<double>> emb(labeled.size());
  parallel_for(labeled.size(), [&](std::size_t i) { emb[i] = train::embed(encoder, labeled[i]->image); });
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  for (const Sample* s : labeled) {
    labels.push_back(s->label);
    ids.push_back(s->id);
  }
  return fewshot::compute_prototypes(emb, labels, ids, n_way);
}

std::vector<Sample> gather(const std::vector<std::string>& ids,
                           const std::unordered_map<std::string, const Sample*>& by_id) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(*by_id.at(id));
  return out;
}

}  // namespace

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::xgal: return "xgal";
    case Strategy::random: return "random";
    case Strategy::entropy_only: return "entropy";
    case Strategy::dice_only: return "dice";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& name) {
  if (name == "xgal") return Strategy::xgal;
  if (name == "random") return Strategy::random;
  if (name == "entropy" || name == "entropy_only") return Strategy::entropy_only;
  if (name == "dice" || name == "dice_only") return Strategy::dice_only;
  throw ValidationError("unknown acquisition strategy '" + name + "'");
}

void ALConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("active: lambda must lie in [0, 1]");
  if (!(smoothing_eps > 0.0)) throw ConfigError("active: smoothing_eps must be positive");
}

double ALConfig::effective_lambda() const {
  switch (strategy) {
    case Strategy::entropy_only: return 1.0;
    case Strategy::dice_only: return 0.0;
    default: return lambda;
  }
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p >= fewshot::kProbFloor) h -= p * std::log(p);
  }
  return h;
}

double d_exp(std::span<const double> heatmap, std::span<const double> mask, bool soft,
             double eps) {
  return soft ? alignment::soft_dice_loss(heatmap, mask, eps)
              : 1.0 - alignment::hard_dice(heatmap, mask, 0.5);
}

Misalignment misalignment(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                          const Sample& sample, bool soft, double eps) {
  if (!sample.has_mask()) {
    throw ValidationError("misalignment: sample " + sample.id + " has no mask");
  }
  const Image& im = sample.image;
  ad::Graph g;
  const auto x = g.constant({im.channels, im.height, im.width}, im.values);
  const auto out = encoder.encode_frozen(g, x);
  const auto p = g.constant({prototypes.n_way(), prototypes.dim()}, prototypes.flat());
  Misalignment m;
  m.probs = g.value(fewshot::classify_query(g, out.embedding, p));
  m.predicted_class = fewshot::argmax(m.probs);
  const auto score = attribution::class_score(g, out.embedding, p, m.predicted_class);
  const auto heat =
      attribution::grad_cam(g, score, out.last_conv, im.height, im.width, attribution::Mode::detached)
          .heatmap;
  m.d_exp = d_exp(heat.values, sample.mask, soft, eps);
  return m;
}

double acquisition_score(double entropy, double misalignment, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("acquisition_score: lambda " + std::to_string(lambda) +
                      " outside [0, 1]");
  }
  return lambda * entropy + (1.0 - lambda) * misalignment;
}

std::vector<std::string> select_top_k(std::span<const AcquisitionRecord> records, std::size_t k) {
  std::vector<const AcquisitionRecord*> order;
  order.reserve(records.size());
  for (const auto& r : records) order.push_back(&r);
  k = std::min(k, order.size());
  const auto before = [](const AcquisitionRecord* a, const AcquisitionRecord* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->sample_id < b->sample_id;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    before);
  std::vector<std::string> ids;
  ids.reserve(k);
  for (std::size_t i = 0; i < k; ++i) ids.push_back(order[i]->sample_id);
  return ids;
}

ALResult run_al(std::span<const Sample> pool, std::span<const Sample> test_set,
                const ALConfig& al, const train::TrainConfig& tc,
                const EncoderConfig& encoder_config, Encoder* final_model) {
  al.validate();
  tc.validate();
  if (pool.size() < al.init_labeled + al.rounds * al.batch_k) {
    throw ValidationError("active: pool of " + std::to_string(pool.size()) +
                          " cannot supply init_labeled + rounds * batch_k = " +
                          std::to_string(al.init_labeled + al.rounds * al.batch_k) + " samples");
  }
  std::unordered_map<std::string, const Sample*> by_id;
  std::vector<std::string> ids;
  for (const Sample& s : pool) {
    if (!by_id.emplace(s.id, &s).second) {
      throw ValidationError("active: duplicate sample id '" + s.id + "' in pool");
    }
    if (!s.has_mask()) throw ValidationError("active: sample " + s.id + " has no mask");
    ids.push_back(s.id);
  }
  std::sort(ids.begin(), ids.end());

  std::mt19937_64 rng(mix(al.seed, 0x1ab3ULL));
  std::vector<std::string> shuffled = ids;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  PoolState state;
  state.labeled_ids.assign(shuffled.begin(),
                           shuffled.begin() + static_cast<std::ptrdiff_t>(al.init_labeled));
  state.unlabeled_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(al.init_labeled),
                             shuffled.end());
  std::sort(state.labeled_ids.begin(), state.labeled_ids.end());
  std::sort(state.unlabeled_ids.begin(), state.unlabeled_ids.end());

  ALResult result;
  Encoder encoder(encoder_config);
  {
    const auto labeled = gather(state.labeled_ids, by_id);
    train::train(encoder, labeled, tc);
    result.reports.push_back(train::evaluate(encoder, labeled, test_set, tc));
  }
  result.history.push_back(state);

  const double lambda = al.effective_lambda();
  for (std::size_t round = 1; round <= al.rounds; ++round) {
    std::vector<const Sample*> labeled_ptrs;
    for (const auto& id : state.labeled_ids) labeled_ptrs.push_back(by_id.at(id));
    const auto prototypes = labeled_prototypes(encoder, labeled_ptrs, tc.n_way);

    RoundAudit audit;
    audit.round = round;
    audit.records.resize(state.unlabeled_ids.size());
    parallel_for(state.unlabeled_ids.size(), [&](std::size_t i) {
      const Sample& s = *by_id.at(state.unlabeled_ids[i]);
      const Misalignment m = misalignment(encoder, prototypes, s, al.soft_dexp, al.smoothing_eps);
      AcquisitionRecord& r = audit.records[i];
      r.sample_id = s.id;
      r.entropy = entropy(m.probs);
      r.misalignment = m.d_exp;
      r.predicted_class = m.predicted_class;
      r.score = acquisition_score(r.entropy, r.misalignment, lambda);
    });
    if (al.strategy == Strategy::random) {
      std::mt19937_64 pick(mix(al.seed, round));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (auto& r : audit.records) r.score = unit(pick);
    }
    audit.selected = select_top_k(audit.records, al.batch_k);

    const std::set<std::string> chosen(audit.selected.begin(), audit.selected.end());
    std::vector<std::string> still;
    for (const auto& id : state.unlabeled_ids) {
      if (chosen.count(id)) {
        state.labeled_ids.push_back(id);
      } else {
        still.push_back(id);
      }
    }
    state.unlabeled_ids = std::move(still);
    std::sort(state.labeled_ids.begin(), state.labeled_ids.end());
    state.round_index = round;

    train::TrainConfig ft = tc;
    ft.epochs = al.finetune_epochs;
    ft.episodes_per_epoch = al.finetune_episodes;
    ft.seed = mix(tc.seed, round);
    const auto labeled = gather(state.labeled_ids, by_id);
    train::train(encoder, labeled, ft);
    result.reports.push_back(train::evaluate(encoder, labeled, test_set, tc));
    result.history.push_back(state);
    result.audits.push_back(std::move(audit));
  }
  if (final_model) *final_model = encoder;
  return result;
}

void write_audit_jsonl(const ALResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const RoundAudit& a : result.audits) {
    const std::set<std::string> chosen(a.selected.begin(), a.selected.end());
    for (const AcquisitionRecord& r : a.records) {
      nlohmann::json j{{"round", a.round},        {"sample_id", r.sample_id},
                       {"entropy", r.entropy},    {"d_exp", r.misalignment},
                       {"score", r.score},        {"selected", chosen.count(r.sample_id) > 0}};
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace xfsl::active
