#include "xfsl/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "xfsl/error.hpp"

namespace xfsl::fewshot {

Episode sample_episode(std::span<const Sample> pool, std::size_t n_way, std::size_t k_shot,
                       std::size_t q_per_class, std::uint64_t seed) {
  if (n_way == 0 || k_shot == 0) throw ConfigError("episode: n_way and k_shot must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);
  if (by_class.size() < n_way) {
    throw ValidationError("episode: pool has " + std::to_string(by_class.size()) +
                          " classes, need " + std::to_string(n_way));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> classes;
  for (const auto& [label, members] : by_class) classes.push_back(label);
  if (classes.size() > n_way) {
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(n_way);
    std::sort(classes.begin(), classes.end());
  }
  const std::size_t need = k_shot + q_per_class;
  for (std::size_t label : classes) {
    const std::size_t have = by_class[label].size();
    if (have < need) {
      throw ValidationError("episode: class " + std::to_string(label) + " has " +
                            std::to_string(have) + " samples, short by " +
                            std::to_string(need - have));
    }
  }
  Episode ep;
  ep.classes = classes;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto members = by_class[classes[k]];
    // Canonical order first so the draw depends only on the pool contents.
    std::sort(members.begin(), members.end(),
              [&](std::size_t a, std::size_t b) { return pool[a].id < pool[b].id; });
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < need; ++j) {
      Sample s = pool[members[j]];
      s.label = k;
      (j < k_shot ? ep.support : ep.query).push_back(std::move(s));
    }
  }
  return ep;
}

std::vector<double> PrototypeSet::flat() const {
  std::vector<double> out;
  out.reserve(n_way() * dim());
  for (const auto& p : prototypes) out.insert(out.end(), p.begin(), p.end());
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> members_by_class(std::span<const std::size_t> labels,
                                                       std::span<const std::string> ids,
                                                       std::size_t n_way, std::size_t count) {
  if (labels.size() != count || ids.size() != count) {
    throw ShapeError("prototypes: " + std::to_string(count) + " embeddings but " +
                     std::to_string(labels.size()) + " labels and " + std::to_string(ids.size()) +
                     " ids");
  }
  std::vector<std::vector<std::size_t>> members(n_way);
  for (std::size_t i = 0; i < count; ++i) {
    if (labels[i] >= n_way) {
      throw ValidationError("prototypes: label " + std::to_string(labels[i]) + " >= n_way " +
                            std::to_string(n_way));
    }
    members[labels[i]].push_back(i);
  }
  for (std::size_t k = 0; k < n_way; ++k) {
    if (members[k].empty()) {
      throw ValidationError("prototypes: class " + std::to_string(k) + " has no support embedding");
    }
    std::stable_sort(members[k].begin(), members[k].end(),
                     [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  }
  return members;
}

}  // namespace

ad::NodeId compute_prototypes(ad::Graph& g, std::span<const ad::NodeId> embeddings,
                              std::span<const std::size_t> labels,
                              std::span<const std::string> ids, std::size_t n_way) {
  const auto members = members_by_class(labels, ids, n_way, embeddings.size());
  std::vector<ad::NodeId> protos;
  for (const auto& m : members) {
    ad::NodeId acc = embeddings[m[0]];
    for (std::size_t j = 1; j < m.size(); ++j) acc = g.add(acc, embeddings[m[j]]);
    protos.push_back(m.size() == 1 ? acc : g.scalar_mul(acc, 1.0 / static_cast<double>(m.size())));
  }
  return g.stack(protos);
}

PrototypeSet compute_prototypes(std::span<const std::vector<double>> embeddings,
                                std::span<const std::size_t> labels,
                                std::span<const std::string> ids, std::size_t n_way) {
  ad::Graph g;
  std::vector<ad::NodeId> nodes;
  for (const auto& e : embeddings) nodes.push_back(g.constant({e.size()}, e));
  const ad::NodeId p = compute_prototypes(g, nodes, labels, ids, n_way);
  const auto& flat = g.value(p);
  const std::size_t d = g.shape(p)[1];
  PrototypeSet set;
  for (std::size_t k = 0; k < n_way; ++k) {
    set.prototypes.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k * d),
                                flat.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
  }
  return set;
}

ad::NodeId classify_query(ad::Graph& g, ad::NodeId query_embedding, ad::NodeId prototypes) {
  return g.softmax(g.neg_sq_euclidean(query_embedding, prototypes));
}

std::vector<double> classify_query(std::span<const double> query_embedding,
                                   const PrototypeSet& prototypes) {
  if (prototypes.n_way() == 0 || prototypes.dim() != query_embedding.size()) {
    throw ShapeError("classify_query: query dimension " + std::to_string(query_embedding.size()) +
                     " vs prototype dimension " + std::to_string(prototypes.dim()));
  }
  ad::Graph g;
  const auto q = g.constant({query_embedding.size()},
                            std::vector<double>(query_embedding.begin(), query_embedding.end()));
  const auto p = g.constant({prototypes.n_way(), prototypes.dim()}, prototypes.flat());
  return g.value(classify_query(g, q, p));
}

ad::NodeId proto_loss(ad::Graph& g, ad::NodeId probs, std::size_t label) {
  if (label >= ad::numel(g.shape(probs))) {
    throw ValidationError("proto_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(ad::numel(g.shape(probs))) + " classes");
  }
  return g.scalar_mul(g.log(g.clamp_min(g.index(probs, label), kProbFloor)), -1.0);
}

double proto_loss(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw ValidationError("proto_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[label], kProbFloor));
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(
      std::distance(values.begin(), std::max_element(values.begin(), values.end())));
}

}  // namespace xfsl::fewshot
