#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xfsl/autodiff.hpp"
#include "xfsl/sample.hpp"

namespace xfsl::fewshot {

// N-way K-shot episode. Sample labels inside an episode are episode-local
// class indices in [0, n_way); `classes[k]` is the pool label of class k.
struct Episode {
  std::vector<Sample> support;  // class-major, K per class
  std::vector<Sample> query;    // class-major, Q per class
  std::vector<std::size_t> classes;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t q_per_class = 0;
};

// Picks n_way classes among those present in the pool (all of them when the
// pool has exactly n_way classes), then draws K support and Q query samples
// per class uniformly without replacement. Throws ValidationError naming the
// class and its shortfall when a class is too small.
Episode sample_episode(std::span<const Sample> pool, std::size_t n_way, std::size_t k_shot,
                       std::size_t q_per_class, std::uint64_t seed);

struct PrototypeSet {
  std::vector<std::vector<double>> prototypes;  // n_way vectors of length d

  std::size_t n_way() const { return prototypes.size(); }
  std::size_t dim() const { return prototypes.empty() ? 0 : prototypes.front().size(); }
  // Row-major (n_way, d) copy.
  std::vector<double> flat() const;
};

// Class means of the support embeddings as an (n_way, d) node that keeps the
// graph connection to every embedding. Within a class the embeddings are
// summed in ascending id order, so the result does not depend on the order
// of `embeddings`.
ad::NodeId compute_prototypes(ad::Graph& g, std::span<const ad::NodeId> embeddings,
                              std::span<const std::size_t> labels,
                              std::span<const std::string> ids, std::size_t n_way);

PrototypeSet compute_prototypes(std::span<const std::vector<double>> embeddings,
                                std::span<const std::size_t> labels,
                                std::span<const std::string> ids, std::size_t n_way);

// softmax_k(-||query - c_k||^2)
ad::NodeId classify_query(ad::Graph& g, ad::NodeId query_embedding, ad::NodeId prototypes);
std::vector<double> classify_query(std::span<const double> query_embedding,
                                   const PrototypeSet& prototypes);

inline constexpr double kProbFloor = 1e-12;

// -log(max(p[label], 1e-12))
ad::NodeId proto_loss(ad::Graph& g, ad::NodeId probs, std::size_t label);
double proto_loss(std::span<const double> probs, std::size_t label);

std::size_t argmax(std::span<const double> values);

}  // namespace xfsl::fewshot
