#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xfsl::metrics {

// Rank-based one-vs-rest AUC (Mann-Whitney U with midranks for ties).
// Throws ValidationError when either the positive or negative set is empty.
double auc(std::span<const double> scores, std::span<const char> positive);

// scores: row-major (n, n_classes) class scores; macro AUC is the unweighted
// mean of the per-class one-vs-rest AUCs.
double macro_auc(std::span<const double> scores, std::span<const std::size_t> labels,
                 std::size_t n_classes);

// confusion[true][pred], row-major.
std::vector<std::size_t> confusion(std::span<const std::size_t> labels,
                                   std::span<const std::size_t> predicted, std::size_t n_classes);

// F1 per class from a confusion matrix; a class with no true and no predicted
// members scores 0.
std::vector<double> per_class_f1(std::span<const std::size_t> confusion, std::size_t n_classes);

double accuracy(std::span<const std::size_t> confusion, std::size_t n_classes);

}  // namespace xfsl::metrics
