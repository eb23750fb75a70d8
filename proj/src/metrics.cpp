#include "xfsl/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "xfsl/error.hpp"

namespace xfsl::metrics {

double auc(std::span<const double> scores, std::span<const char> positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks (1-based) over tied groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      pos_rank_sum += rank[i];
      ++n_pos;
    }
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ValidationError("auc: need both positive and negative samples (have " +
                          std::to_string(n_pos) + " positive, " + std::to_string(n_neg) +
                          " negative)");
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

double macro_auc(std::span<const double> scores, std::span<const std::size_t> labels,
                 std::size_t n_classes) {
  if (scores.size() != labels.size() * n_classes) {
    throw ShapeError("macro_auc: expected " + std::to_string(labels.size() * n_classes) +
                     " scores, got " + std::to_string(scores.size()));
  }
  double total = 0.0;
  std::vector<double> col(labels.size());
  std::vector<char> pos(labels.size());
  for (std::size_t k = 0; k < n_classes; ++k) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores[i * n_classes + k];
      pos[i] = labels[i] == k;
    }
    try {
      total += auc(col, pos);
    } catch (const ValidationError& e) {
      throw ValidationError("macro_auc: class " + std::to_string(k) + " AUC undefined (" +
                            e.what() + ")");
    }
  }
  return total / static_cast<double>(n_classes);
}

std::vector<std::size_t> confusion(std::span<const std::size_t> labels,
                                   std::span<const std::size_t> predicted, std::size_t n_classes) {
  if (labels.size() != predicted.size()) throw ShapeError("confusion: length mismatch");
  std::vector<std::size_t> m(n_classes * n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predicted[i] >= n_classes) {
      throw ValidationError("confusion: class index out of range");
    }
    ++m[labels[i] * n_classes + predicted[i]];
  }
  return m;
}

std::vector<double> per_class_f1(std::span<const std::size_t> confusion, std::size_t n_classes) {
  std::vector<double> f1(n_classes, 0.0);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double tp = static_cast<double>(confusion[k * n_classes + k]);
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n_classes; ++j) {
      row += static_cast<double>(confusion[k * n_classes + j]);
      col += static_cast<double>(confusion[j * n_classes + k]);
    }
    const double denom = row + col;
    f1[k] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return f1;
}

double accuracy(std::span<const std::size_t> confusion, std::size_t n_classes) {
  std::size_t trace = 0, total = 0;
  for (std::size_t i = 0; i < n_classes; ++i) {
    for (std::size_t j = 0; j < n_classes; ++j) {
      total += confusion[i * n_classes + j];
      if (i == j) trace += confusion[i * n_classes + j];
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(trace) / static_cast<double>(total);
}

}  // namespace xfsl::metrics
