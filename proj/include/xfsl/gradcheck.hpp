#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xfsl::gradcheck {

struct CaseResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t failures = 0;
  double worst_error = 0.0;  // max over trials and coordinates
  // Parameter coordinates left out because a ReLU or max-pool switch lies
  // within one step of the sampled point.
  std::size_t kinks_skipped = 0;
  bool passed() const { return failures == 0; }
};

// |autodiff - finite difference| / max(|autodiff|, |finite difference|, kFloor)
inline constexpr double kFloor = 1e-6;
inline constexpr double kStep = 1e-5;
// A coordinate straddles a kink when its forward and backward one-sided
// slopes differ by more than this fraction of their magnitude.
inline constexpr double kKinkRatio = 1e-2;

double relative_error(double analytic, double numeric);

// Finite-difference suites: one case per primitive op, the encoder, and the
// full episode objective (guided and random-CAM) on a 2-way 1-shot
// micro-episode. Each case runs `trials` seeded draws.
std::vector<CaseResult> run_all(std::size_t trials, std::uint64_t seed, double tolerance);

std::vector<std::string> case_names();

}  // namespace xfsl::gradcheck
