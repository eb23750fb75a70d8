#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xfsl/encoder.hpp"
#include "xfsl/fewshot.hpp"
#include "xfsl/sample.hpp"
#include "xfsl/trainer.hpp"

namespace xfsl::active {

enum class Strategy { xgal, random, entropy_only, dice_only };

const char* to_string(Strategy strategy);
Strategy strategy_from_string(const std::string& name);

struct ALConfig {
  Strategy strategy = Strategy::xgal;
  double lambda = 0.5;
  std::size_t init_labeled = 40;
  std::size_t rounds = 3;
  std::size_t batch_k = 24;
  std::size_t finetune_epochs = 2;
  std::size_t finetune_episodes = 50;
  // Score misalignment with the smoothed Dice loss instead of the hard
  // (binarized) Dice complement.
  bool soft_dexp = false;
  double smoothing_eps = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  // entropy_only is xgal at lambda 1, dice_only is xgal at lambda 0.
  double effective_lambda() const;
};

struct AcquisitionRecord {
  std::string sample_id;
  double entropy = 0.0;       // nats
  double misalignment = 0.0;  // D_exp in [0, 1]
  double score = 0.0;
  std::size_t predicted_class = 0;
};

struct PoolState {
  std::vector<std::string> labeled_ids;    // ascending
  std::vector<std::string> unlabeled_ids;  // ascending
  std::size_t round_index = 0;
};

// -sum p log p in nats; terms with p < 1e-12 contribute nothing.
double entropy(std::span<const double> probs);

struct Misalignment {
  double d_exp = 0.0;
  std::size_t predicted_class = 0;
  std::vector<double> probs;
};

// 1 - hard Dice of the heatmap binarized at 0.5 against the mask, or the
// smoothed Dice loss when `soft` is set.
double d_exp(std::span<const double> heatmap, std::span<const double> mask, bool soft = false,
             double eps = 1.0);

// Classifies the sample, then compares the detached Grad-CAM at the predicted
// class with the mask: 1 - hard Dice at threshold 0.5, or the smoothed Dice
// loss when `soft` is set. Throws ValidationError when the mask is missing.
Misalignment misalignment(const Encoder& encoder, const fewshot::PrototypeSet& prototypes,
                          const Sample& sample, bool soft = false, double eps = 1.0);

// lambda * H + (1 - lambda) * D; throws ConfigError for lambda outside [0, 1].
double acquisition_score(double entropy, double misalignment, double lambda);

// The k highest scores, ties broken by ascending sample id.
std::vector<std::string> select_top_k(std::span<const AcquisitionRecord> records, std::size_t k);

struct RoundAudit {
  std::size_t round = 0;
  std::vector<AcquisitionRecord> records;  // ascending sample id
  std::vector<std::string> selected;       // selection order
};

struct ALResult {
  std::vector<train::EvalReport> reports;  // baseline entry, then one per round
  std::vector<PoolState> history;          // after init, then after each round
  std::vector<RoundAudit> audits;
};

// Seeds a labelled set, trains on it with the trainer, then per round scores
// the unlabelled pool, moves the top batch_k ids to the labelled set,
// fine-tunes and evaluates on `test_set`. Throws ValidationError before any
// work when the pool cannot supply init_labeled + rounds * batch_k samples.
// The final model is copied into `final_model` when given.
ALResult run_al(std::span<const Sample> pool, std::span<const Sample> test_set,
                const ALConfig& al_config, const train::TrainConfig& train_config,
                const EncoderConfig& encoder_config, Encoder* final_model = nullptr);

// One JSON object per scored sample per round:
// {round, sample_id, entropy, d_exp, score, selected}.
void write_audit_jsonl(const ALResult& result, const std::filesystem::path& path);

}  // namespace xfsl::active
