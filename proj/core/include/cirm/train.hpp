#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cirm/corpus.hpp"
#include "cirm/model.hpp"

namespace cirm {

enum class Optimizer : uint8_t { sgd = 0, adam = 1 };

std::string_view optimizer_name(Optimizer o);
Optimizer optimizer_from_name(std::string_view name);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct TrainConfig {
  int64_t epochs = 3;
  int64_t batch_size = 32;
  double learning_rate = 3e-4;
  Optimizer optimizer = Optimizer::adam;
  double clip_norm = 1.0;  // global-norm bound applied to every batch gradient
  uint64_t seed = 0x7121;

  void validate() const;  // throws Error("bad_config")
  bool operator==(const TrainConfig&) const = default;
};

// Negative log of the preference probability sigma(r_chosen - r_rejected),
// computed in softplus form so extreme margins stay finite.
double bt_loss(double r_chosen, double r_rejected);

struct TrainResult {
  Model model;
  std::vector<double> loss_curve;  // one mean loss per epoch
};

// Maximum-likelihood preference training: per epoch a seeded shuffle, per
// batch the mean pairwise loss (chosen side = gold), reverse-mode gradients,
// global-norm clipping, one optimizer step. Deterministic given the model
// and config seeds. A non-finite loss or gradient aborts with
// Error("divergence") naming the epoch and batch.
TrainResult train(const Model& m, std::span<const LabeledPair> pairs, const TrainConfig& cfg,
                  const PromptTemplate& prompt = {});

// Loss curve CSV: header "epoch,mean_loss", one row per epoch (1-based).
void write_loss_csv(std::span<const double> curve, const std::string& path);

}  // namespace cirm
