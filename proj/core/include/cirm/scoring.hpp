#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cirm/features.hpp"
#include "cirm/model.hpp"
#include "cirm/probe.hpp"

namespace cirm {

// The four preference-prediction methods the benchmark compares.
enum class Method : uint8_t { vanilla = 0, cirm = 1, lp = 2, lwr = 3 };

inline constexpr int kMethodCount = 4;
inline constexpr Method kAllMethods[kMethodCount] = {Method::vanilla, Method::cirm, Method::lp,
                                                     Method::lwr};

std::string_view method_name(Method m);
Method method_from_name(std::string_view name);

enum class Gold : uint8_t { A = 0, B = 1 };

struct PreferencePair {
  std::string query;
  std::string response_a;
  std::string response_b;
  std::optional<Gold> gold;
};

// One scored pair. Exact reward equality chooses A and sets the tie flag;
// downstream accuracy counts flagged ties as half correct.
struct ScoredPair {
  double reward_a = 0.0;
  double reward_b = 0.0;
  Method method = Method::vanilla;
  Gold choice = Gold::A;
  bool tie = false;
};

// Applies the deterministic choice rule to a pair of rewards.
ScoredPair make_scored(double reward_a, double reward_b, Method method);

// Bradley-Terry probability that the first response is preferred:
// sigmoid(r1 - r2). Throws Error("non_finite") on non-finite rewards.
double bt_probability(double r1, double r2);

// Plain two-sided scoring: each response is rendered with the prompt template
// and scored with activations free to vary (the total-effect comparison).
ScoredPair predict_te(const Model& m, const PreferencePair& pair,
                      const PromptTemplate& prompt = {});

// Intervened scoring: both responses are scored with the manifest's neuron
// set clamped to the same stored medians (the controlled-direct-effect
// comparison). The manifest must carry the scored model's checksum; a
// mismatch is a hard Error("manifest_model_mismatch"). A default-constructed
// empty manifest is the identity intervention and is accepted for any model.
ScoredPair predict_cde(const Model& m, const PreferencePair& pair,
                       const InterventionManifest& manifest, const PromptTemplate& prompt = {});

// Alternative replacement values for the manifest's neuron set.
//   median - clamp both sides to the stored medians (same as predict_cde)
//   zero   - clamp both sides to 0
//   swap   - score one response plainly, then score the other with its
//            manifest neurons overwritten by the first one's recorded values
enum class Variant : uint8_t { median = 0, zero = 1, swap = 2 };

std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view name);

// Direction of the swap variant: by default response A is patched with
// response B's recorded values and compared against B's plain reward; the
// mirrored direction exists for ablation.
enum class SwapDirection : uint8_t { patch_a_with_b = 0, patch_b_with_a = 1 };

ScoredPair intervention_variant(const Model& m, const PreferencePair& pair,
                                const InterventionManifest& manifest, Variant variant,
                                const PromptTemplate& prompt = {},
                                SwapDirection swap_dir = SwapDirection::patch_a_with_b);

// Length-penalty baseline: reward - alpha * response length in Unicode
// scalar values. Query text does not count. Negative alpha is an error.
double lp_score(double reward, const QueryResponse& item, double alpha);

ScoredPair predict_lp(const Model& m, const PreferencePair& pair, double alpha,
                      const PromptTemplate& prompt = {});

// Locally weighted linear regression of reward on response length (loess with
// a tricube kernel over the nearest `tau` fraction of points). estimate()
// returns the fitted local line's value at the query length; debiasing
// subtracts it from the raw reward.
class LwrCalibration {
public:
  double estimate(double length) const;
  double debias(double reward, double length) const { return reward - estimate(length); }
  double tau() const { return tau_; }

private:
  friend LwrCalibration lwr_calibrate(std::vector<std::pair<double, double>> points, double tau);
  std::vector<std::pair<double, double>> points_;  // (length, reward), sorted
  double tau_ = 0.3;
  int64_t neighborhood_ = 0;
};

// Builds the calibration. Requires at least 5 points and at least two
// distinct lengths (errors "lwr_too_few_points" / "lwr_degenerate_lengths");
// tau must lie in (0, 1] ("lwr_bad_tau"). The fit is invariant to the input
// point order.
LwrCalibration lwr_calibrate(std::vector<std::pair<double, double>> points, double tau = 0.3);

ScoredPair predict_lwr(const Model& m, const PreferencePair& pair, const LwrCalibration& cal,
                       const PromptTemplate& prompt = {});

}  // namespace cirm
