#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cirm/corpus.hpp"
#include "cirm/probe.hpp"
#include "cirm/scoring.hpp"

namespace cirm {

// A method handle: scores one query/response with a scalar reward. Pairs and
// candidate sets are judged by comparing these rewards, which keeps every
// evaluation path consistent with the pairwise predict_* functions (exact
// reward equality means a tie).
using RewardFn = std::function<double(const QueryResponse&)>;

// Builds the reward function for one method. The model must outlive the
// returned callable; manifest and calibration are copied into it. cirm
// requires `manifest`, lwr requires `lwr`; vanilla and lp ignore both.
struct MethodSettings {
  const InterventionManifest* manifest = nullptr;  // cirm
  double lp_alpha = 0.001;                         // lp
  const LwrCalibration* lwr = nullptr;             // lwr
};

RewardFn make_reward_fn(const Model& m, Method method, const MethodSettings& settings,
                        const PromptTemplate& prompt = {});

// Accuracy over one collection of pairs. A reward tie contributes 0.5 credit:
// accuracy = (correct + 0.5 * reward_ties) / n. `defined` is false when the
// collection is empty (accuracy reported as 0).
struct SplitAccuracy {
  int64_t n = 0;
  int64_t correct = 0;      // strict wins for the gold response
  int64_t reward_ties = 0;  // exact reward equality
  double accuracy = 0.0;
  bool defined = false;
};

// One method's full accuracy grid: overall, plus per bias the three
// feature-comparison partitions (gold strictly higher / strictly lower /
// equal on the feature). Their credits sum to the overall credit, so the
// overall accuracy is always the count-weighted mean of the three splits.
struct MethodEval {
  Method method = Method::vanilla;
  SplitAccuracy overall;
  std::array<SplitAccuracy, kBiasCount> biased{};
  std::array<SplitAccuracy, kBiasCount> unbiased{};
  std::array<SplitAccuracy, kBiasCount> feature_ties{};
};

MethodEval evaluate(const RewardFn& scorer, std::span<const LabeledPair> pairs, Method label,
                    int threads = 1);

// Same tally from precomputed rewards: reward_a[i]/reward_b[i] score
// pairs[i]'s two responses. Lets callers that already hold reward tables
// (persisted score files, shared base rewards across methods) reuse the exact
// accuracy accounting. Sizes must match (throws Error("size_mismatch")).
MethodEval evaluate_scored(std::span<const double> reward_a, std::span<const double> reward_b,
                           std::span<const LabeledPair> pairs, Method label);

// Best-of-n annotation: highest reward becomes the preferred response,
// lowest the dispreferred one. Reward ties break to the lowest index; if all
// rewards are equal the pair is (0, 1) with the degenerate flag set. The
// chosen response is stored as response_a with gold = A and freshly
// extracted features.
struct AnnotatedPair {
  LabeledPair pair;  // response_a = chosen, response_b = rejected, gold = A
  Method method = Method::vanilla;
  double reward_chosen = 0.0;
  double reward_rejected = 0.0;
  int64_t chosen_index = 0;
  int64_t rejected_index = 0;
  bool degenerate = false;  // all candidate rewards equal
};

std::vector<AnnotatedPair> annotate(const RewardFn& scorer, std::span<const CandidateSet> sets,
                                    Method label, int threads = 1);

// Same selection from precomputed rewards: rewards[i][j] scores
// sets[i].responses[j]. Shapes must match the sets (Error("size_mismatch")).
std::vector<AnnotatedPair> annotate_scored(std::span<const std::vector<double>> rewards,
                                           std::span<const CandidateSet> sets, Method label);

// Share of annotated pairs whose preferred response has strictly more of the
// feature: |B| / (|B| + |unbiased|). Feature ties are excluded from both
// sides; a zero denominator flags the ratio undefined instead of erroring.
struct BiasRatio {
  double ratio = 0.0;
  bool defined = false;
  int64_t biased = 0;
  int64_t unbiased = 0;
  int64_t feature_ties = 0;
};

BiasRatio bias_ratio(std::span<const LabeledPair> annotated, Bias bias);
BiasRatio bias_ratio(std::span<const AnnotatedPair> annotated, Bias bias);

// Arithmetic mean of each feature component, in canonical bias order
// (len, para, over, excl, bold).
using FeatureMeans = std::array<double, kBiasCount>;

FeatureMeans feature_means(std::span<const QueryResponse> items);

// Where a neuron set lives in the network: counts per layer and per
// (layer, site). Totals always equal the set size.
struct LayerHistogram {
  std::map<int32_t, int64_t> by_layer;
  std::map<std::pair<int32_t, Site>, int64_t> by_layer_site;
  int64_t total = 0;
};

LayerHistogram layer_histogram(std::span<const NeuronAddress> addresses);

// CSV export of per-bias histograms from a manifest: layer,site,bias,count,
// rows ordered by (bias, layer, site). Biases with no selected neurons
// contribute no rows, so per-bias row sums always equal set sizes.
void write_histogram_csv(const InterventionManifest& mf, const std::string& path);

// Per-method annotation statistics for the report: bias ratios and the mean
// feature values of the chosen responses.
struct AnnotationStats {
  Method method = Method::vanilla;
  int64_t n_sets = 0;
  int64_t degenerate = 0;
  std::array<BiasRatio, kBiasCount> ratios{};
  FeatureMeans chosen_means{};
};

AnnotationStats annotation_stats(std::span<const AnnotatedPair> annotated, Method label);

// The full evaluation report: the method x subset accuracy grid, optional
// annotation statistics, and the provenance hashes of every input artifact.
// The JSON form states the tie conventions in its header.
struct EvalReport {
  std::vector<MethodEval> methods;
  std::vector<AnnotationStats> annotations;
  uint64_t model_checksum = 0;
  uint64_t corpus_hash = 0;
  uint64_t manifest_hash = 0;
};

std::string report_to_json(const EvalReport& r);
void save_report(const EvalReport& r, const std::string& path);

// JSONL export in the corpus pair schema plus method/reward/index fields, so
// annotation files round-trip through the corpus reader.
void write_annotations_jsonl(std::span<const AnnotatedPair> annotated, const std::string& path);

}  // namespace cirm
