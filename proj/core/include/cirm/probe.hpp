#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cirm/features.hpp"
#include "cirm/model.hpp"

namespace cirm {

// Spearman rank correlation with average ranks for ties. When either side has
// zero rank variance the coefficient is undefined; rho is reported as 0 with
// the degenerate flag set so callers can exclude the column from selection.
struct SpearmanResult {
  double rho = 0.0;
  bool degenerate = false;
};

SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

// Average fractional ranks (1-based); ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> x);

// Last-token activations of a scored dataset: one row per (query, response),
// one column per neuron in canonical layout order, plus the feature
// quantities of every row and the provenance of model and dataset.
struct ActivationMatrix {
  ModelConfig config;
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;              // rows x cols
  std::vector<FeatureVector> features;   // one per row
  uint64_t model_checksum = 0;
  uint64_t valset_hash = 0;

  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
  double feature(int64_t r, Bias b) const { return features[static_cast<size_t>(r)].value(b); }
};

uint64_t dataset_content_hash(std::span<const QueryResponse> dataset);

ActivationMatrix collect_activations(const Model& m, std::span<const QueryResponse> dataset,
                                     const PromptTemplate& prompt, int threads = 1);

void save_matrix(const ActivationMatrix& m, const std::string& path);
ActivationMatrix load_matrix(const std::string& path);

// Correlation of every neuron with one feature quantity across the dataset.
struct NeuronRanking {
  Bias bias = Bias::len;
  std::vector<double> rho;          // per canonical column
  std::vector<uint8_t> degenerate;  // per canonical column
};

NeuronRanking rank_neurons(const ActivationMatrix& m, Bias bias);

// The top-k most positively and bottom-k most negatively correlated
// non-degenerate neurons, as a canonically ordered set. truncated is set when
// fewer than 2k non-degenerate columns exist (all of them are returned).
struct Selection {
  std::vector<NeuronAddress> addresses;
  bool truncated = false;
};

Selection select_bias_neurons(const NeuronRanking& ranking, const ActivationLayout& layout, int64_t k);

std::map<NeuronAddress, double> compute_medians(const ActivationMatrix& m,
                                                std::span<const NeuronAddress> addresses);

// Everything needed to reproduce an intervention: per-bias neuron sets, the
// per-bias k they came from, replacement medians over the union, and the
// provenance (model checksum + dataset hash) they are only valid for.
struct InterventionManifest {
  std::array<int64_t, kBiasCount> k_per_bias{};
  std::array<std::vector<NeuronAddress>, kBiasCount> addresses{};
  std::array<bool, kBiasCount> truncated{};
  std::map<NeuronAddress, double> medians;
  uint64_t model_checksum = 0;
  uint64_t valset_hash = 0;

  std::vector<NeuronAddress> address_union() const;
  InterventionMap to_interventions() const;  // median replacement for the union
  bool empty() const { return medians.empty(); }
};

// Memoizes per-column ranks, per-bias rankings, and per-column medians so a
// hyperparameter search can evaluate many k combinations against one matrix.
// Not thread-safe; intended for sequential trial loops.
class ProbeCache {
public:
  explicit ProbeCache(const ActivationMatrix& m);

  const ActivationMatrix& matrix() const { return *m_; }
  const ActivationLayout& layout() const { return layout_; }
  const NeuronRanking& ranking(Bias b) const;
  double median(int64_t col) const;

private:
  const ActivationMatrix* m_;
  ActivationLayout layout_;
  mutable std::array<std::optional<NeuronRanking>, kBiasCount> rankings_;
  mutable std::vector<double> rank_cols_;  // per-column average ranks, lazily built
  mutable bool ranks_built_ = false;
  mutable std::vector<double> median_value_;
  mutable std::vector<uint8_t> median_known_;

  void build_ranks() const;
};

InterventionManifest build_manifest(const ProbeCache& cache,
                                    const std::array<int64_t, kBiasCount>& k_per_bias);
InterventionManifest build_manifest(const Model& m, const ActivationMatrix& matrix,
                                    const std::array<int64_t, kBiasCount>& k_per_bias);

std::string manifest_to_json(const InterventionManifest& mf);
InterventionManifest manifest_from_json(std::string_view text);
void save_manifest(const InterventionManifest& mf, const std::string& path);
InterventionManifest load_manifest(const std::string& path);

}  // namespace cirm
