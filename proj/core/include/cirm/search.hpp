#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cirm/features.hpp"
#include "cirm/probe.hpp"
#include "cirm/scoring.hpp"

namespace cirm {

// One point in the search space: how many neuron pairs (top-k plus bottom-k)
// to intervene on per bias. Order follows the canonical bias order.
using KConfig = std::array<int64_t, kBiasCount>;

// Per-bias candidate value sets. A dimension with one value is fixed.
using Grids = std::array<std::vector<int64_t>, kBiasCount>;

// Every bias searched over {0, 1, 2, 4, 8, 16, 32}; zero lets the search
// disable an intervention dimension entirely.
Grids default_k_grids();

using ObjectiveFn = std::function<double(const KConfig&)>;

struct SearchTrial {
  int64_t trial = 0;  // 1-based
  KConfig k{};
  double objective = 0.0;
  double best_so_far = 0.0;
};

struct SearchTrace {
  std::vector<SearchTrial> trials;
  uint64_t seed = 0;
};

struct SearchResult {
  KConfig best{};
  double best_objective = 0.0;
  SearchTrace trace;
};

// Validation preference accuracy of the intervention that kc selects against
// the given activation matrix: builds the manifest, scores every pair with
// the clamped model, and counts ties as half correct. Gold labels are
// required on every pair (Error "missing_gold").
double objective(const Model& m, const ActivationMatrix& matrix,
                 std::span<const PreferencePair> val_pairs, const KConfig& kc,
                 const PromptTemplate& prompt = {});

// The same objective bound to a reusable rank/median cache, for search loops
// that evaluate many configurations against one matrix.
ObjectiveFn make_objective(const Model& m, const ProbeCache& cache,
                           std::span<const PreferencePair> val_pairs,
                           const PromptTemplate& prompt = {});

// Exhaustive lexicographic sweep. Errors if the full grid exceeds budget_cap;
// objective ties resolve to the lexicographically smallest configuration.
SearchResult grid_search(const ObjectiveFn& objective, const Grids& grids,
                         int64_t budget_cap = 1000000);

// Sequential categorical density-ratio sampler: max(5, budget/5) seeded
// uniform startup trials, then per trial the history splits at the 0.25
// objective quantile into good/bad sets, each dimension gets add-one-smoothed
// categorical densities over its grid, 16 candidates drawn from the good
// density compete on the good/bad likelihood ratio. Every trial dedupes
// against history (up to 10 resamples, then the lexicographically smallest
// unvisited configuration), so a budget at least the grid size visits the
// whole grid.
SearchResult tpe_search(const ObjectiveFn& objective, const Grids& grids, int64_t budget,
                        uint64_t seed);

// CSV export: trial,k_len,k_para,k_over,k_excl,k_bold,objective,best_so_far.
void write_trace_csv(const SearchTrace& trace, const std::string& path);

}  // namespace cirm
