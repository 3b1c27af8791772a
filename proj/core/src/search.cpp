#include "cirm/search.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <set>

#include "cirm/error.hpp"
#include "cirm/rng.hpp"
#include "cirm/serial.hpp"

namespace cirm {

Grids default_k_grids() {
  Grids g;
  for (auto& dim : g) dim = {0, 1, 2, 4, 8, 16, 32};
  return g;
}

namespace {

Grids canonical_grids(Grids grids) {
  for (auto& g : grids) {
    if (g.empty()) throw Error("bad_grids", "every search dimension needs at least one k value");
    for (int64_t v : g)
      if (v < 0) throw Error("bad_grids", "k values must be >= 0, got " + std::to_string(v));
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
  }
  return grids;
}

int64_t grid_size(const Grids& grids) {
  int64_t total = 1;
  for (const auto& g : grids) {
    total *= static_cast<int64_t>(g.size());
    if (total > (int64_t{1} << 50)) return int64_t{1} << 50;  // saturate, caller compares caps
  }
  return total;
}

using Odometer = std::array<size_t, kBiasCount>;

KConfig config_at(const Grids& grids, const Odometer& idx) {
  KConfig k{};
  for (size_t d = 0; d < kBiasCount; ++d) k[d] = grids[d][idx[d]];
  return k;
}

// Lexicographic increment (last dimension fastest); false once exhausted.
bool advance_odometer(const Grids& grids, Odometer& idx) {
  for (size_t d = kBiasCount; d-- > 0;) {
    if (++idx[d] < grids[d].size()) return true;
    idx[d] = 0;
  }
  return false;
}

std::optional<KConfig> smallest_unseen(const Grids& grids, const std::set<KConfig>& seen) {
  Odometer idx{};
  do {
    KConfig k = config_at(grids, idx);
    if (!seen.count(k)) return k;
  } while (advance_odometer(grids, idx));
  return std::nullopt;
}

// Shared best-tracking: higher objective wins, exact ties go to the
// lexicographically smallest configuration.
struct BestTracker {
  bool has = false;
  KConfig k{};
  double obj = 0.0;

  bool offer(const KConfig& kc, double o) {
    if (!has || o > obj || (o == obj && kc < k)) {
      has = true;
      k = kc;
      obj = o;
      return true;
    }
    return false;
  }
};

void record_trial(SearchResult& res, BestTracker& best, const KConfig& k, double obj) {
  best.offer(k, obj);
  res.best = best.k;
  res.best_objective = best.obj;
  SearchTrial t;
  t.trial = static_cast<int64_t>(res.trace.trials.size()) + 1;
  t.k = k;
  t.objective = obj;
  t.best_so_far = best.obj;
  res.trace.trials.push_back(t);
}

size_t value_index(const std::vector<int64_t>& grid, int64_t v) {
  return static_cast<size_t>(std::lower_bound(grid.begin(), grid.end(), v) - grid.begin());
}

}  // namespace

SearchResult grid_search(const ObjectiveFn& objective, const Grids& raw_grids,
                         int64_t budget_cap) {
  Grids grids = canonical_grids(raw_grids);
  int64_t total = grid_size(grids);
  if (total > budget_cap)
    throw Error("budget_exceeded", "grid of " + std::to_string(total) +
                                       " configurations exceeds the cap of " +
                                       std::to_string(budget_cap));
  SearchResult res;
  BestTracker best;
  Odometer idx{};
  do {
    KConfig k = config_at(grids, idx);
    record_trial(res, best, k, objective(k));
  } while (advance_odometer(grids, idx));
  return res;
}

namespace {

struct ParzenDim {
  std::vector<double> p_good;
  std::vector<double> p_bad;
};

// Add-one-smoothed categorical densities over one dimension's grid values.
ParzenDim fit_dim(const std::vector<int64_t>& grid, const std::vector<const KConfig*>& good,
                  const std::vector<const KConfig*>& bad, size_t dim) {
  ParzenDim out;
  out.p_good.assign(grid.size(), 1.0);
  out.p_bad.assign(grid.size(), 1.0);
  for (const KConfig* k : good) out.p_good[value_index(grid, (*k)[dim])] += 1.0;
  for (const KConfig* k : bad) out.p_bad[value_index(grid, (*k)[dim])] += 1.0;
  double zg = static_cast<double>(good.size() + grid.size());
  double zb = static_cast<double>(bad.size() + grid.size());
  for (double& v : out.p_good) v /= zg;
  for (double& v : out.p_bad) v /= zb;
  return out;
}

size_t sample_categorical(Rng& rng, const std::vector<double>& p) {
  double u = rng.uniform01();
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

KConfig draw_uniform(Rng& rng, const Grids& grids) {
  KConfig k{};
  for (size_t d = 0; d < kBiasCount; ++d)
    k[d] = grids[d][static_cast<size_t>(rng.below(grids[d].size()))];
  return k;
}

constexpr int kResampleAttempts = 10;
constexpr int kCandidates = 16;
constexpr double kGoodQuantile = 0.25;

KConfig next_startup(Rng& rng, const Grids& grids, const std::set<KConfig>& seen) {
  KConfig last{};
  for (int attempt = 0; attempt <= kResampleAttempts; ++attempt) {
    last = draw_uniform(rng, grids);
    if (!seen.count(last)) return last;
  }
  if (std::optional<KConfig> u = smallest_unseen(grids, seen)) return *u;
  return last;
}

KConfig next_tpe(Rng& rng, const Grids& grids,
                 const std::vector<std::pair<KConfig, double>>& history,
                 const std::set<KConfig>& seen) {
  // Split history at the objective quantile: the good set are the top
  // ceil(0.25 * n) trials (ties resolved by trial order).
  std::vector<size_t> order(history.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return history[a].second > history[b].second;
  });
  size_t n = history.size();
  size_t n_good = static_cast<size_t>(
      std::ceil(kGoodQuantile * static_cast<double>(n)));
  n_good = std::clamp<size_t>(n_good, 1, n - 1);
  std::vector<const KConfig*> good, bad;
  for (size_t i = 0; i < n; ++i)
    (i < n_good ? good : bad).push_back(&history[order[i]].first);

  std::array<ParzenDim, kBiasCount> dims;
  for (size_t d = 0; d < kBiasCount; ++d) dims[d] = fit_dim(grids[d], good, bad, d);

  BestTracker pick;  // tracks the max-ratio candidate of the current batch
  for (int attempt = 0; attempt <= kResampleAttempts; ++attempt) {
    pick = BestTracker{};
    for (int c = 0; c < kCandidates; ++c) {
      KConfig k{};
      double ratio = 1.0;
      for (size_t d = 0; d < kBiasCount; ++d) {
        size_t vi = sample_categorical(rng, dims[d].p_good);
        k[d] = grids[d][vi];
        ratio *= dims[d].p_good[vi] / dims[d].p_bad[vi];
      }
      pick.offer(k, ratio);
    }
    if (!seen.count(pick.k)) return pick.k;
  }
  if (std::optional<KConfig> u = smallest_unseen(grids, seen)) return *u;
  return pick.k;  // grid exhausted: a repeat is unavoidable
}

}  // namespace

SearchResult tpe_search(const ObjectiveFn& objective, const Grids& raw_grids, int64_t budget,
                        uint64_t seed) {
  if (budget < 1) throw Error("bad_budget", "tpe_search requires budget >= 1");
  Grids grids = canonical_grids(raw_grids);
  Rng rng(seed);

  SearchResult res;
  res.trace.seed = seed;
  BestTracker best;
  std::vector<std::pair<KConfig, double>> history;
  std::set<KConfig> seen;
  int64_t n_startup = std::max<int64_t>(5, budget / 5);

  for (int64_t trial = 0; trial < budget; ++trial) {
    KConfig k = trial < n_startup ? next_startup(rng, grids, seen)
                                  : next_tpe(rng, grids, history, seen);
    double obj = objective(k);
    history.emplace_back(k, obj);
    seen.insert(k);
    record_trial(res, best, k, obj);
  }
  return res;
}

namespace {

double pair_credit(const ScoredPair& sp, Gold gold) {
  if (sp.tie) return 0.5;
  return sp.choice == gold ? 1.0 : 0.0;
}

double scored_accuracy(const Model& m, const InterventionManifest& mf,
                       std::span<const std::vector<int64_t>> tokens_a,
                       std::span<const std::vector<int64_t>> tokens_b,
                       std::span<const Gold> gold) {
  InterventionMap iv = mf.to_interventions();
  double credit = 0.0;
  for (size_t i = 0; i < gold.size(); ++i) {
    double ra = score_intervened(m, tokens_a[i], iv).reward;
    double rb = score_intervened(m, tokens_b[i], iv).reward;
    credit += pair_credit(make_scored(ra, rb, Method::cirm), gold[i]);
  }
  return credit / static_cast<double>(gold.size());
}

struct TokenizedPairs {
  std::vector<std::vector<int64_t>> a;
  std::vector<std::vector<int64_t>> b;
  std::vector<Gold> gold;
};

TokenizedPairs tokenize_pairs(std::span<const PreferencePair> pairs,
                              const PromptTemplate& prompt) {
  if (pairs.empty()) throw Error("empty_input", "objective requires at least one pair");
  TokenizedPairs out;
  out.a.reserve(pairs.size());
  out.b.reserve(pairs.size());
  out.gold.reserve(pairs.size());
  for (const PreferencePair& p : pairs) {
    if (!p.gold.has_value())
      throw Error("missing_gold", "objective requires gold labels on every pair");
    out.a.push_back(byte_tokens(prompt.render(p.query, p.response_a)));
    out.b.push_back(byte_tokens(prompt.render(p.query, p.response_b)));
    out.gold.push_back(*p.gold);
  }
  return out;
}

}  // namespace

double objective(const Model& m, const ActivationMatrix& matrix,
                 std::span<const PreferencePair> val_pairs, const KConfig& kc,
                 const PromptTemplate& prompt) {
  TokenizedPairs tp = tokenize_pairs(val_pairs, prompt);
  InterventionManifest mf = build_manifest(m, matrix, kc);
  return scored_accuracy(m, mf, tp.a, tp.b, tp.gold);
}

ObjectiveFn make_objective(const Model& m, const ProbeCache& cache,
                           std::span<const PreferencePair> val_pairs,
                           const PromptTemplate& prompt) {
  if (cache.matrix().model_checksum != model_checksum(m))
    throw Error("matrix_model_mismatch",
                "the activation matrix was collected from a different model");
  auto tokens = std::make_shared<TokenizedPairs>(tokenize_pairs(val_pairs, prompt));
  const Model* model = &m;
  const ProbeCache* pc = &cache;
  return [model, pc, tokens](const KConfig& kc) {
    InterventionManifest mf = build_manifest(*pc, kc);
    return scored_accuracy(*model, mf, tokens->a, tokens->b, tokens->gold);
  };
}

void write_trace_csv(const SearchTrace& trace, const std::string& path) {
  std::string out = "trial,k_len,k_para,k_over,k_excl,k_bold,objective,best_so_far\n";
  for (const SearchTrial& t : trace.trials) {
    out += std::to_string(t.trial);
    for (int64_t k : t.k) out += "," + std::to_string(k);
    out += "," + format_double(t.objective) + "," + format_double(t.best_so_far) + "\n";
  }
  write_file(path, out);
}

}  // namespace cirm
