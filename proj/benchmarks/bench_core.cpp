// Microbenchmarks for the hot paths: forward scoring (plain and intervened),
// rank correlation, manifest construction, search, corpus generation, and
// training steps. Run ./cirm_bench --benchmark_min_time=0.2s for a quick pass.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>
#include <vector>

#include "cirm/bench.hpp"
#include "cirm/corpus.hpp"
#include "cirm/pipeline.hpp"
#include "cirm/probe.hpp"
#include "cirm/rng.hpp"
#include "cirm/search.hpp"
#include "cirm/train.hpp"

namespace {

using namespace cirm;

ModelConfig bench_model_config() {
  ModelConfig mc;
  mc.d_model = 32;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_ff = 64;
  mc.max_seq_len = 384;
  mc.init_seed = 99;
  return mc;
}

CorpusConfig bench_corpus_config() {
  CorpusConfig cfg = default_corpus_config();
  cfg.n_pairs = 64;
  cfg.seed = 7;
  return cfg;
}

struct Lab {
  Model model;
  std::vector<LabeledPair> pairs;
  ActivationMatrix matrix;
  InterventionManifest manifest;
  std::vector<int64_t> tokens;

  Lab()
      : model(init_model(bench_model_config())),
        pairs(generate_corpus(bench_corpus_config())),
        matrix(collect_activations(model, to_query_responses(pairs), {})) {
    ProbeCache cache(matrix);
    manifest = build_manifest(cache, {8, 0, 0, 0, 0});
    PromptTemplate prompt;
    tokens = byte_tokens(prompt.render(pairs[0].pair.query, pairs[0].pair.response_a));
  }
};

const Lab& lab() {
  static Lab L;
  return L;
}

void BM_forward_score(benchmark::State& state) {
  const Lab& L = lab();
  for (auto _ : state) benchmark::DoNotOptimize(score(L.model, L.tokens).reward);
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_forward_score);

void BM_forward_score_intervened(benchmark::State& state) {
  const Lab& L = lab();
  InterventionMap iv = L.manifest.to_interventions();
  for (auto _ : state) benchmark::DoNotOptimize(score_intervened(L.model, L.tokens, iv).reward);
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_forward_score_intervened);

void BM_spearman(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(123);
  std::vector<double> x(static_cast<size_t>(n)), y(static_cast<size_t>(n));
  for (auto& v : x) v = rng.uniform01();
  for (auto& v : y) v = rng.uniform01();
  for (auto _ : state) benchmark::DoNotOptimize(spearman(x, y).rho);
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_spearman)->Arg(128)->Arg(1000);

void BM_rank_neurons(benchmark::State& state) {
  const Lab& L = lab();
  for (auto _ : state) benchmark::DoNotOptimize(rank_neurons(L.matrix, Bias::len).rho.size());
}
BENCHMARK(BM_rank_neurons);

void BM_build_manifest(benchmark::State& state) {
  const Lab& L = lab();
  ProbeCache cache(L.matrix);
  build_manifest(cache, {1, 1, 1, 1, 1});  // warm the rank/median caches
  for (auto _ : state)
    benchmark::DoNotOptimize(build_manifest(cache, {8, 4, 2, 1, 0}).medians.size());
}
BENCHMARK(BM_build_manifest);

void BM_tpe_search(benchmark::State& state) {
  Grids grids = default_k_grids();
  ObjectiveFn planted = [](const KConfig& k) {
    double d = 0.0;
    for (size_t i = 0; i < kBiasCount; ++i) {
      double delta = static_cast<double>(k[i]) - 4.0;
      d += delta * delta;
    }
    return -d;
  };
  for (auto _ : state)
    benchmark::DoNotOptimize(tpe_search(planted, grids, 50, 17).best_objective);
  state.SetItemsProcessed(state.iterations() * 50);
}
BENCHMARK(BM_tpe_search);

void BM_generate_corpus(benchmark::State& state) {
  CorpusConfig cfg = bench_corpus_config();
  cfg.n_pairs = state.range(0);
  for (auto _ : state) benchmark::DoNotOptimize(generate_corpus(cfg).size());
  state.SetItemsProcessed(state.iterations() * cfg.n_pairs);
}
BENCHMARK(BM_generate_corpus)->Arg(64)->Arg(512);

void BM_train_epoch(benchmark::State& state) {
  const Lab& L = lab();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  for (auto _ : state)
    benchmark::DoNotOptimize(train(L.model, L.pairs, tc).loss_curve.back());
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(L.pairs.size()));
}
BENCHMARK(BM_train_epoch);

void BM_evaluate_scored(benchmark::State& state) {
  const Lab& L = lab();
  std::vector<double> ra(L.pairs.size()), rb(L.pairs.size());
  Rng rng(5);
  for (size_t i = 0; i < ra.size(); ++i) {
    ra[i] = rng.uniform01();
    rb[i] = rng.uniform01();
  }
  for (auto _ : state)
    benchmark::DoNotOptimize(evaluate_scored(ra, rb, L.pairs, Method::vanilla).overall.accuracy);
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(L.pairs.size()));
}
BENCHMARK(BM_evaluate_scored);

}  // namespace

BENCHMARK_MAIN();
