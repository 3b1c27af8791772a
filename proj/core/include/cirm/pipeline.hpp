#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cirm/bench.hpp"
#include "cirm/corpus.hpp"
#include "cirm/search.hpp"
#include "cirm/train.hpp"

namespace cirm {

// Fixed artifact names; every stage reads and writes these under the
// configured working directory.
namespace artifact {
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kInitModel = "model.init.bin";
inline constexpr const char* kModel = "model.bin";
inline constexpr const char* kLossCurve = "loss.csv";
inline constexpr const char* kActivations = "activations.bin";
inline constexpr const char* kRankings = "rankings.csv";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kTrace = "trace.csv";
inline constexpr const char* kTune = "tune.json";
inline constexpr const char* kScores = "scores.jsonl";
inline constexpr const char* kAnnotations = "annotations.jsonl";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kHistogram = "histogram.csv";
}  // namespace artifact

// Hyperparameter-search settings for the tune stage.
struct SearchSettings {
  Grids grids = default_k_grids();
  int64_t budget = 50;          // tpe trial count / grid evaluation cap
  std::string sampler = "tpe";  // "tpe" or "grid"
  uint64_t seed = 0x5ea7c4;

  void validate() const;  // throws Error("bad_config")
  bool operator==(const SearchSettings&) const = default;
};

// Method knobs for the score/annotate/eval stages. The length-penalty alpha
// is tuned on the validation split over lp_alpha_grid (maximizing accuracy on
// the unbiased-length subset, ties to the smallest alpha); an empty grid
// freezes alpha at lp_alpha.
struct ScoringSettings {
  double lp_alpha = 0.001;
  std::vector<double> lp_alpha_grid = {0.0,   0.0005, 0.001, 0.002,
                                       0.005, 0.01,   0.02,  0.05};
  double lwr_tau = 0.3;
  Variant variant = Variant::median;

  void validate() const;
  bool operator==(const ScoringSettings&) const = default;
};

// Split sizes and annotation workload for the evaluation stages.
struct EvalSettings {
  int64_t n_val = 500;
  int64_t n_test = 500;
  int64_t annotation_sets = 500;
  int64_t candidates_per_set = 5;
  uint64_t annotation_seed = 0xa22a;

  void validate() const;
  bool operator==(const EvalSettings&) const = default;
};

// The complete run configuration shared by every subcommand. All seeds are
// explicit; nothing reads the clock or process environment.
struct RunConfig {
  std::string workdir = ".";
  int threads = 1;
  ModelConfig model;
  CorpusConfig corpus;  // n_pairs counts train + val + test together
  TrainConfig train;
  SearchSettings search;
  ScoringSettings scoring;
  EvalSettings eval;

  int64_t n_train() const { return corpus.n_pairs - eval.n_val - eval.n_test; }
  void validate() const;  // module validations plus split-size consistency
  bool operator==(const RunConfig&) const = default;
};

RunConfig default_run_config();

// JSON round trip. Parsing starts from the defaults, merges the file's keys
// over them, rejects unknown keys, and reports which dotted key paths the
// file set (for the startup provenance echo). 64-bit seeds cross as "0x..."
// strings or plain nonnegative integers.
struct LoadedConfig {
  RunConfig config;
  std::vector<std::string> file_keys;
};

LoadedConfig run_config_from_json(std::string_view text);
LoadedConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

// Flat (dotted key, value) view of every leaf setting, used by the startup
// echo and by tests; vocabulary lists are summarized as word counts.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);

// Provenance tag for one effective setting: highest-precedence writer wins
// (flag over file over built-in default).
std::string describe_config(const RunConfig& cfg, const std::vector<std::string>& file_keys,
                            const std::vector<std::string>& flag_keys);

// Positional split of a generated corpus: the first n_train pairs train the
// model, the next n_val drive collection/tuning, the last n_test are held out.
struct CorpusSplits {
  std::vector<LabeledPair> train;
  std::vector<LabeledPair> val;
  std::vector<LabeledPair> test;
};

CorpusSplits split_corpus(std::span<const LabeledPair> all, const RunConfig& cfg);

// Pipeline stages, one per subcommand, in dependency order. Each validates
// the config, checks that its inputs exist (a missing input names the
// subcommand that produces it), verifies artifact lineage hashes, writes its
// outputs under workdir, and returns the paths it wrote. Every stage is
// deterministic: re-running with the same inputs rewrites outputs
// byte-identically.
std::vector<std::string> stage_gen_corpus(const RunConfig& cfg);
std::vector<std::string> stage_init_model(const RunConfig& cfg);
std::vector<std::string> stage_train(const RunConfig& cfg);
std::vector<std::string> stage_collect(const RunConfig& cfg);
std::vector<std::string> stage_identify(const RunConfig& cfg);
std::vector<std::string> stage_tune(const RunConfig& cfg);
std::vector<std::string> stage_score(const RunConfig& cfg);
std::vector<std::string> stage_annotate(const RunConfig& cfg);
std::vector<std::string> stage_eval(const RunConfig& cfg);
std::vector<std::string> stage_report(const RunConfig& cfg);

// All ten stages in order.
std::vector<std::string> run_pipeline(const RunConfig& cfg);

// Inverse of report_to_json, used by the report stage to assemble the final
// report from the persisted evaluation grid.
EvalReport report_from_json(std::string_view text);

// Annotation statistics recomputed from persisted annotation rows (the
// degenerate flag is read from each row's extra fields).
AnnotationStats annotation_stats_from_pairs(std::span<const LabeledPair> rows, Method label);

}  // namespace cirm
