#include "cirm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirm/error.hpp"
#include "cirm/features.hpp"
#include "cirm/hash.hpp"
#include "cirm/log.hpp"
#include "cirm/parallel.hpp"
#include "cirm/probe.hpp"
#include "cirm/scoring.hpp"
#include "cirm/serial.hpp"

namespace cirm {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration: validation and defaults
// ---------------------------------------------------------------------------

void SearchSettings::validate() const {
  if (budget < 1) throw Error("bad_config", "search.budget must be >= 1");
  if (sampler != "tpe" && sampler != "grid")
    throw Error("bad_config", "search.sampler must be \"tpe\" or \"grid\", got \"" + sampler + "\"");
  for (size_t b = 0; b < kBiasCount; ++b) {
    if (grids[b].empty())
      throw Error("bad_config", "search.grids." + std::string(bias_name(kAllBiases[b])) +
                                    " must list at least one k value");
    for (int64_t k : grids[b])
      if (k < 0)
        throw Error("bad_config", "search.grids." + std::string(bias_name(kAllBiases[b])) +
                                      " has a negative k");
  }
}

void ScoringSettings::validate() const {
  if (!(lp_alpha >= 0.0)) throw Error("bad_config", "scoring.lp_alpha must be >= 0");
  for (double a : lp_alpha_grid)
    if (!(a >= 0.0)) throw Error("bad_config", "scoring.lp_alpha_grid has a negative alpha");
  if (!(lwr_tau > 0.0) || !(lwr_tau <= 1.0))
    throw Error("bad_config", "scoring.lwr_tau must be in (0, 1]");
}

void EvalSettings::validate() const {
  if (n_val < 1) throw Error("bad_config", "eval.n_val must be >= 1");
  if (n_test < 1) throw Error("bad_config", "eval.n_test must be >= 1");
  if (annotation_sets < 0) throw Error("bad_config", "eval.annotation_sets must be >= 0");
  if (candidates_per_set < 2)
    throw Error("bad_config", "eval.candidates_per_set must be >= 2");
}

void RunConfig::validate() const {
  if (workdir.empty()) throw Error("bad_config", "workdir must not be empty");
  if (threads < 1) throw Error("bad_config", "threads must be >= 1");
  model.validate();
  corpus.validate();
  train.validate();
  search.validate();
  scoring.validate();
  eval.validate();
  if (n_train() < 1)
    throw Error("bad_config", "corpus.n_pairs (" + std::to_string(corpus.n_pairs) +
                                  ") must exceed eval.n_val + eval.n_test (" +
                                  std::to_string(eval.n_val + eval.n_test) + ")");
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.corpus = default_corpus_config();
  return cfg;
}

// ---------------------------------------------------------------------------
// Configuration: JSON round trip with unknown-key rejection
// ---------------------------------------------------------------------------

namespace {

int64_t get_i64(const json& v, const std::string& path) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw Error("bad_config", path + ": expected an integer");
  return v.get<int64_t>();
}

double get_f64(const json& v, const std::string& path) {
  if (!v.is_number()) throw Error("bad_config", path + ": expected a number");
  return v.get<double>();
}

std::string get_str(const json& v, const std::string& path) {
  if (!v.is_string()) throw Error("bad_config", path + ": expected a string");
  return v.get<std::string>();
}

uint64_t get_u64(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<uint64_t>();
  if (v.is_number_integer()) {
    int64_t x = v.get<int64_t>();
    if (x >= 0) return static_cast<uint64_t>(x);
  }
  if (v.is_string()) {
    try {
      return parse_hex_u64(v.get<std::string>());
    } catch (const Error& e) {
      throw Error("bad_config", path + ": " + e.what());
    }
  }
  throw Error("bad_config", path + ": expected a nonnegative integer or \"0x...\" string");
}

std::vector<std::string> get_str_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw Error("bad_config", path + ": expected an array of strings");
  std::vector<std::string> out;
  out.reserve(v.size());
  for (const json& e : v) out.push_back(get_str(e, path));
  return out;
}

std::vector<int64_t> get_i64_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw Error("bad_config", path + ": expected an array of integers");
  std::vector<int64_t> out;
  out.reserve(v.size());
  for (const json& e : v) out.push_back(get_i64(e, path));
  return out;
}

std::vector<double> get_f64_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw Error("bad_config", path + ": expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (const json& e : v) out.push_back(get_f64(e, path));
  return out;
}

// One config section: tracks which keys the file set (dotted paths) and
// rejects keys outside the whitelist built up by has() calls.
class Section {
 public:
  Section(const json& j, std::string prefix, std::vector<std::string>& keys)
      : j_(j), prefix_(std::move(prefix)), keys_(keys) {
    if (!j_.is_object()) throw Error("bad_config", prefix_ + ": expected an object");
  }

  bool has(const char* name) {
    known_.emplace_back(name);
    return j_.contains(name);
  }

  const json& at(const char* name) {
    keys_.push_back(path(name));
    return j_.at(name);
  }

  std::string path(const char* name) const { return prefix_ + "." + name; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (std::find(known_.begin(), known_.end(), key) == known_.end())
        throw Error("bad_config", "unknown key: " + prefix_ + "." + key);
  }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string>& keys_;
  std::vector<std::string> known_;
};

// Per-bias object like {"len": ..., "bold": ...}; partial objects merge over
// the current values.
template <typename T, typename Fn>
void merge_per_bias(const json& v, const std::string& path, std::array<T, kBiasCount>& out,
                    std::vector<std::string>& keys, const Fn& get) {
  if (!v.is_object()) throw Error("bad_config", path + ": expected an object keyed by bias name");
  for (const auto& [key, value] : v.items()) {
    Bias b;
    try {
      b = bias_from_name(key);
    } catch (const Error&) {
      throw Error("bad_config", "unknown key: " + path + "." + key);
    }
    out[static_cast<size_t>(b)] = get(value, path + "." + key);
    keys.push_back(path + "." + key);
  }
}

void parse_model(const json& j, ModelConfig& m, std::vector<std::string>& keys) {
  Section s(j, "model", keys);
  if (s.has("vocab_size")) m.vocab_size = get_i64(s.at("vocab_size"), s.path("vocab_size"));
  if (s.has("d_model")) m.d_model = get_i64(s.at("d_model"), s.path("d_model"));
  if (s.has("n_layers")) m.n_layers = get_i64(s.at("n_layers"), s.path("n_layers"));
  if (s.has("n_heads")) m.n_heads = get_i64(s.at("n_heads"), s.path("n_heads"));
  if (s.has("d_ff")) m.d_ff = get_i64(s.at("d_ff"), s.path("d_ff"));
  if (s.has("max_seq_len")) m.max_seq_len = get_i64(s.at("max_seq_len"), s.path("max_seq_len"));
  if (s.has("init_seed")) m.init_seed = get_u64(s.at("init_seed"), s.path("init_seed"));
  s.finish();
}

void parse_corpus(const json& j, CorpusConfig& c, std::vector<std::string>& keys) {
  Section s(j, "corpus", keys);
  if (s.has("n_pairs")) c.n_pairs = get_i64(s.at("n_pairs"), s.path("n_pairs"));
  if (s.has("bias_strength"))
    merge_per_bias(s.at("bias_strength"), s.path("bias_strength"), c.bias_strength, keys, get_f64);
  if (s.has("good_vocab")) c.good_vocab = get_str_array(s.at("good_vocab"), s.path("good_vocab"));
  if (s.has("noise_vocab"))
    c.noise_vocab = get_str_array(s.at("noise_vocab"), s.path("noise_vocab"));
  if (s.has("query_vocab"))
    c.query_vocab = get_str_array(s.at("query_vocab"), s.path("query_vocab"));
  if (s.has("pad_vocab")) c.pad_vocab = get_str_array(s.at("pad_vocab"), s.path("pad_vocab"));
  if (s.has("min_content_words"))
    c.min_content_words = get_i64(s.at("min_content_words"), s.path("min_content_words"));
  if (s.has("max_content_words"))
    c.max_content_words = get_i64(s.at("max_content_words"), s.path("max_content_words"));
  if (s.has("min_query_words"))
    c.min_query_words = get_i64(s.at("min_query_words"), s.path("min_query_words"));
  if (s.has("max_query_words"))
    c.max_query_words = get_i64(s.at("max_query_words"), s.path("max_query_words"));
  if (s.has("min_len_pad")) c.min_len_pad = get_i64(s.at("min_len_pad"), s.path("min_len_pad"));
  if (s.has("max_len_pad")) c.max_len_pad = get_i64(s.at("max_len_pad"), s.path("max_len_pad"));
  if (s.has("seed")) c.seed = get_u64(s.at("seed"), s.path("seed"));
  s.finish();
}

void parse_train(const json& j, TrainConfig& t, std::vector<std::string>& keys) {
  Section s(j, "train", keys);
  if (s.has("epochs")) t.epochs = get_i64(s.at("epochs"), s.path("epochs"));
  if (s.has("batch_size")) t.batch_size = get_i64(s.at("batch_size"), s.path("batch_size"));
  if (s.has("learning_rate"))
    t.learning_rate = get_f64(s.at("learning_rate"), s.path("learning_rate"));
  if (s.has("optimizer")) {
    std::string name = get_str(s.at("optimizer"), s.path("optimizer"));
    try {
      t.optimizer = optimizer_from_name(name);
    } catch (const Error& e) {
      throw Error("bad_config", s.path("optimizer") + ": " + e.what());
    }
  }
  if (s.has("clip_norm")) t.clip_norm = get_f64(s.at("clip_norm"), s.path("clip_norm"));
  if (s.has("seed")) t.seed = get_u64(s.at("seed"), s.path("seed"));
  s.finish();
}

void parse_search(const json& j, SearchSettings& se, std::vector<std::string>& keys) {
  Section s(j, "search", keys);
  if (s.has("budget")) se.budget = get_i64(s.at("budget"), s.path("budget"));
  if (s.has("sampler")) se.sampler = get_str(s.at("sampler"), s.path("sampler"));
  if (s.has("seed")) se.seed = get_u64(s.at("seed"), s.path("seed"));
  if (s.has("grids"))
    merge_per_bias(s.at("grids"), s.path("grids"), se.grids, keys, get_i64_array);
  s.finish();
}

void parse_scoring(const json& j, ScoringSettings& sc, std::vector<std::string>& keys) {
  Section s(j, "scoring", keys);
  if (s.has("lp_alpha")) sc.lp_alpha = get_f64(s.at("lp_alpha"), s.path("lp_alpha"));
  if (s.has("lp_alpha_grid"))
    sc.lp_alpha_grid = get_f64_array(s.at("lp_alpha_grid"), s.path("lp_alpha_grid"));
  if (s.has("lwr_tau")) sc.lwr_tau = get_f64(s.at("lwr_tau"), s.path("lwr_tau"));
  if (s.has("variant")) {
    std::string name = get_str(s.at("variant"), s.path("variant"));
    try {
      sc.variant = variant_from_name(name);
    } catch (const Error& e) {
      throw Error("bad_config", s.path("variant") + ": " + e.what());
    }
  }
  s.finish();
}

void parse_eval(const json& j, EvalSettings& ev, std::vector<std::string>& keys) {
  Section s(j, "eval", keys);
  if (s.has("n_val")) ev.n_val = get_i64(s.at("n_val"), s.path("n_val"));
  if (s.has("n_test")) ev.n_test = get_i64(s.at("n_test"), s.path("n_test"));
  if (s.has("annotation_sets"))
    ev.annotation_sets = get_i64(s.at("annotation_sets"), s.path("annotation_sets"));
  if (s.has("candidates_per_set"))
    ev.candidates_per_set = get_i64(s.at("candidates_per_set"), s.path("candidates_per_set"));
  if (s.has("annotation_seed"))
    ev.annotation_seed = get_u64(s.at("annotation_seed"), s.path("annotation_seed"));
  s.finish();
}

json per_bias_to_json(const std::array<double, kBiasCount>& a) {
  json j;
  for (size_t b = 0; b < kBiasCount; ++b) j[std::string(bias_name(kAllBiases[b]))] = a[b];
  return j;
}

}  // namespace

LoadedConfig run_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("bad_config", std::string("configuration is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("bad_config", "configuration must be a JSON object");

  LoadedConfig out;
  out.config = default_run_config();
  RunConfig& cfg = out.config;
  std::vector<std::string>& keys = out.file_keys;

  static constexpr const char* kSections[] = {"workdir", "threads", "model",   "corpus",
                                              "train",   "search",  "scoring", "eval"};
  for (const auto& [key, value] : j.items())
    if (std::find(std::begin(kSections), std::end(kSections), key) == std::end(kSections))
      throw Error("bad_config", "unknown key: " + key);

  if (j.contains("workdir")) {
    cfg.workdir = get_str(j.at("workdir"), "workdir");
    keys.push_back("workdir");
  }
  if (j.contains("threads")) {
    cfg.threads = static_cast<int>(get_i64(j.at("threads"), "threads"));
    keys.push_back("threads");
  }
  if (j.contains("model")) parse_model(j.at("model"), cfg.model, keys);
  if (j.contains("corpus")) parse_corpus(j.at("corpus"), cfg.corpus, keys);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train, keys);
  if (j.contains("search")) parse_search(j.at("search"), cfg.search, keys);
  if (j.contains("scoring")) parse_scoring(j.at("scoring"), cfg.scoring, keys);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval, keys);
  return out;
}

LoadedConfig load_run_config(const std::string& path) {
  return run_config_from_json(read_file(path));
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["workdir"] = cfg.workdir;
  j["threads"] = cfg.threads;

  json m;
  m["vocab_size"] = cfg.model.vocab_size;
  m["d_model"] = cfg.model.d_model;
  m["n_layers"] = cfg.model.n_layers;
  m["n_heads"] = cfg.model.n_heads;
  m["d_ff"] = cfg.model.d_ff;
  m["max_seq_len"] = cfg.model.max_seq_len;
  m["init_seed"] = hex_u64(cfg.model.init_seed);
  j["model"] = m;

  json c;
  c["n_pairs"] = cfg.corpus.n_pairs;
  c["bias_strength"] = per_bias_to_json(cfg.corpus.bias_strength);
  c["good_vocab"] = cfg.corpus.good_vocab;
  c["noise_vocab"] = cfg.corpus.noise_vocab;
  c["query_vocab"] = cfg.corpus.query_vocab;
  c["pad_vocab"] = cfg.corpus.pad_vocab;
  c["min_content_words"] = cfg.corpus.min_content_words;
  c["max_content_words"] = cfg.corpus.max_content_words;
  c["min_query_words"] = cfg.corpus.min_query_words;
  c["max_query_words"] = cfg.corpus.max_query_words;
  c["min_len_pad"] = cfg.corpus.min_len_pad;
  c["max_len_pad"] = cfg.corpus.max_len_pad;
  c["seed"] = hex_u64(cfg.corpus.seed);
  j["corpus"] = c;

  json t;
  t["epochs"] = cfg.train.epochs;
  t["batch_size"] = cfg.train.batch_size;
  t["learning_rate"] = cfg.train.learning_rate;
  t["optimizer"] = std::string(optimizer_name(cfg.train.optimizer));
  t["clip_norm"] = cfg.train.clip_norm;
  t["seed"] = hex_u64(cfg.train.seed);
  j["train"] = t;

  json se;
  se["budget"] = cfg.search.budget;
  se["sampler"] = cfg.search.sampler;
  se["seed"] = hex_u64(cfg.search.seed);
  json grids;
  for (size_t b = 0; b < kBiasCount; ++b)
    grids[std::string(bias_name(kAllBiases[b]))] = cfg.search.grids[b];
  se["grids"] = grids;
  j["search"] = se;

  json sc;
  sc["lp_alpha"] = cfg.scoring.lp_alpha;
  sc["lp_alpha_grid"] = cfg.scoring.lp_alpha_grid;
  sc["lwr_tau"] = cfg.scoring.lwr_tau;
  sc["variant"] = std::string(variant_name(cfg.scoring.variant));
  j["scoring"] = sc;

  json ev;
  ev["n_val"] = cfg.eval.n_val;
  ev["n_test"] = cfg.eval.n_test;
  ev["annotation_sets"] = cfg.eval.annotation_sets;
  ev["candidates_per_set"] = cfg.eval.candidates_per_set;
  ev["annotation_seed"] = hex_u64(cfg.eval.annotation_seed);
  j["eval"] = ev;

  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Configuration: flat echo with provenance
// ---------------------------------------------------------------------------

namespace {

void flatten(const json& j, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [key, value] : j.items())
      flatten(value, prefix.empty() ? key : prefix + "." + key, out);
    return;
  }
  if (j.is_array()) {
    if (!j.empty() && j.front().is_string()) {
      out.emplace_back(prefix, std::to_string(j.size()) + " words");
      return;
    }
    std::string s = "[";
    for (size_t i = 0; i < j.size(); ++i) {
      if (i) s += " ";
      s += j[i].dump();
    }
    s += "]";
    out.emplace_back(prefix, s);
    return;
  }
  if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
    return;
  }
  out.emplace_back(prefix, j.dump());
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  json j = json::parse(run_config_to_json(cfg));
  std::vector<std::pair<std::string, std::string>> out;
  flatten(j, "", out);
  return out;
}

std::string describe_config(const RunConfig& cfg, const std::vector<std::string>& file_keys,
                            const std::vector<std::string>& flag_keys) {
  auto contains = [](const std::vector<std::string>& v, const std::string& k) {
    return std::find(v.begin(), v.end(), k) != v.end();
  };
  std::string out;
  for (const auto& [key, value] : config_entries(cfg)) {
    const char* source = contains(flag_keys, key)   ? "flag"
                         : contains(file_keys, key) ? "file"
                                                    : "default";
    out += key + " = " + value + " (" + source + ")\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus splits and artifact plumbing
// ---------------------------------------------------------------------------

CorpusSplits split_corpus(std::span<const LabeledPair> all, const RunConfig& cfg) {
  if (static_cast<int64_t>(all.size()) != cfg.corpus.n_pairs)
    throw Error("lineage_mismatch",
                "corpus holds " + std::to_string(all.size()) +
                    " pairs but the configuration expects " + std::to_string(cfg.corpus.n_pairs) +
                    "; re-run `gen-corpus`");
  const int64_t n_train = cfg.n_train();
  if (n_train < 1)
    throw Error("bad_config", "corpus.n_pairs must exceed eval.n_val + eval.n_test");
  CorpusSplits s;
  auto cut = [&](int64_t lo, int64_t hi) {
    return std::vector<LabeledPair>(all.begin() + lo, all.begin() + hi);
  };
  s.train = cut(0, n_train);
  s.val = cut(n_train, n_train + cfg.eval.n_val);
  s.test = cut(n_train + cfg.eval.n_val, cfg.corpus.n_pairs);
  return s;
}

namespace {

std::string artifact_path(const RunConfig& cfg, const char* name) {
  return (fs::path(cfg.workdir) / name).string();
}

std::string require_artifact(const RunConfig& cfg, const char* name, const char* producer) {
  std::string p = artifact_path(cfg, name);
  if (!fs::exists(p))
    throw Error("missing_input", p + " not found; run `" + producer + "` first");
  return p;
}

void ensure_workdir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.workdir, ec);
  if (ec) throw Error("io_error", "cannot create workdir " + cfg.workdir + ": " + ec.message());
}

Model load_model_checked(const RunConfig& cfg, const char* name, const char* producer) {
  Model m = load_model(require_artifact(cfg, name, producer));
  if (!(m.config == cfg.model))
    throw Error("lineage_mismatch", std::string(name) +
                                        " was built with a different model configuration; "
                                        "re-run `" +
                                        producer + "`");
  return m;
}

std::vector<LabeledPair> load_corpus(const RunConfig& cfg) {
  return read_jsonl(require_artifact(cfg, artifact::kCorpus, "gen-corpus"));
}

std::vector<PreferencePair> to_preference_pairs(std::span<const LabeledPair> pairs) {
  std::vector<PreferencePair> out;
  out.reserve(pairs.size());
  for (const LabeledPair& lp : pairs) out.push_back(lp.pair);
  return out;
}

// Vanilla rewards for both sides of each pair, in parallel.
void base_rewards(const Model& m, std::span<const LabeledPair> pairs, int threads,
                  std::vector<double>& ra, std::vector<double>& rb) {
  RewardFn base = make_reward_fn(m, Method::vanilla, {});
  ra.assign(pairs.size(), 0.0);
  rb.assign(pairs.size(), 0.0);
  parallel_for(static_cast<int64_t>(pairs.size()), threads, [&](int64_t i) {
    const PreferencePair& p = pairs[static_cast<size_t>(i)].pair;
    ra[static_cast<size_t>(i)] = base({p.query, p.response_a});
    rb[static_cast<size_t>(i)] = base({p.query, p.response_b});
  });
}

// Length-regression calibration fitted on the validation split's vanilla
// rewards (both sides of every pair contribute a point).
LwrCalibration fit_lwr(const Model& m, std::span<const LabeledPair> val, double tau,
                       int threads) {
  std::vector<double> ra, rb;
  base_rewards(m, val, threads, ra, rb);
  std::vector<std::pair<double, double>> points;
  points.reserve(2 * val.size());
  for (size_t i = 0; i < val.size(); ++i) {
    points.emplace_back(static_cast<double>(val[i].features_a.len), ra[i]);
    points.emplace_back(static_cast<double>(val[i].features_b.len), rb[i]);
  }
  return lwr_calibrate(std::move(points), tau);
}

struct TuneRecord {
  double lp_alpha = 0.0;
  uint64_t corpus_hash = 0;
  uint64_t manifest_hash = 0;
  uint64_t model_checksum = 0;
};

TuneRecord read_tune_record(const RunConfig& cfg) {
  std::string text = read_file(require_artifact(cfg, artifact::kTune, "tune"));
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("bad_config", std::string("tune.json is not valid JSON: ") + e.what());
  }
  try {
    TuneRecord r;
    r.lp_alpha = j.at("lp_alpha").get<double>();
    r.corpus_hash = parse_hex_u64(j.at("corpus_hash").get<std::string>());
    r.manifest_hash = parse_hex_u64(j.at("manifest_hash").get<std::string>());
    r.model_checksum = parse_hex_u64(j.at("model_checksum").get<std::string>());
    return r;
  } catch (const json::exception& e) {
    throw Error("bad_config", std::string("tune.json is missing fields: ") + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

std::vector<std::string> stage_gen_corpus(const RunConfig& cfg) {
  cfg.validate();
  ensure_workdir(cfg);
  std::vector<LabeledPair> pairs = generate_corpus(cfg.corpus);
  std::string path = artifact_path(cfg, artifact::kCorpus);
  write_jsonl(pairs, path);
  log_info("gen-corpus: wrote " + std::to_string(pairs.size()) + " pairs to " + path);
  return {path};
}

std::vector<std::string> stage_init_model(const RunConfig& cfg) {
  cfg.validate();
  ensure_workdir(cfg);
  Model m = init_model(cfg.model);
  std::string path = artifact_path(cfg, artifact::kInitModel);
  save_model(m, path);
  log_info("init-model: wrote " + path + " (checksum " + hex_u64(model_checksum(m)) + ")");
  return {path};
}

std::vector<std::string> stage_train(const RunConfig& cfg) {
  cfg.validate();
  std::vector<LabeledPair> pairs = load_corpus(cfg);
  CorpusSplits splits = split_corpus(pairs, cfg);
  Model m0 = load_model_checked(cfg, artifact::kInitModel, "init-model");

  log_info("train: " + std::to_string(cfg.train.epochs) + " epochs on " +
           std::to_string(splits.train.size()) + " pairs");
  TrainResult tr = train(m0, splits.train, cfg.train);

  std::string model_path = artifact_path(cfg, artifact::kModel);
  std::string loss_path = artifact_path(cfg, artifact::kLossCurve);
  save_model(tr.model, model_path);
  write_loss_csv(tr.loss_curve, loss_path);
  log_info("train: final mean loss " +
           (tr.loss_curve.empty() ? std::string("n/a") : format_double(tr.loss_curve.back())));
  return {model_path, loss_path};
}

std::vector<std::string> stage_collect(const RunConfig& cfg) {
  cfg.validate();
  Model m = load_model_checked(cfg, artifact::kModel, "train");
  std::vector<LabeledPair> pairs = load_corpus(cfg);
  CorpusSplits splits = split_corpus(pairs, cfg);

  std::vector<QueryResponse> val_rows = to_query_responses(splits.val);
  ActivationMatrix matrix = collect_activations(m, val_rows, {}, cfg.threads);
  std::string path = artifact_path(cfg, artifact::kActivations);
  save_matrix(matrix, path);
  log_info("collect: " + std::to_string(matrix.rows) + " rows x " + std::to_string(matrix.cols) +
           " neurons");
  return {path};
}

std::vector<std::string> stage_identify(const RunConfig& cfg) {
  cfg.validate();
  ActivationMatrix matrix = load_matrix(require_artifact(cfg, artifact::kActivations, "collect"));
  ActivationLayout layout(matrix.config);

  std::string csv = "bias,address,rho,degenerate\n";
  for (Bias b : kAllBiases) {
    NeuronRanking r = rank_neurons(matrix, b);
    for (int64_t col = 0; col < matrix.cols; ++col) {
      csv += std::string(bias_name(b)) + "," + to_string(layout.address_at(col)) + "," +
             format_double(r.rho[static_cast<size_t>(col)]) + "," +
             (r.degenerate[static_cast<size_t>(col)] ? "1" : "0") + "\n";
    }
  }
  std::string path = artifact_path(cfg, artifact::kRankings);
  write_file(path, csv);
  log_info("identify: ranked " + std::to_string(matrix.cols) + " neurons per bias");
  return {path};
}

std::vector<std::string> stage_tune(const RunConfig& cfg) {
  cfg.validate();
  Model m = load_model_checked(cfg, artifact::kModel, "train");
  ActivationMatrix matrix = load_matrix(require_artifact(cfg, artifact::kActivations, "collect"));
  if (matrix.model_checksum != model_checksum(m))
    throw Error("lineage_mismatch",
                "activations.bin was collected from a different model; re-run `collect`");

  std::vector<LabeledPair> pairs = load_corpus(cfg);
  CorpusSplits splits = split_corpus(pairs, cfg);
  std::vector<QueryResponse> val_rows = to_query_responses(splits.val);
  if (matrix.valset_hash != dataset_content_hash(val_rows))
    throw Error("lineage_mismatch",
                "activations.bin was collected from a different validation split; "
                "re-run `collect`");

  // Intervention size search on validation accuracy.
  ProbeCache cache(matrix);
  std::vector<PreferencePair> val_pairs = to_preference_pairs(splits.val);
  ObjectiveFn obj = make_objective(m, cache, val_pairs);
  log_info("tune: " + cfg.search.sampler + " search, budget " +
           std::to_string(cfg.search.budget));
  SearchResult res = cfg.search.sampler == "grid"
                         ? grid_search(obj, cfg.search.grids, cfg.search.budget)
                         : tpe_search(obj, cfg.search.grids, cfg.search.budget, cfg.search.seed);

  InterventionManifest manifest = build_manifest(cache, res.best);
  std::string manifest_path = artifact_path(cfg, artifact::kManifest);
  std::string trace_path = artifact_path(cfg, artifact::kTrace);
  save_manifest(manifest, manifest_path);
  write_trace_csv(res.trace, trace_path);

  // Length-penalty strength: sweep the grid on validation, maximizing
  // accuracy on the pairs whose gold response is strictly shorter (the
  // subset the penalty exists to fix); ties keep the smallest alpha. An
  // empty subset falls back to overall validation accuracy.
  std::vector<double> alpha_grid = cfg.scoring.lp_alpha_grid;
  if (alpha_grid.empty()) alpha_grid.push_back(cfg.scoring.lp_alpha);
  std::sort(alpha_grid.begin(), alpha_grid.end());
  alpha_grid.erase(std::unique(alpha_grid.begin(), alpha_grid.end()), alpha_grid.end());

  std::vector<double> ra, rb;
  base_rewards(m, splits.val, cfg.threads, ra, rb);
  double best_alpha = alpha_grid.front();
  double best_metric = -1.0;
  constexpr size_t kLen = 0;  // canonical bias order starts with length
  for (double alpha : alpha_grid) {
    std::vector<double> la(ra.size()), lb(rb.size());
    for (size_t i = 0; i < ra.size(); ++i) {
      const LabeledPair& lp = splits.val[i];
      la[i] = lp_score(ra[i], {lp.pair.query, lp.pair.response_a}, alpha);
      lb[i] = lp_score(rb[i], {lp.pair.query, lp.pair.response_b}, alpha);
    }
    MethodEval ev = evaluate_scored(la, lb, splits.val, Method::lp);
    double metric =
        ev.unbiased[kLen].defined ? ev.unbiased[kLen].accuracy : ev.overall.accuracy;
    if (metric > best_metric) {
      best_metric = metric;
      best_alpha = alpha;
    }
  }

  json t;
  t["best_objective"] = res.best_objective;
  t["corpus_hash"] = hex_u64(corpus_hash(pairs));
  json k;
  for (size_t b = 0; b < kBiasCount; ++b)
    k[std::string(bias_name(kAllBiases[b]))] = res.best[b];
  t["k"] = k;
  t["lp_alpha"] = best_alpha;
  t["lp_alpha_grid"] = alpha_grid;
  t["lp_alpha_metric"] = best_metric;
  t["manifest_hash"] = hex_u64(fnv1a64(read_file(manifest_path)));
  t["model_checksum"] = hex_u64(model_checksum(m));
  t["sampler"] = cfg.search.sampler;
  t["trials"] = static_cast<int64_t>(res.trace.trials.size());
  t["valset_hash"] = hex_u64(matrix.valset_hash);
  std::string tune_path = artifact_path(cfg, artifact::kTune);
  write_file(tune_path, t.dump(2) + "\n");

  log_info("tune: best objective " + format_double(res.best_objective) + ", lp_alpha " +
           format_double(best_alpha));
  return {manifest_path, trace_path, tune_path};
}

namespace {

// Shared lineage gate for the stages that consume tune outputs: the recorded
// hashes must match the model, corpus, and manifest artifacts on disk.
struct TunedInputs {
  Model model;
  InterventionManifest manifest;
  TuneRecord record;
  std::vector<LabeledPair> pairs;
  CorpusSplits splits;
};

TunedInputs load_tuned_inputs(const RunConfig& cfg) {
  TunedInputs in;
  in.model = load_model_checked(cfg, artifact::kModel, "train");
  in.record = read_tune_record(cfg);
  if (in.record.model_checksum != model_checksum(in.model))
    throw Error("lineage_mismatch",
                "tune.json records a different model checksum; re-run `tune`");

  std::string manifest_path = require_artifact(cfg, artifact::kManifest, "tune");
  if (fnv1a64(read_file(manifest_path)) != in.record.manifest_hash)
    throw Error("lineage_mismatch",
                "manifest.json does not match the hash recorded by `tune`; re-run `tune`");
  in.manifest = load_manifest(manifest_path);

  in.pairs = load_corpus(cfg);
  if (corpus_hash(in.pairs) != in.record.corpus_hash)
    throw Error("lineage_mismatch",
                "corpus.jsonl changed since `tune` ran; re-run `tune`");
  in.splits = split_corpus(in.pairs, cfg);
  return in;
}

json scored_to_json(const ScoredPair& sp) {
  json j;
  j["choice"] = sp.choice == Gold::A ? "A" : "B";
  j["reward_a"] = sp.reward_a;
  j["reward_b"] = sp.reward_b;
  j["tie"] = sp.tie;
  return j;
}

}  // namespace

std::vector<std::string> stage_score(const RunConfig& cfg) {
  cfg.validate();
  TunedInputs in = load_tuned_inputs(cfg);
  const std::vector<LabeledPair>& test = in.splits.test;

  LwrCalibration cal = fit_lwr(in.model, in.splits.val, cfg.scoring.lwr_tau, cfg.threads);

  std::vector<double> ra, rb;
  base_rewards(in.model, test, cfg.threads, ra, rb);
  std::vector<ScoredPair> cde(test.size());
  parallel_for(static_cast<int64_t>(test.size()), cfg.threads, [&](int64_t i) {
    cde[static_cast<size_t>(i)] = intervention_variant(
        in.model, test[static_cast<size_t>(i)].pair, in.manifest, cfg.scoring.variant);
  });

  json header;
  header["alpha"] = in.record.lp_alpha;
  header["corpus_hash"] = hex_u64(in.record.corpus_hash);
  header["lwr_tau"] = cfg.scoring.lwr_tau;
  header["manifest_hash"] = hex_u64(in.record.manifest_hash);
  header["model_checksum"] = hex_u64(in.record.model_checksum);
  header["n_pairs"] = static_cast<int64_t>(test.size());
  header["split"] = "test";
  header["variant"] = std::string(variant_name(cfg.scoring.variant));

  std::string out = header.dump() + "\n";
  for (size_t i = 0; i < test.size(); ++i) {
    const LabeledPair& lp = test[i];
    json methods;
    methods["vanilla"] = scored_to_json(make_scored(ra[i], rb[i], Method::vanilla));
    methods["cirm"] = scored_to_json(cde[i]);
    double la = lp_score(ra[i], {lp.pair.query, lp.pair.response_a}, in.record.lp_alpha);
    double lb = lp_score(rb[i], {lp.pair.query, lp.pair.response_b}, in.record.lp_alpha);
    methods["lp"] = scored_to_json(make_scored(la, lb, Method::lp));
    double wa = cal.debias(ra[i], static_cast<double>(lp.features_a.len));
    double wb = cal.debias(rb[i], static_cast<double>(lp.features_b.len));
    methods["lwr"] = scored_to_json(make_scored(wa, wb, Method::lwr));

    json row;
    row["index"] = static_cast<int64_t>(i);
    row["methods"] = methods;
    out += row.dump() + "\n";
  }
  std::string path = artifact_path(cfg, artifact::kScores);
  write_file(path, out);
  log_info("score: " + std::to_string(test.size()) + " test pairs, 4 methods");
  return {path};
}

std::vector<std::string> stage_annotate(const RunConfig& cfg) {
  cfg.validate();
  TunedInputs in = load_tuned_inputs(cfg);
  LwrCalibration cal = fit_lwr(in.model, in.splits.val, cfg.scoring.lwr_tau, cfg.threads);

  std::vector<CandidateSet> sets = generate_candidate_sets(
      cfg.corpus, cfg.eval.annotation_sets, cfg.eval.candidates_per_set, cfg.eval.annotation_seed);

  // One base and one intervened forward per candidate; the penalty and
  // regression methods reuse the base rewards.
  std::vector<std::pair<size_t, size_t>> jobs;
  for (size_t s = 0; s < sets.size(); ++s)
    for (size_t c = 0; c < sets[s].responses.size(); ++c) jobs.emplace_back(s, c);
  RewardFn base = make_reward_fn(in.model, Method::vanilla, {});
  MethodSettings cirm_settings;
  cirm_settings.manifest = &in.manifest;
  RewardFn cde = make_reward_fn(in.model, Method::cirm, cirm_settings);

  std::vector<double> base_flat(jobs.size()), cde_flat(jobs.size());
  parallel_for(static_cast<int64_t>(jobs.size()), cfg.threads, [&](int64_t jx) {
    auto [s, c] = jobs[static_cast<size_t>(jx)];
    QueryResponse qr{sets[s].query, sets[s].responses[c]};
    base_flat[static_cast<size_t>(jx)] = base(qr);
    cde_flat[static_cast<size_t>(jx)] = cde(qr);
  });

  std::array<std::vector<std::vector<double>>, kMethodCount> tables;
  for (auto& t : tables) t.resize(sets.size());
  for (size_t jx = 0; jx < jobs.size(); ++jx) {
    auto [s, c] = jobs[jx];
    QueryResponse qr{sets[s].query, sets[s].responses[c]};
    double len = static_cast<double>(utf8_scalar_count(qr.response));
    for (Method m : kAllMethods) {
      double r = 0.0;
      switch (m) {
        case Method::vanilla: r = base_flat[jx]; break;
        case Method::cirm: r = cde_flat[jx]; break;
        case Method::lp: r = lp_score(base_flat[jx], qr, in.record.lp_alpha); break;
        case Method::lwr: r = cal.debias(base_flat[jx], len); break;
      }
      tables[static_cast<size_t>(m)][s].push_back(r);
    }
  }

  std::vector<AnnotatedPair> all;
  all.reserve(kMethodCount * sets.size());
  for (Method m : kAllMethods) {
    std::vector<AnnotatedPair> got = annotate_scored(tables[static_cast<size_t>(m)], sets, m);
    all.insert(all.end(), std::make_move_iterator(got.begin()),
               std::make_move_iterator(got.end()));
  }
  std::string path = artifact_path(cfg, artifact::kAnnotations);
  write_annotations_jsonl(all, path);
  log_info("annotate: " + std::to_string(sets.size()) + " sets x " +
           std::to_string(kMethodCount) + " methods");
  return {path};
}

namespace {

struct ScoresFile {
  json header;
  // Per method, rewards for both sides of every row in order.
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> rewards;
  int64_t n_rows = 0;
};

ScoresFile read_scores(const std::string& path) {
  std::string text = read_file(path);
  ScoresFile sf;
  size_t pos = 0;
  int64_t line_no = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    ++line_no;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error("bad_jsonl",
                  "scores line " + std::to_string(line_no) + ": " + e.what());
    }
    if (line_no == 1) {
      sf.header = j;
      continue;
    }
    if (!j.contains("methods") || !j.at("methods").is_object())
      throw Error("bad_jsonl", "scores line " + std::to_string(line_no) + ": missing methods");
    for (const auto& [name, cell] : j.at("methods").items()) {
      auto& [ra, rb] = sf.rewards[name];
      try {
        ra.push_back(cell.at("reward_a").get<double>());
        rb.push_back(cell.at("reward_b").get<double>());
      } catch (const json::exception& e) {
        throw Error("bad_jsonl",
                    "scores line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    ++sf.n_rows;
  }
  if (sf.header.is_null())
    throw Error("bad_jsonl", "scores file is empty; re-run `score`");
  for (const auto& [name, lists] : sf.rewards)
    if (static_cast<int64_t>(lists.first.size()) != sf.n_rows)
      throw Error("bad_jsonl", "scores file lists method " + name + " on only " +
                                   std::to_string(lists.first.size()) + " of " +
                                   std::to_string(sf.n_rows) + " rows");
  return sf;
}

}  // namespace

std::vector<std::string> stage_eval(const RunConfig& cfg) {
  cfg.validate();
  ScoresFile sf = read_scores(require_artifact(cfg, artifact::kScores, "score"));
  std::vector<LabeledPair> pairs = load_corpus(cfg);
  CorpusSplits splits = split_corpus(pairs, cfg);

  uint64_t recorded_corpus = 0;
  uint64_t recorded_model = 0;
  uint64_t recorded_manifest = 0;
  try {
    recorded_corpus = parse_hex_u64(sf.header.at("corpus_hash").get<std::string>());
    recorded_model = parse_hex_u64(sf.header.at("model_checksum").get<std::string>());
    recorded_manifest = parse_hex_u64(sf.header.at("manifest_hash").get<std::string>());
  } catch (const json::exception& e) {
    throw Error("bad_jsonl", std::string("scores header is missing fields: ") + e.what());
  }
  if (recorded_corpus != corpus_hash(pairs))
    throw Error("lineage_mismatch", "corpus.jsonl changed since `score` ran; re-run `score`");
  if (sf.n_rows != static_cast<int64_t>(splits.test.size()))
    throw Error("lineage_mismatch",
                "scores.jsonl holds " + std::to_string(sf.n_rows) + " rows but the test split has " +
                    std::to_string(splits.test.size()) + " pairs; re-run `score`");

  EvalReport report;
  for (Method m : kAllMethods) {
    auto it = sf.rewards.find(std::string(method_name(m)));
    if (it == sf.rewards.end())
      throw Error("lineage_mismatch", "scores.jsonl lacks method " +
                                          std::string(method_name(m)) + "; re-run `score`");
    report.methods.push_back(
        evaluate_scored(it->second.first, it->second.second, splits.test, m));
  }
  report.model_checksum = recorded_model;
  report.corpus_hash = recorded_corpus;
  report.manifest_hash = recorded_manifest;

  std::string path = artifact_path(cfg, artifact::kEval);
  write_file(path, report_to_json(report));
  log_info("eval: " + std::to_string(report.methods.size()) + " methods over " +
           std::to_string(sf.n_rows) + " pairs");
  return {path};
}

std::vector<std::string> stage_report(const RunConfig& cfg) {
  cfg.validate();
  EvalReport report = report_from_json(read_file(require_artifact(cfg, artifact::kEval, "eval")));

  std::string manifest_path = require_artifact(cfg, artifact::kManifest, "tune");
  if (fnv1a64(read_file(manifest_path)) != report.manifest_hash)
    throw Error("lineage_mismatch",
                "manifest.json does not match the hash recorded in eval.json; "
                "re-run `score` and `eval`");
  InterventionManifest manifest = load_manifest(manifest_path);

  std::vector<LabeledPair> rows =
      read_jsonl(require_artifact(cfg, artifact::kAnnotations, "annotate"));
  report.annotations.clear();
  for (Method m : kAllMethods) {
    AnnotationStats st = annotation_stats_from_pairs(rows, m);
    if (st.n_sets > 0) report.annotations.push_back(st);
  }

  std::string hist_path = artifact_path(cfg, artifact::kHistogram);
  write_histogram_csv(manifest, hist_path);
  std::string report_path = artifact_path(cfg, artifact::kReport);
  write_file(report_path, report_to_json(report));
  log_info("report: " + std::to_string(report.annotations.size()) +
           " annotation method(s), histogram over " +
           std::to_string(manifest.address_union().size()) + " neurons");
  return {report_path, hist_path};
}

std::vector<std::string> run_pipeline(const RunConfig& cfg) {
  std::vector<std::string> all;
  auto add = [&](std::vector<std::string> paths) {
    all.insert(all.end(), std::make_move_iterator(paths.begin()),
               std::make_move_iterator(paths.end()));
  };
  add(stage_gen_corpus(cfg));
  add(stage_init_model(cfg));
  add(stage_train(cfg));
  add(stage_collect(cfg));
  add(stage_identify(cfg));
  add(stage_tune(cfg));
  add(stage_score(cfg));
  add(stage_annotate(cfg));
  add(stage_eval(cfg));
  add(stage_report(cfg));
  return all;
}

// ---------------------------------------------------------------------------
// Report parsing and annotation statistics from persisted rows
// ---------------------------------------------------------------------------

namespace {

SplitAccuracy split_from_json(const json& j) {
  SplitAccuracy s;
  s.n = j.at("n").get<int64_t>();
  s.correct = j.at("correct").get<int64_t>();
  s.reward_ties = j.at("reward_ties").get<int64_t>();
  s.accuracy = j.at("accuracy").get<double>();
  s.defined = j.at("defined").get<bool>();
  return s;
}

}  // namespace

EvalReport report_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("bad_report", std::string("report is not valid JSON: ") + e.what());
  }
  try {
    EvalReport r;
    for (const json& m : j.at("methods")) {
      MethodEval ev;
      ev.method = method_from_name(m.at("method").get<std::string>());
      ev.overall = split_from_json(m.at("overall"));
      const json& per_bias = m.at("per_bias");
      for (size_t b = 0; b < kBiasCount; ++b) {
        const json& cell = per_bias.at(std::string(bias_name(kAllBiases[b])));
        ev.biased[b] = split_from_json(cell.at("biased"));
        ev.unbiased[b] = split_from_json(cell.at("unbiased"));
        ev.feature_ties[b] = split_from_json(cell.at("feature_ties"));
      }
      r.methods.push_back(ev);
    }
    for (const json& a : j.at("annotations")) {
      AnnotationStats st;
      st.method = method_from_name(a.at("method").get<std::string>());
      st.n_sets = a.at("n_sets").get<int64_t>();
      st.degenerate = a.at("degenerate").get<int64_t>();
      const json& ratios = a.at("ratios");
      const json& means = a.at("chosen_feature_means");
      for (size_t b = 0; b < kBiasCount; ++b) {
        const std::string name(bias_name(kAllBiases[b]));
        const json& rj = ratios.at(name);
        st.ratios[b].ratio = rj.at("ratio").get<double>();
        st.ratios[b].defined = rj.at("defined").get<bool>();
        st.ratios[b].biased = rj.at("biased").get<int64_t>();
        st.ratios[b].unbiased = rj.at("unbiased").get<int64_t>();
        st.ratios[b].feature_ties = rj.at("feature_ties").get<int64_t>();
        st.chosen_means[b] = means.at(name).get<double>();
      }
      r.annotations.push_back(st);
    }
    const json& prov = j.at("provenance");
    r.model_checksum = parse_hex_u64(prov.at("model_checksum").get<std::string>());
    r.corpus_hash = parse_hex_u64(prov.at("corpus_hash").get<std::string>());
    r.manifest_hash = parse_hex_u64(prov.at("manifest_hash").get<std::string>());
    return r;
  } catch (const json::exception& e) {
    throw Error("bad_report", std::string("report is missing fields: ") + e.what());
  }
}

AnnotationStats annotation_stats_from_pairs(std::span<const LabeledPair> rows, Method label) {
  AnnotationStats st;
  st.method = label;
  std::vector<LabeledPair> matched;
  std::vector<QueryResponse> chosen;
  for (const LabeledPair& row : rows) {
    if (row.extra_json.empty()) continue;
    json extra;
    try {
      extra = json::parse(row.extra_json);
    } catch (const json::parse_error& e) {
      throw Error("bad_jsonl", std::string("annotation row has malformed extras: ") + e.what());
    }
    if (!extra.contains("method") || !extra.at("method").is_string() ||
        extra.at("method").get<std::string>() != method_name(label))
      continue;
    ++st.n_sets;
    if (extra.value("degenerate", false)) ++st.degenerate;
    matched.push_back(row);
    chosen.push_back({row.pair.query, row.pair.response_a});
  }
  if (matched.empty()) return st;
  for (size_t b = 0; b < kBiasCount; ++b)
    st.ratios[b] = bias_ratio(std::span<const LabeledPair>(matched), kAllBiases[b]);
  st.chosen_means = feature_means(chosen);
  return st;
}

}  // namespace cirm
