// Command-line front end: one subcommand per pipeline stage plus `pipeline`
// (all stages in order) and `config` (print the effective configuration).
// Settings come from built-in defaults, overlaid by --config FILE, overlaid
// by flags; the effective configuration and each value's source are echoed
// to stderr at startup. Artifact paths are printed to stdout, one per line;
// failures print a single machine-readable line to stderr and exit nonzero.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cirm/error.hpp"
#include "cirm/hash.hpp"
#include "cirm/log.hpp"
#include "cirm/pipeline.hpp"
#include "cirm/rng.hpp"

namespace {

std::string quote_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += ' ';
      continue;
    }
    out += c;
  }
  return out;
}

void print_error(const std::string& kind, const std::string& msg) {
  std::fprintf(stderr, "error kind=%s msg=\"%s\"\n", kind.c_str(), quote_escape(msg).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal-intervention reward-model laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  uint64_t master_seed = 0;
  int threads = 0;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--out", out_dir, "working directory for artifacts (overrides workdir)");
  app.add_option("--seed", master_seed,
                 "master seed; derives every stage seed (corpus, model, train, search, annotate)");
  app.add_option("--threads", threads, "worker threads for scoring loops");

  struct Stage {
    const char* name;
    const char* help;
    std::vector<std::string> (*run)(const cirm::RunConfig&);
  };
  const Stage stages[] = {
      {"gen-corpus", "generate the preference corpus (corpus.jsonl)", cirm::stage_gen_corpus},
      {"init-model", "initialize the reward model (model.init.bin)", cirm::stage_init_model},
      {"train", "train on the train split (model.bin, loss.csv)", cirm::stage_train},
      {"collect", "record validation activations (activations.bin)", cirm::stage_collect},
      {"identify", "rank neurons per bias (rankings.csv)", cirm::stage_identify},
      {"tune", "search intervention sizes and penalty strength (manifest.json, trace.csv, "
               "tune.json)",
       cirm::stage_tune},
      {"score", "score the test split with all methods (scores.jsonl)", cirm::stage_score},
      {"annotate", "best-of-n annotation with all methods (annotations.jsonl)",
       cirm::stage_annotate},
      {"eval", "aggregate scores into the accuracy grid (eval.json)", cirm::stage_eval},
      {"report", "assemble the full report (report.json, histogram.csv)", cirm::stage_report},
      {"pipeline", "run every stage in order", cirm::run_pipeline},
  };
  for (const Stage& st : stages) app.add_subcommand(st.name, st.help)->fallthrough();
  CLI::App* config_cmd =
      app.add_subcommand("config", "print the effective configuration as JSON");
  config_cmd->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    print_error("cli", e.what());
    return 1;
  }

  try {
    cirm::LoadedConfig loaded;
    loaded.config = cirm::default_run_config();
    if (!config_path.empty()) loaded = cirm::load_run_config(config_path);
    cirm::RunConfig& cfg = loaded.config;

    std::vector<std::string> flag_keys;
    if (!out_dir.empty()) {
      cfg.workdir = out_dir;
      flag_keys.push_back("workdir");
    }
    if (threads > 0) {
      cfg.threads = threads;
      flag_keys.push_back("threads");
    }
    if (app.count("--seed") > 0) {
      cfg.corpus.seed = cirm::derive_seed(master_seed, cirm::fnv1a64("corpus"));
      cfg.model.init_seed = cirm::derive_seed(master_seed, cirm::fnv1a64("model"));
      cfg.train.seed = cirm::derive_seed(master_seed, cirm::fnv1a64("train"));
      cfg.search.seed = cirm::derive_seed(master_seed, cirm::fnv1a64("search"));
      cfg.eval.annotation_seed = cirm::derive_seed(master_seed, cirm::fnv1a64("annotate"));
      flag_keys.insert(flag_keys.end(), {"corpus.seed", "model.init_seed", "train.seed",
                                         "search.seed", "eval.annotation_seed"});
    }

    std::string echo = cirm::describe_config(cfg, loaded.file_keys, flag_keys);
    size_t pos = 0;
    while (pos < echo.size()) {
      size_t end = echo.find('\n', pos);
      cirm::log_info("config: " + echo.substr(pos, end - pos));
      pos = end + 1;
    }

    if (config_cmd->parsed()) {
      std::fputs(cirm::run_config_to_json(cfg).c_str(), stdout);
      return 0;
    }
    for (const Stage& st : stages) {
      if (app.get_subcommand(st.name)->parsed()) {
        for (const std::string& path : st.run(cfg)) std::fprintf(stdout, "%s\n", path.c_str());
        return 0;
      }
    }
    print_error("cli", "no subcommand selected");
    return 1;
  } catch (const cirm::Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 2;
  }
}
