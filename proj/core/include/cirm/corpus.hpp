#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cirm/features.hpp"
#include "cirm/scoring.hpp"

namespace cirm {

// Synthetic preference-data generator. Every pair has a planted content
// signal (one response draws more of its words from the good sub-vocabulary)
// that alone determines the gold label, plus style injections whose side is
// chosen by per-bias coins, so each style feature's correlation with gold is
// a configured probability rather than a property of the content.
struct CorpusConfig {
  int64_t n_pairs = 2000;
  // Probability that the gold response carries strictly more of each style
  // feature than its sibling.
  std::array<double, kBiasCount> bias_strength{0.5, 0.5, 0.5, 0.5, 0.5};
  std::vector<std::string> good_vocab;   // content words signaling quality
  std::vector<std::string> noise_vocab;  // content filler words
  std::vector<std::string> query_vocab;  // query-only words (overlap donors)
  std::vector<std::string> pad_vocab;    // length-padding words; inert for
                                         // quality and overlap by construction
  int64_t min_content_words = 8;
  int64_t max_content_words = 16;
  int64_t min_query_words = 4;
  int64_t max_query_words = 8;
  int64_t min_len_pad = 5;   // extra scalars the longer side adds past the shorter
  int64_t max_len_pad = 40;
  uint64_t seed = 1;

  void validate() const;  // throws Error("bad_config")
  bool operator==(const CorpusConfig&) const = default;
};

// The ready-to-run toy configuration: built-in disjoint vocabularies and a
// strongly planted length bias (0.9) with the other styles neutral (0.5).
CorpusConfig default_corpus_config();

// One generated example: the preference pair with its gold side, the style
// feature quantities of both responses, and the content-quality scalars that
// *define* the gold side (gold is never a function of style).
struct LabeledPair {
  PreferencePair pair;
  FeatureVector features_a;
  FeatureVector features_b;
  double quality_a = 0.0;
  double quality_b = 0.0;
  std::string extra_json;  // unknown fields seen on read, preserved on write
};

std::vector<LabeledPair> generate_corpus(const CorpusConfig& cfg);

// Partition by how the gold response compares on one feature: strictly more
// (biased), strictly less (unbiased), or equal (ties).
struct SubsetSplit {
  std::vector<LabeledPair> biased;
  std::vector<LabeledPair> unbiased;
  std::vector<LabeledPair> ties;
};

SubsetSplit split_subsets(std::span<const LabeledPair> pairs, Bias bias);

// JSONL persistence: one object per line with fields query, response_a,
// response_b, gold, features_a, features_b, quality_a, quality_b (keys
// written in sorted order for byte-stable files); unknown fields survive a
// read/write round trip. Reading recomputes both feature vectors and rejects
// files whose stored features disagree with the extractor.
void write_jsonl(std::span<const LabeledPair> pairs, const std::string& path);
std::vector<LabeledPair> read_jsonl(const std::string& path);

// Content hash over everything that defines the examples (texts, gold,
// qualities, features); used to tie downstream artifacts to their corpus.
uint64_t corpus_hash(std::span<const LabeledPair> pairs);

// The per-response view used for activation collection: pair i contributes
// rows 2i (response_a) and 2i+1 (response_b).
std::vector<QueryResponse> to_query_responses(std::span<const LabeledPair> pairs);

// Convenience accessors for the gold/other response features of one pair.
const FeatureVector& gold_features(const LabeledPair& p);
const FeatureVector& other_features(const LabeledPair& p);

// A best-of-n annotation input: one query with several candidate responses
// and (optionally) their content-quality scalars.
struct CandidateSet {
  std::string query;
  std::vector<std::string> responses;
  std::vector<double> quality;  // optional; empty or one value per response
};

// Synthetic candidate sets drawn from the same vocabularies as the pairs.
// Each response gets an independent content quality and independent style
// coins (probability bias_strength[b] per style), so style is uncorrelated
// with quality within a set: any association between styles and the chosen
// response is induced by the annotating scorer, not planted in the data.
std::vector<CandidateSet> generate_candidate_sets(const CorpusConfig& cfg, int64_t n_sets,
                                                  int64_t n_candidates, uint64_t seed);

}  // namespace cirm
