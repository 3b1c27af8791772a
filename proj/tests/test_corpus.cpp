#include <filesystem>
#include <string>
#include <vector>

#include "cirm/corpus.hpp"
#include "cirm/error.hpp"
#include "cirm/features.hpp"
#include "cirm/serial.hpp"
#include "doctest.h"

using namespace cirm;

namespace {

CorpusConfig small_config(uint64_t seed) {
  CorpusConfig cfg = default_corpus_config();
  cfg.n_pairs = 200;
  cfg.seed = seed;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

bool same_pair(const LabeledPair& x, const LabeledPair& y) {
  return x.pair.query == y.pair.query && x.pair.response_a == y.pair.response_a &&
         x.pair.response_b == y.pair.response_b && x.pair.gold == y.pair.gold &&
         x.features_a == y.features_a && x.features_b == y.features_b &&
         x.quality_a == y.quality_a && x.quality_b == y.quality_b &&
         x.extra_json == y.extra_json;
}

double biased_ratio(const std::vector<LabeledPair>& pairs, Bias b) {
  SubsetSplit s = split_subsets(pairs, b);
  double denom = static_cast<double>(s.biased.size() + s.unbiased.size());
  REQUIRE(denom > 0);
  return static_cast<double>(s.biased.size()) / denom;
}

}  // namespace

TEST_CASE("corpus config validation rejects malformed settings") {
  CHECK_NOTHROW(default_corpus_config().validate());

  CorpusConfig cfg = default_corpus_config();
  cfg.n_pairs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.bias_strength[0] = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.good_vocab.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.noise_vocab.push_back("Bad!");
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.query_vocab.push_back(cfg.good_vocab.front());  // breaks disjointness
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.min_content_words = 20;
  cfg.max_content_words = 10;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = default_corpus_config();
  cfg.max_query_words = static_cast<int64_t>(cfg.query_vocab.size()) + 1;
  try {
    cfg.validate();
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == "bad_config");
  }
}

TEST_CASE("gold is decided by content quality, never by style") {
  std::vector<LabeledPair> pairs = generate_corpus(small_config(7));
  for (const LabeledPair& p : pairs) {
    REQUIRE(p.pair.gold.has_value());
    double qg = *p.pair.gold == Gold::A ? p.quality_a : p.quality_b;
    double qo = *p.pair.gold == Gold::A ? p.quality_b : p.quality_a;
    CHECK(qg > qo);
    CHECK_FALSE(p.pair.response_a.empty());
    CHECK_FALSE(p.pair.response_b.empty());
    // Stored features always match the extractor on the final strings.
    CHECK(p.features_a == extract_features({p.pair.query, p.pair.response_a}));
    CHECK(p.features_b == extract_features({p.pair.query, p.pair.response_b}));
  }
}

TEST_CASE("bias strength 1.0 forces the gold response strictly longer everywhere") {
  CorpusConfig cfg = small_config(11);
  cfg.bias_strength = {1.0, 0.5, 0.5, 0.5, 0.5};
  std::vector<LabeledPair> pairs = generate_corpus(cfg);
  for (const LabeledPair& p : pairs) CHECK(gold_features(p).len > other_features(p).len);

  // Strength 0.0 forces the opposite ordering just as hard.
  cfg.bias_strength = {0.0, 0.5, 0.5, 0.5, 0.5};
  for (const LabeledPair& p : generate_corpus(cfg))
    CHECK(gold_features(p).len < other_features(p).len);
}

TEST_CASE("measured biased-subset ratios track the configured strengths") {
  CorpusConfig cfg = default_corpus_config();
  cfg.n_pairs = 2000;
  cfg.seed = 12345;

  SUBCASE("neutral 0.5 everywhere stays inside [0.4, 0.6]") {
    cfg.bias_strength = {0.5, 0.5, 0.5, 0.5, 0.5};
    std::vector<LabeledPair> pairs = generate_corpus(cfg);
    for (Bias b : kAllBiases) {
      double r = biased_ratio(pairs, b);
      CHECK(r >= 0.4);
      CHECK(r <= 0.6);
    }
  }

  SUBCASE("the planted default lands within 0.05 of each target") {
    std::vector<LabeledPair> pairs = generate_corpus(cfg);
    for (Bias b : kAllBiases) {
      double target = cfg.bias_strength[static_cast<size_t>(b)];
      CHECK(std::abs(biased_ratio(pairs, b) - target) <= 0.05);
    }
  }
}

TEST_CASE("generation is deterministic and content ignores style strengths") {
  CorpusConfig cfg = small_config(99);
  std::vector<LabeledPair> a = generate_corpus(cfg);
  std::vector<LabeledPair> b = generate_corpus(cfg);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(same_pair(a[i], b[i]));
  CHECK(corpus_hash(a) == corpus_hash(b));

  // Retargeting every bias leaves the content half untouched: same queries,
  // same gold sides, same quality scalars.
  CorpusConfig restyled = cfg;
  restyled.bias_strength = {0.1, 0.95, 0.25, 1.0, 0.0};
  std::vector<LabeledPair> c = generate_corpus(restyled);
  REQUIRE(c.size() == a.size());
  bool any_text_changed = false;
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(c[i].pair.query == a[i].pair.query);
    CHECK(c[i].pair.gold == a[i].pair.gold);
    CHECK(c[i].quality_a == a[i].quality_a);
    CHECK(c[i].quality_b == a[i].quality_b);
    if (c[i].pair.response_a != a[i].pair.response_a) any_text_changed = true;
  }
  CHECK(any_text_changed);  // the style half did move
}

TEST_CASE("subset splitting is a partition driven by the gold side's features") {
  std::vector<LabeledPair> pairs = generate_corpus(small_config(5));
  for (Bias b : kAllBiases) {
    SubsetSplit s = split_subsets(pairs, b);
    CHECK(s.biased.size() + s.unbiased.size() + s.ties.size() == pairs.size());
    for (const LabeledPair& p : s.biased)
      CHECK(gold_features(p).value(b) > other_features(p).value(b));
    for (const LabeledPair& p : s.unbiased)
      CHECK(gold_features(p).value(b) < other_features(p).value(b));
    // Idempotence: re-splitting a subset keeps every pair in that subset.
    SubsetSplit again = split_subsets(s.biased, b);
    CHECK(again.biased.size() == s.biased.size());
    CHECK(again.unbiased.empty());
    CHECK(again.ties.empty());
  }

  LabeledPair tied;
  tied.pair = {"q", "same text", "same text", Gold::A};
  tied.features_a = extract_features({"q", "same text"});
  tied.features_b = tied.features_a;
  tied.quality_a = 0.9;
  tied.quality_b = 0.1;
  std::vector<LabeledPair> one = {tied};
  for (Bias b : kAllBiases) {
    SubsetSplit s = split_subsets(one, b);
    CHECK(s.ties.size() == 1);
  }

  LabeledPair no_gold = tied;
  no_gold.pair.gold.reset();
  std::vector<LabeledPair> bad = {no_gold};
  try {
    split_subsets(bad, Bias::len);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == "missing_gold");
  }
}

TEST_CASE("jsonl persistence round-trips and rejects corruption") {
  std::vector<LabeledPair> pairs = generate_corpus(small_config(3));
  pairs.resize(25);
  auto path = temp_path("cirm_corpus_test.jsonl");

  SUBCASE("write then read is the identity") {
    write_jsonl(pairs, path.string());
    std::vector<LabeledPair> back = read_jsonl(path.string());
    REQUIRE(back.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) CHECK(same_pair(pairs[i], back[i]));
    // Byte-stable: writing the same list twice produces identical files.
    auto path2 = temp_path("cirm_corpus_test2.jsonl");
    write_jsonl(back, path2.string());
    CHECK(read_file(path.string()) == read_file(path2.string()));
  }

  SUBCASE("empty file yields an empty list") {
    write_file(path.string(), "");
    CHECK(read_jsonl(path.string()).empty());
  }

  SUBCASE("a truncated line is reported with its number") {
    write_jsonl(pairs, path.string());
    std::string text = read_file(path.string());
    size_t first_nl = text.find('\n');
    size_t second_nl = text.find('\n', first_nl + 1);
    std::string mangled = text.substr(0, first_nl + 1) +
                          text.substr(first_nl + 1, (second_nl - first_nl) / 2) + "\n" +
                          text.substr(second_nl + 1);
    write_file(path.string(), mangled);
    try {
      read_jsonl(path.string());
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == "bad_jsonl");
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }

  SUBCASE("a missing required field is named") {
    write_file(path.string(), "{\"query\":\"q\"}\n");
    try {
      read_jsonl(path.string());
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == "missing_field");
      CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }
  }

  SUBCASE("unknown fields survive the round trip") {
    write_jsonl(pairs, path.string());
    std::string text = read_file(path.string());
    size_t pos = text.find("{\"");
    std::string with_extra = text.substr(0, pos + 1) + "\"annotated_by\":\"hand\"," +
                             text.substr(pos + 1);
    write_file(path.string(), with_extra);
    std::vector<LabeledPair> back = read_jsonl(path.string());
    CHECK(back[0].extra_json.find("annotated_by") != std::string::npos);
    auto path2 = temp_path("cirm_corpus_test3.jsonl");
    write_jsonl(back, path2.string());
    std::vector<LabeledPair> twice = read_jsonl(path2.string());
    CHECK(twice[0].extra_json == back[0].extra_json);
  }

  SUBCASE("stored features are checked against the extractor") {
    write_jsonl(pairs, path.string());
    std::string text = read_file(path.string());
    size_t pos = text.find("\"len\":");
    std::string tampered = text.substr(0, pos + 6) + "9" + text.substr(pos + 6);
    write_file(path.string(), tampered);
    try {
      read_jsonl(path.string());
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == "feature_drift");
    }
  }
}

TEST_CASE("per-response view lines pairs up for activation collection") {
  std::vector<LabeledPair> pairs = generate_corpus(small_config(13));
  pairs.resize(4);
  std::vector<QueryResponse> rows = to_query_responses(pairs);
  REQUIRE(rows.size() == 8);
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(rows[2 * i].query == pairs[i].pair.query);
    CHECK(rows[2 * i].response == pairs[i].pair.response_a);
    CHECK(rows[2 * i + 1].response == pairs[i].pair.response_b);
  }
}

TEST_CASE("candidate sets are deterministic with independent per-response styling") {
  CorpusConfig cfg = small_config(21);
  std::vector<CandidateSet> sets = generate_candidate_sets(cfg, 150, 5, 77);
  REQUIRE(sets.size() == 150);

  SUBCASE("shape, quality range, and reproducibility") {
    std::vector<CandidateSet> again = generate_candidate_sets(cfg, 150, 5, 77);
    bool identical = true;
    for (size_t i = 0; i < sets.size(); ++i) {
      REQUIRE(sets[i].responses.size() == 5);
      REQUIRE(sets[i].quality.size() == 5);
      CHECK_FALSE(sets[i].query.empty());
      for (double q : sets[i].quality) {
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
      }
      for (const std::string& r : sets[i].responses) CHECK_FALSE(r.empty());
      identical = identical && again[i].query == sets[i].query &&
                  again[i].responses == sets[i].responses &&
                  again[i].quality == sets[i].quality;
    }
    CHECK(identical);

    std::vector<CandidateSet> other = generate_candidate_sets(cfg, 150, 5, 78);
    bool moved = false;
    for (size_t i = 0; i < sets.size(); ++i)
      moved = moved || other[i].responses != sets[i].responses;
    CHECK(moved);
  }

  SUBCASE("invalid shapes are rejected") {
    CHECK_THROWS_AS(generate_candidate_sets(cfg, -1, 5, 77), Error);
    CHECK_THROWS_AS(generate_candidate_sets(cfg, 10, 1, 77), Error);
  }
}

TEST_CASE("candidate styling frequency tracks strength and stays quality-blind") {
  CorpusConfig cfg = small_config(31);
  cfg.bias_strength = {0.5, 0.5, 0.5, 0.5, 0.5};
  std::vector<CandidateSet> sets = generate_candidate_sets(cfg, 200, 5, 99);

  // Count exclamation injections and split mean quality by whether the
  // response got one; an independent coin keeps both means together.
  int64_t with = 0, total = 0;
  double q_with = 0.0, q_without = 0.0;
  int64_t n_without = 0;
  for (const CandidateSet& cs : sets) {
    for (size_t c = 0; c < cs.responses.size(); ++c) {
      FeatureVector f = extract_features({cs.query, cs.responses[c]});
      ++total;
      if (f.excl > 0) {
        ++with;
        q_with += cs.quality[c];
      } else {
        ++n_without;
        q_without += cs.quality[c];
      }
    }
  }
  double rate = static_cast<double>(with) / static_cast<double>(total);
  CHECK(rate > 0.4);
  CHECK(rate < 0.6);
  REQUIRE(with > 0);
  REQUIRE(n_without > 0);
  CHECK(std::abs(q_with / static_cast<double>(with) -
                 q_without / static_cast<double>(n_without)) < 0.06);

  SUBCASE("strength 1.0 styles every response; 0.0 styles none") {
    cfg.bias_strength = {0.5, 1.0, 0.5, 1.0, 1.0};
    std::vector<CandidateSet> loud = generate_candidate_sets(cfg, 40, 3, 5);
    for (const CandidateSet& cs : loud)
      for (const std::string& r : cs.responses) {
        FeatureVector f = extract_features({cs.query, r});
        CHECK(f.excl > 0);
        CHECK(f.bold > 0);
        CHECK(f.para >= 1);
      }

    cfg.bias_strength = {0.5, 0.0, 0.5, 0.0, 0.0};
    std::vector<CandidateSet> plain = generate_candidate_sets(cfg, 40, 3, 5);
    for (const CandidateSet& cs : plain)
      for (const std::string& r : cs.responses) {
        FeatureVector f = extract_features({cs.query, r});
        CHECK(f.excl == 0);
        CHECK(f.bold == 0);
        CHECK(f.para == 0);
      }
  }
}
