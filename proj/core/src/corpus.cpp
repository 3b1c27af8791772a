#include "cirm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "cirm/error.hpp"
#include "cirm/hash.hpp"
#include "cirm/rng.hpp"
#include "cirm/serial.hpp"
#include "json.hpp"

namespace cirm {

namespace {

bool plain_lower_word(const std::string& w) {
  if (w.empty()) return false;
  for (char c : w)
    if (c < 'a' || c > 'z') return false;
  return true;
}

void check_vocab(const std::vector<std::string>& v, const char* label) {
  if (v.empty()) throw Error("bad_config", std::string(label) + " vocabulary is empty");
  for (const std::string& w : v)
    if (!plain_lower_word(w))
      throw Error("bad_config", std::string(label) + " vocabulary word '" + w +
                                    "' must be nonempty lowercase ascii letters");
}

void check_disjoint(const std::vector<std::string>& a, const std::vector<std::string>& b,
                    const char* la, const char* lb) {
  std::set<std::string> sa(a.begin(), a.end());
  for (const std::string& w : b)
    if (sa.count(w))
      throw Error("bad_config", std::string(la) + " and " + lb +
                                    " vocabularies must be disjoint; both contain '" + w + "'");
}

// First k entries of a seeded partial Fisher-Yates permutation of 0..n-1.
std::vector<int64_t> sample_distinct(Rng& rng, int64_t n, int64_t k) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), int64_t{0});
  for (int64_t j = 0; j < k; ++j) {
    int64_t r = j + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - j)));
    std::swap(idx[static_cast<size_t>(j)], idx[static_cast<size_t>(r)]);
  }
  idx.resize(static_cast<size_t>(k));
  return idx;
}

std::vector<std::string> make_content_words(Rng& rng, const CorpusConfig& cfg, int64_t n,
                                            int64_t n_good) {
  std::vector<int64_t> good_at = sample_distinct(rng, n, n_good);
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  for (int64_t p : good_at) mask[static_cast<size_t>(p)] = 1;
  std::vector<std::string> words;
  words.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    if (mask[static_cast<size_t>(i)])
      words.push_back(cfg.good_vocab[rng.below(cfg.good_vocab.size())]);
    else
      words.push_back(cfg.noise_vocab[rng.below(cfg.noise_vocab.size())]);
  }
  return words;
}

struct SideDraft {
  std::vector<std::string> words;
  std::vector<std::string> seps;  // sized words-1 at sealing time
  std::string text;
};

void seal_separators(SideDraft& s) { s.seps.assign(s.words.size() - 1, " "); }

std::string join_side(const SideDraft& s) {
  std::string out = s.words[0];
  for (size_t i = 1; i < s.words.size(); ++i) {
    out += s.seps[i - 1];
    out += s.words[i];
  }
  return out;
}

}  // namespace

void CorpusConfig::validate() const {
  if (n_pairs < 1) throw Error("bad_config", "n_pairs must be >= 1");
  for (Bias b : kAllBiases) {
    double s = bias_strength[static_cast<size_t>(b)];
    if (!(s >= 0.0 && s <= 1.0))
      throw Error("bad_config", "bias_strength[" + std::string(bias_name(b)) +
                                    "] must lie in [0,1], got " + std::to_string(s));
  }
  check_vocab(good_vocab, "good");
  check_vocab(noise_vocab, "noise");
  check_vocab(query_vocab, "query");
  check_vocab(pad_vocab, "pad");
  check_disjoint(good_vocab, noise_vocab, "good", "noise");
  check_disjoint(good_vocab, query_vocab, "good", "query");
  check_disjoint(noise_vocab, query_vocab, "noise", "query");
  // Padding must never perturb the quality signal or the overlap feature.
  check_disjoint(good_vocab, pad_vocab, "good", "pad");
  check_disjoint(query_vocab, pad_vocab, "query", "pad");
  if (min_content_words < 4 || min_content_words > max_content_words)
    throw Error("bad_config", "content word range must satisfy 4 <= min <= max");
  if (min_query_words < 2 || min_query_words > max_query_words)
    throw Error("bad_config", "query word range must satisfy 2 <= min <= max");
  if (static_cast<int64_t>(query_vocab.size()) < max_query_words)
    throw Error("bad_config", "query vocabulary smaller than max_query_words");
  if (min_len_pad < 1 || min_len_pad > max_len_pad)
    throw Error("bad_config", "length padding range must satisfy 1 <= min <= max");
}

CorpusConfig default_corpus_config() {
  CorpusConfig cfg;
  cfg.bias_strength = {0.9, 0.5, 0.5, 0.5, 0.5};
  cfg.good_vocab = {
      "accurate", "careful",  "checked",  "clarify",  "coherent", "complete", "concise",
      "concrete", "correct",  "detailed", "direct",   "evidence", "exact",    "factual",
      "fair",     "helpful",  "honest",   "insight",  "logical",  "measured", "method",
      "precise",  "proof",    "reasoned", "relevant", "reliable", "rigorous", "solid",
      "sound",    "specific", "tested",   "thorough", "truthful", "trusted",  "useful",
      "valid",    "verified", "vetted",   "weighed",  "grounded"};
  cfg.noise_vocab = {
      "apple",  "basket",  "breeze", "candle", "cloud",  "copper", "corner",  "cotton",
      "dust",   "echo",    "fence",  "field",  "flicker", "gravel", "hollow", "island",
      "kettle", "ladder",  "lantern", "maple",  "marble", "meadow", "mirror",  "moss",
      "orchard", "pebble", "pillow", "powder", "ribbon", "river",  "saddle",  "shadow",
      "slate",  "stone",   "thread", "timber", "tunnel", "velvet", "willow",  "winter"};
  cfg.query_vocab = {"ability", "balance", "cause",   "design", "effect", "energy",
                     "format",  "growth",  "impact",  "kernel", "limits", "margin",
                     "nature",  "origin",  "pattern", "policy", "purpose", "quality",
                     "reason",  "result",  "signal",  "source", "system", "theory"};
  cfg.pad_vocab = {"umm", "uhh", "hmm", "erm"};
  return cfg;
}

std::vector<LabeledPair> generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const uint64_t content_base = derive_seed(cfg.seed, fnv1a64("content"));
  const uint64_t style_base = derive_seed(cfg.seed, fnv1a64("style"));
  const int64_t n_query_vocab = static_cast<int64_t>(cfg.query_vocab.size());

  std::vector<LabeledPair> out;
  out.reserve(static_cast<size_t>(cfg.n_pairs));
  for (int64_t i = 0; i < cfg.n_pairs; ++i) {
    // The content stream alone decides queries, gold side, and quality, so
    // the gold sequence is invariant under any change of bias strengths.
    Rng content(derive_seed(content_base, static_cast<uint64_t>(i)));
    Rng style(derive_seed(style_base, static_cast<uint64_t>(i)));

    int64_t q_n = content.range(cfg.min_query_words, cfg.max_query_words);
    std::vector<int64_t> q_idx = sample_distinct(content, n_query_vocab, q_n);
    std::vector<std::string> query_words;
    query_words.reserve(static_cast<size_t>(q_n));
    for (int64_t qi : q_idx) query_words.push_back(cfg.query_vocab[static_cast<size_t>(qi)]);

    bool gold_is_a = content.coin(0.5);
    int64_t n_gold = content.range(cfg.min_content_words, cfg.max_content_words);
    int64_t n_other = content.range(cfg.min_content_words, cfg.max_content_words);
    double phi_g = content.uniform(0.60, 0.95);
    double phi_o = content.uniform(0.05, 0.40);
    int64_t g_gold = std::clamp<int64_t>(std::llround(phi_g * static_cast<double>(n_gold)), 0, n_gold);
    int64_t g_other =
        std::clamp<int64_t>(std::llround(phi_o * static_cast<double>(n_other)), 0, n_other);
    // Strict quality ordering defines the gold label unambiguously.
    while (g_gold * n_other <= g_other * n_gold) {
      if (g_gold < n_gold) ++g_gold;
      else --g_other;
    }

    SideDraft gold, other;
    gold.words = make_content_words(content, cfg, n_gold, g_gold);
    other.words = make_content_words(content, cfg, n_other, g_other);
    double quality_gold = static_cast<double>(g_gold) / static_cast<double>(n_gold);
    double quality_other = static_cast<double>(g_other) / static_cast<double>(n_other);

    // Style phase. One coin per bias decides which side gets strictly more of
    // that feature; the amounts are drawn regardless of the outcome so the
    // stream position never depends on earlier coins.
    std::array<bool, kBiasCount> favor_gold{};
    for (Bias b : kAllBiases)
      favor_gold[static_cast<size_t>(b)] = style.coin(cfg.bias_strength[static_cast<size_t>(b)]);

    auto favored = [&](Bias b) -> SideDraft& {
      return favor_gold[static_cast<size_t>(b)] ? gold : other;
    };
    auto unfavored = [&](Bias b) -> SideDraft& {
      return favor_gold[static_cast<size_t>(b)] ? other : gold;
    };

    // Overlap: both sides absorb a prefix of the query's words, the favored
    // side a strictly larger one.
    double phi_hi = style.uniform(0.65, 0.90);
    double phi_lo = style.uniform(0.10, 0.35);
    int64_t c_hi = static_cast<int64_t>(std::ceil(phi_hi * static_cast<double>(q_n)));
    int64_t c_lo = static_cast<int64_t>(std::floor(phi_lo * static_cast<double>(q_n)));
    c_hi = std::clamp<int64_t>(c_hi, 1, q_n);
    c_lo = std::clamp<int64_t>(c_lo, 0, c_hi - 1);
    for (int64_t j = 0; j < c_hi; ++j)
      favored(Bias::over).words.push_back(query_words[static_cast<size_t>(j)]);
    for (int64_t j = 0; j < c_lo; ++j)
      unfavored(Bias::over).words.push_back(query_words[static_cast<size_t>(j)]);

    seal_separators(gold);
    seal_separators(other);

    // Paragraph breaks: only the favored side receives "\n\n" separators.
    int64_t paras = style.range(1, 3);
    {
      SideDraft& s = favored(Bias::para);
      for (int64_t j = 0; j < paras; ++j) {
        size_t joint = static_cast<size_t>(style.below(s.seps.size()));
        s.seps[joint] += "\n\n";
      }
    }

    // Exclamation marks on the favored side's last word.
    int64_t excls = style.range(1, 4);
    favored(Bias::excl).words.back() += std::string(static_cast<size_t>(excls), '!');

    // Bold markers around favored-side words (a rewrap still adds two "**").
    int64_t bolds = style.range(1, 3);
    {
      SideDraft& s = favored(Bias::bold);
      for (int64_t j = 0; j < bolds; ++j) {
        size_t w = static_cast<size_t>(style.below(s.words.size()));
        s.words[w] = "**" + s.words[w] + "**";
      }
    }

    gold.text = join_side(gold);
    other.text = join_side(other);

    // Length is padded last so the favored side ends strictly longer no
    // matter what the other injections did.
    int64_t delta = style.range(cfg.min_len_pad, cfg.max_len_pad);
    {
      SideDraft& s = favored(Bias::len);
      SideDraft& u = unfavored(Bias::len);
      int64_t target = utf8_scalar_count(u.text) + delta;
      int64_t have = utf8_scalar_count(s.text);
      while (have < target) {
        std::string pad = " " + cfg.pad_vocab[style.below(cfg.pad_vocab.size())];
        s.text += pad;
        have += static_cast<int64_t>(pad.size());  // ascii: bytes == scalars
      }
    }

    LabeledPair lp;
    lp.pair.query = query_words[0];
    for (int64_t j = 1; j < q_n; ++j) lp.pair.query += " " + query_words[static_cast<size_t>(j)];
    lp.pair.response_a = gold_is_a ? gold.text : other.text;
    lp.pair.response_b = gold_is_a ? other.text : gold.text;
    lp.pair.gold = gold_is_a ? Gold::A : Gold::B;
    lp.quality_a = gold_is_a ? quality_gold : quality_other;
    lp.quality_b = gold_is_a ? quality_other : quality_gold;
    lp.features_a = extract_features({lp.pair.query, lp.pair.response_a});
    lp.features_b = extract_features({lp.pair.query, lp.pair.response_b});
    out.push_back(std::move(lp));
  }
  return out;
}

SubsetSplit split_subsets(std::span<const LabeledPair> pairs, Bias bias) {
  SubsetSplit split;
  for (const LabeledPair& p : pairs) {
    if (!p.pair.gold.has_value())
      throw Error("missing_gold", "split_subsets requires gold labels on every pair");
    double fg = gold_features(p).value(bias);
    double fo = other_features(p).value(bias);
    if (fg > fo) split.biased.push_back(p);
    else if (fg < fo) split.unbiased.push_back(p);
    else split.ties.push_back(p);
  }
  return split;
}

namespace {

nlohmann::json feature_json(const FeatureVector& f) {
  return {{"len", f.len}, {"para", f.para}, {"over", f.over}, {"excl", f.excl}, {"bold", f.bold}};
}

FeatureVector feature_from_json(const nlohmann::json& j, int64_t line, const char* field) {
  auto bad = [&](const std::string& why) {
    return Error("bad_jsonl",
                 "line " + std::to_string(line) + ": field '" + field + "' " + why);
  };
  if (!j.is_object()) throw bad("must be an object");
  for (const char* key : {"len", "para", "over", "excl", "bold"})
    if (!j.contains(key)) throw bad(std::string("is missing '") + key + "'");
  FeatureVector f;
  f.len = j.at("len").get<int64_t>();
  f.para = j.at("para").get<int64_t>();
  f.over = j.at("over").get<double>();
  f.excl = j.at("excl").get<int64_t>();
  f.bold = j.at("bold").get<int64_t>();
  return f;
}

const char* const kRequiredFields[] = {"query",      "response_a", "response_b", "gold",
                                       "features_a", "features_b", "quality_a",  "quality_b"};

std::string pair_to_line(const LabeledPair& p) {
  nlohmann::json j;
  if (!p.extra_json.empty()) {
    nlohmann::json extra = nlohmann::json::parse(p.extra_json);
    for (auto& [k, v] : extra.items()) j[k] = v;
  }
  j["query"] = p.pair.query;
  j["response_a"] = p.pair.response_a;
  j["response_b"] = p.pair.response_b;
  if (!p.pair.gold.has_value())
    throw Error("missing_gold", "jsonl persistence requires gold labels");
  j["gold"] = *p.pair.gold == Gold::A ? "A" : "B";
  j["features_a"] = feature_json(p.features_a);
  j["features_b"] = feature_json(p.features_b);
  j["quality_a"] = p.quality_a;
  j["quality_b"] = p.quality_b;
  return j.dump();
}

std::string serialize_corpus(std::span<const LabeledPair> pairs) {
  std::string out;
  for (const LabeledPair& p : pairs) {
    out += pair_to_line(p);
    out += '\n';
  }
  return out;
}

}  // namespace

void write_jsonl(std::span<const LabeledPair> pairs, const std::string& path) {
  write_file(path, serialize_corpus(pairs));
}

std::vector<LabeledPair> read_jsonl(const std::string& path) {
  std::string content = read_file(path);
  std::vector<LabeledPair> out;
  int64_t line_no = 0;
  size_t pos = 0;
  while (pos <= content.size()) {
    size_t end = content.find('\n', pos);
    std::string line = end == std::string::npos ? content.substr(pos)
                                                : content.substr(pos, end - pos);
    pos = end == std::string::npos ? content.size() + 1 : end + 1;
    ++line_no;
    if (line.empty()) continue;

    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw Error("bad_jsonl", "line " + std::to_string(line_no) + ": malformed JSON");
    if (!j.is_object())
      throw Error("bad_jsonl", "line " + std::to_string(line_no) + ": not a JSON object");
    for (const char* field : kRequiredFields)
      if (!j.contains(field))
        throw Error("missing_field",
                    "line " + std::to_string(line_no) + ": missing required field '" + field + "'");

    LabeledPair p;
    try {
      p.pair.query = j.at("query").get<std::string>();
      p.pair.response_a = j.at("response_a").get<std::string>();
      p.pair.response_b = j.at("response_b").get<std::string>();
      std::string gold = j.at("gold").get<std::string>();
      if (gold == "A") p.pair.gold = Gold::A;
      else if (gold == "B") p.pair.gold = Gold::B;
      else
        throw Error("bad_jsonl",
                    "line " + std::to_string(line_no) + ": gold must be 'A' or 'B'");
      p.quality_a = j.at("quality_a").get<double>();
      p.quality_b = j.at("quality_b").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("bad_jsonl", "line " + std::to_string(line_no) + ": " + e.what());
    }
    p.features_a = feature_from_json(j.at("features_a"), line_no, "features_a");
    p.features_b = feature_from_json(j.at("features_b"), line_no, "features_b");

    // Stored features must agree with the live extractor; a mismatch means
    // the file was produced by a different feature definition.
    FeatureVector fa = extract_features({p.pair.query, p.pair.response_a});
    FeatureVector fb = extract_features({p.pair.query, p.pair.response_b});
    if (!(fa == p.features_a) || !(fb == p.features_b))
      throw Error("feature_drift", "line " + std::to_string(line_no) +
                                       ": stored features disagree with the extractor");

    nlohmann::json extra = nlohmann::json::object();
    for (auto& [k, v] : j.items()) {
      bool known = false;
      for (const char* field : kRequiredFields)
        if (k == field) known = true;
      if (!known) extra[k] = v;
    }
    if (!extra.empty()) p.extra_json = extra.dump();
    out.push_back(std::move(p));
  }
  return out;
}

uint64_t corpus_hash(std::span<const LabeledPair> pairs) {
  return fnv1a64(serialize_corpus(pairs));
}

std::vector<QueryResponse> to_query_responses(std::span<const LabeledPair> pairs) {
  std::vector<QueryResponse> out;
  out.reserve(pairs.size() * 2);
  for (const LabeledPair& p : pairs) {
    out.push_back({p.pair.query, p.pair.response_a});
    out.push_back({p.pair.query, p.pair.response_b});
  }
  return out;
}

const FeatureVector& gold_features(const LabeledPair& p) {
  if (!p.pair.gold.has_value()) throw Error("missing_gold", "pair has no gold label");
  return *p.pair.gold == Gold::A ? p.features_a : p.features_b;
}

const FeatureVector& other_features(const LabeledPair& p) {
  if (!p.pair.gold.has_value()) throw Error("missing_gold", "pair has no gold label");
  return *p.pair.gold == Gold::A ? p.features_b : p.features_a;
}

std::vector<CandidateSet> generate_candidate_sets(const CorpusConfig& cfg, int64_t n_sets,
                                                  int64_t n_candidates, uint64_t seed) {
  cfg.validate();
  if (n_sets < 0) throw Error("bad_config", "n_sets must be >= 0");
  if (n_candidates < 2) throw Error("bad_config", "candidate sets need at least 2 responses");
  const uint64_t content_base = derive_seed(seed, fnv1a64("set-content"));
  const uint64_t style_base = derive_seed(seed, fnv1a64("set-style"));
  const int64_t n_query_vocab = static_cast<int64_t>(cfg.query_vocab.size());

  std::vector<CandidateSet> out;
  out.reserve(static_cast<size_t>(n_sets));
  for (int64_t i = 0; i < n_sets; ++i) {
    Rng content(derive_seed(content_base, static_cast<uint64_t>(i)));
    Rng style(derive_seed(style_base, static_cast<uint64_t>(i)));

    CandidateSet set;
    int64_t q_n = content.range(cfg.min_query_words, cfg.max_query_words);
    std::vector<int64_t> q_idx = sample_distinct(content, n_query_vocab, q_n);
    std::vector<std::string> query_words;
    query_words.reserve(static_cast<size_t>(q_n));
    for (int64_t qi : q_idx) query_words.push_back(cfg.query_vocab[static_cast<size_t>(qi)]);
    set.query = query_words[0];
    for (int64_t j = 1; j < q_n; ++j) set.query += " " + query_words[static_cast<size_t>(j)];

    for (int64_t c = 0; c < n_candidates; ++c) {
      // Content quality is independent of style: each candidate draws its own
      // good-word fraction, then five independent style coins.
      int64_t n = content.range(cfg.min_content_words, cfg.max_content_words);
      double phi = content.uniform(0.05, 0.95);
      int64_t n_good = std::clamp<int64_t>(std::llround(phi * static_cast<double>(n)), 0, n);
      SideDraft draft;
      draft.words = make_content_words(content, cfg, n, n_good);
      set.quality.push_back(static_cast<double>(n_good) / static_cast<double>(n));

      if (style.coin(cfg.bias_strength[static_cast<size_t>(Bias::over)])) {
        double u = style.uniform(0.10, 0.90);
        int64_t k = std::clamp<int64_t>(
            static_cast<int64_t>(std::ceil(u * static_cast<double>(q_n))), 1, q_n);
        for (int64_t j = 0; j < k; ++j)
          draft.words.push_back(query_words[static_cast<size_t>(j)]);
      }
      seal_separators(draft);
      if (style.coin(cfg.bias_strength[static_cast<size_t>(Bias::para)])) {
        int64_t paras = style.range(1, 3);
        for (int64_t j = 0; j < paras; ++j)
          draft.seps[static_cast<size_t>(style.below(draft.seps.size()))] += "\n\n";
      }
      if (style.coin(cfg.bias_strength[static_cast<size_t>(Bias::excl)])) {
        int64_t excls = style.range(1, 4);
        draft.words.back() += std::string(static_cast<size_t>(excls), '!');
      }
      if (style.coin(cfg.bias_strength[static_cast<size_t>(Bias::bold)])) {
        int64_t bolds = style.range(1, 3);
        for (int64_t j = 0; j < bolds; ++j) {
          size_t w = static_cast<size_t>(style.below(draft.words.size()));
          draft.words[w] = "**" + draft.words[w] + "**";
        }
      }
      std::string text = join_side(draft);
      if (style.coin(cfg.bias_strength[static_cast<size_t>(Bias::len)])) {
        // Same scalar-count padding scale as pair generation.
        int64_t delta = style.range(cfg.min_len_pad, cfg.max_len_pad);
        int64_t added = 0;
        while (added < delta) {
          std::string pad = " " + cfg.pad_vocab[style.below(cfg.pad_vocab.size())];
          text += pad;
          added += static_cast<int64_t>(pad.size());  // ascii: bytes == scalars
        }
      }
      set.responses.push_back(std::move(text));
    }
    out.push_back(std::move(set));
  }
  return out;
}

}  // namespace cirm
