#include "cirm/bench.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirm/error.hpp"
#include "cirm/hash.hpp"
#include "cirm/parallel.hpp"
#include "cirm/serial.hpp"

namespace cirm {

namespace {

using nlohmann::json;

double raw_reward(const Model& m, const PromptTemplate& prompt, const QueryResponse& qr) {
  return score(m, byte_tokens(prompt.render(qr.query, qr.response))).reward;
}

}  // namespace

RewardFn make_reward_fn(const Model& m, Method method, const MethodSettings& settings,
                        const PromptTemplate& prompt) {
  const Model* model = &m;
  switch (method) {
    case Method::vanilla:
      return [model, prompt](const QueryResponse& qr) { return raw_reward(*model, prompt, qr); };
    case Method::cirm: {
      if (settings.manifest == nullptr)
        throw Error("bad_config", "the cirm method requires an intervention manifest");
      if (!settings.manifest->empty() &&
          settings.manifest->model_checksum != model_checksum(m))
        throw Error("manifest_model_mismatch",
                    "the manifest was built for a different model");
      InterventionMap iv = settings.manifest->to_interventions();
      return [model, prompt, iv = std::move(iv)](const QueryResponse& qr) {
        return score_intervened(*model, byte_tokens(prompt.render(qr.query, qr.response)), iv)
            .reward;
      };
    }
    case Method::lp: {
      if (settings.lp_alpha < 0.0)
        throw Error("bad_alpha", "the length penalty requires alpha >= 0");
      double alpha = settings.lp_alpha;
      return [model, prompt, alpha](const QueryResponse& qr) {
        return lp_score(raw_reward(*model, prompt, qr), qr, alpha);
      };
    }
    case Method::lwr: {
      if (settings.lwr == nullptr)
        throw Error("bad_config", "the lwr method requires a fitted calibration");
      LwrCalibration cal = *settings.lwr;
      return [model, prompt, cal = std::move(cal)](const QueryResponse& qr) {
        double r = raw_reward(*model, prompt, qr);
        return cal.debias(r, static_cast<double>(utf8_scalar_count(qr.response)));
      };
    }
  }
  throw Error("bad_config", "unknown method");
}

namespace {

void tally(SplitAccuracy& s, const ScoredPair& sp, Gold gold) {
  ++s.n;
  if (sp.tie)
    ++s.reward_ties;
  else if (sp.choice == gold)
    ++s.correct;
}

void finalize(SplitAccuracy& s) {
  s.defined = s.n > 0;
  s.accuracy = s.defined ? (static_cast<double>(s.correct) +
                            0.5 * static_cast<double>(s.reward_ties)) /
                               static_cast<double>(s.n)
                         : 0.0;
}

}  // namespace

MethodEval evaluate(const RewardFn& scorer, std::span<const LabeledPair> pairs, Method label,
                    int threads) {
  if (pairs.empty()) throw Error("empty_input", "evaluate requires at least one pair");

  std::vector<double> reward_a(pairs.size());
  std::vector<double> reward_b(pairs.size());
  parallel_for(static_cast<int64_t>(pairs.size()), threads, [&](int64_t i) {
    const PreferencePair& p = pairs[static_cast<size_t>(i)].pair;
    reward_a[static_cast<size_t>(i)] = scorer({p.query, p.response_a});
    reward_b[static_cast<size_t>(i)] = scorer({p.query, p.response_b});
  });
  return evaluate_scored(reward_a, reward_b, pairs, label);
}

MethodEval evaluate_scored(std::span<const double> reward_a, std::span<const double> reward_b,
                           std::span<const LabeledPair> pairs, Method label) {
  if (pairs.empty()) throw Error("empty_input", "evaluate requires at least one pair");
  if (reward_a.size() != pairs.size() || reward_b.size() != pairs.size())
    throw Error("size_mismatch", "one reward per side per pair required");
  for (const LabeledPair& p : pairs)
    if (!p.pair.gold.has_value())
      throw Error("missing_gold", "evaluate requires gold labels on every pair");

  MethodEval ev;
  ev.method = label;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const LabeledPair& lp = pairs[i];
    ScoredPair sp = make_scored(reward_a[i], reward_b[i], label);
    Gold gold = *lp.pair.gold;
    tally(ev.overall, sp, gold);
    for (size_t b = 0; b < kBiasCount; ++b) {
      Bias bias = kAllBiases[b];
      double fg = gold_features(lp).value(bias);
      double fo = other_features(lp).value(bias);
      SplitAccuracy& slot =
          fg > fo ? ev.biased[b] : (fg < fo ? ev.unbiased[b] : ev.feature_ties[b]);
      tally(slot, sp, gold);
    }
  }
  finalize(ev.overall);
  for (size_t b = 0; b < kBiasCount; ++b) {
    finalize(ev.biased[b]);
    finalize(ev.unbiased[b]);
    finalize(ev.feature_ties[b]);
  }
  return ev;
}

namespace {

void check_candidate_set(const CandidateSet& cs, size_t s) {
  if (cs.responses.size() < 2)
    throw Error("bad_candidate_set", "candidate set " + std::to_string(s) +
                                         " needs at least 2 responses, got " +
                                         std::to_string(cs.responses.size()));
  for (const std::string& r : cs.responses)
    if (r.empty())
      throw Error("bad_candidate_set",
                  "candidate set " + std::to_string(s) + " has an empty response");
  if (!cs.quality.empty() && cs.quality.size() != cs.responses.size())
    throw Error("bad_candidate_set", "candidate set " + std::to_string(s) +
                                         " has a quality list of the wrong length");
}

}  // namespace

std::vector<AnnotatedPair> annotate(const RewardFn& scorer, std::span<const CandidateSet> sets,
                                    Method label, int threads) {
  std::vector<std::pair<size_t, size_t>> jobs;  // (set, candidate)
  for (size_t s = 0; s < sets.size(); ++s) {
    check_candidate_set(sets[s], s);
    for (size_t c = 0; c < sets[s].responses.size(); ++c) jobs.emplace_back(s, c);
  }

  std::vector<double> flat(jobs.size());
  parallel_for(static_cast<int64_t>(jobs.size()), threads, [&](int64_t j) {
    auto [s, c] = jobs[static_cast<size_t>(j)];
    flat[static_cast<size_t>(j)] = scorer({sets[s].query, sets[s].responses[c]});
  });

  std::vector<std::vector<double>> rewards(sets.size());
  size_t job = 0;
  for (size_t s = 0; s < sets.size(); ++s) {
    size_t n = sets[s].responses.size();
    rewards[s].assign(flat.begin() + static_cast<ptrdiff_t>(job),
                      flat.begin() + static_cast<ptrdiff_t>(job + n));
    job += n;
  }
  return annotate_scored(rewards, sets, label);
}

std::vector<AnnotatedPair> annotate_scored(std::span<const std::vector<double>> rewards,
                                           std::span<const CandidateSet> sets, Method label) {
  if (rewards.size() != sets.size())
    throw Error("size_mismatch", "one reward list per candidate set required");

  std::vector<AnnotatedPair> out;
  out.reserve(sets.size());
  for (size_t s = 0; s < sets.size(); ++s) {
    const CandidateSet& cs = sets[s];
    check_candidate_set(cs, s);
    size_t n = cs.responses.size();
    if (rewards[s].size() != n)
      throw Error("size_mismatch", "candidate set " + std::to_string(s) +
                                       " has " + std::to_string(n) + " responses but " +
                                       std::to_string(rewards[s].size()) + " rewards");
    std::span<const double> r(rewards[s]);

    // First strict improvement keeps the lowest index on ties.
    size_t best = 0, worst = 0;
    for (size_t c = 1; c < n; ++c) {
      if (r[c] > r[best]) best = c;
      if (r[c] < r[worst]) worst = c;
    }
    AnnotatedPair ap;
    ap.method = label;
    ap.degenerate = r[best] == r[worst];
    if (ap.degenerate) {
      best = 0;
      worst = 1;
    }
    ap.chosen_index = static_cast<int64_t>(best);
    ap.rejected_index = static_cast<int64_t>(worst);
    ap.reward_chosen = r[best];
    ap.reward_rejected = r[worst];
    ap.pair.pair.query = cs.query;
    ap.pair.pair.response_a = cs.responses[best];
    ap.pair.pair.response_b = cs.responses[worst];
    ap.pair.pair.gold = Gold::A;
    ap.pair.features_a = extract_features({cs.query, cs.responses[best]});
    ap.pair.features_b = extract_features({cs.query, cs.responses[worst]});
    if (!cs.quality.empty()) {
      ap.pair.quality_a = cs.quality[best];
      ap.pair.quality_b = cs.quality[worst];
    }
    out.push_back(std::move(ap));
  }
  return out;
}

BiasRatio bias_ratio(std::span<const LabeledPair> annotated, Bias bias) {
  BiasRatio br;
  for (const LabeledPair& lp : annotated) {
    double fg = gold_features(lp).value(bias);
    double fo = other_features(lp).value(bias);
    if (fg > fo)
      ++br.biased;
    else if (fg < fo)
      ++br.unbiased;
    else
      ++br.feature_ties;
  }
  int64_t denom = br.biased + br.unbiased;
  br.defined = denom > 0;
  br.ratio = br.defined ? static_cast<double>(br.biased) / static_cast<double>(denom) : 0.0;
  return br;
}

BiasRatio bias_ratio(std::span<const AnnotatedPair> annotated, Bias bias) {
  std::vector<LabeledPair> pairs;
  pairs.reserve(annotated.size());
  for (const AnnotatedPair& ap : annotated) pairs.push_back(ap.pair);
  return bias_ratio(std::span<const LabeledPair>(pairs), bias);
}

FeatureMeans feature_means(std::span<const QueryResponse> items) {
  if (items.empty()) throw Error("empty_input", "feature_means requires at least one response");
  FeatureMeans means{};
  for (const QueryResponse& qr : items) {
    FeatureVector f = extract_features(qr);
    for (size_t b = 0; b < kBiasCount; ++b) means[b] += f.value(kAllBiases[b]);
  }
  for (double& m : means) m /= static_cast<double>(items.size());
  return means;
}

LayerHistogram layer_histogram(std::span<const NeuronAddress> addresses) {
  if (addresses.empty())
    throw Error("empty_input", "layer_histogram requires a nonempty neuron set");
  LayerHistogram h;
  for (const NeuronAddress& a : addresses) {
    ++h.by_layer[a.layer];
    ++h.by_layer_site[{a.layer, a.site}];
    ++h.total;
  }
  return h;
}

void write_histogram_csv(const InterventionManifest& mf, const std::string& path) {
  std::string out = "layer,site,bias,count\n";
  for (size_t b = 0; b < kBiasCount; ++b) {
    const std::vector<NeuronAddress>& addrs = mf.addresses[b];
    if (addrs.empty()) continue;
    LayerHistogram h = layer_histogram(addrs);
    for (const auto& [key, count] : h.by_layer_site) {
      out += std::to_string(key.first);
      out += ",";
      out += site_name(key.second);
      out += ",";
      out += bias_name(kAllBiases[b]);
      out += "," + std::to_string(count) + "\n";
    }
  }
  write_file(path, out);
}

AnnotationStats annotation_stats(std::span<const AnnotatedPair> annotated, Method label) {
  AnnotationStats st;
  st.method = label;
  st.n_sets = static_cast<int64_t>(annotated.size());
  for (const AnnotatedPair& ap : annotated)
    if (ap.degenerate) ++st.degenerate;
  if (annotated.empty()) return st;  // ratios stay undefined, means zero

  std::vector<LabeledPair> pairs;
  pairs.reserve(annotated.size());
  std::vector<QueryResponse> chosen;
  chosen.reserve(annotated.size());
  for (const AnnotatedPair& ap : annotated) {
    pairs.push_back(ap.pair);
    chosen.push_back({ap.pair.pair.query, ap.pair.pair.response_a});
  }
  for (size_t b = 0; b < kBiasCount; ++b)
    st.ratios[b] = bias_ratio(std::span<const LabeledPair>(pairs), kAllBiases[b]);
  st.chosen_means = feature_means(chosen);
  return st;
}

namespace {

json split_to_json(const SplitAccuracy& s) {
  json j;
  j["accuracy"] = s.accuracy;
  j["correct"] = s.correct;
  j["defined"] = s.defined;
  j["n"] = s.n;
  j["reward_ties"] = s.reward_ties;
  return j;
}

json ratio_to_json(const BiasRatio& r) {
  json j;
  j["biased"] = r.biased;
  j["defined"] = r.defined;
  j["feature_ties"] = r.feature_ties;
  j["ratio"] = r.ratio;
  j["unbiased"] = r.unbiased;
  return j;
}

json means_to_json(const FeatureMeans& m) {
  json j;
  for (size_t b = 0; b < kBiasCount; ++b) j[std::string(bias_name(kAllBiases[b]))] = m[b];
  return j;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json j;
  j["conventions"] = {
      {"accuracy_ties",
       "a reward tie contributes 0.5 credit: accuracy = (correct + 0.5*reward_ties)/n"},
      {"bias_ratio_ties",
       "pairs with equal feature values are excluded from both sides of the ratio "
       "biased/(biased+unbiased)"}};

  json methods = json::array();
  for (const MethodEval& ev : r.methods) {
    json m;
    m["method"] = std::string(method_name(ev.method));
    m["overall"] = split_to_json(ev.overall);
    json per_bias;
    for (size_t b = 0; b < kBiasCount; ++b) {
      json cell;
      cell["biased"] = split_to_json(ev.biased[b]);
      cell["feature_ties"] = split_to_json(ev.feature_ties[b]);
      cell["unbiased"] = split_to_json(ev.unbiased[b]);
      per_bias[std::string(bias_name(kAllBiases[b]))] = cell;
    }
    m["per_bias"] = per_bias;
    methods.push_back(m);
  }
  j["methods"] = methods;

  json annotations = json::array();
  for (const AnnotationStats& st : r.annotations) {
    json a;
    a["chosen_feature_means"] = means_to_json(st.chosen_means);
    a["degenerate"] = st.degenerate;
    a["method"] = std::string(method_name(st.method));
    a["n_sets"] = st.n_sets;
    json ratios;
    for (size_t b = 0; b < kBiasCount; ++b)
      ratios[std::string(bias_name(kAllBiases[b]))] = ratio_to_json(st.ratios[b]);
    a["ratios"] = ratios;
    annotations.push_back(a);
  }
  j["annotations"] = annotations;

  j["provenance"] = {{"corpus_hash", hex_u64(r.corpus_hash)},
                     {"manifest_hash", hex_u64(r.manifest_hash)},
                     {"model_checksum", hex_u64(r.model_checksum)}};
  return j.dump(2) + "\n";
}

void save_report(const EvalReport& r, const std::string& path) {
  write_file(path, report_to_json(r));
}

void write_annotations_jsonl(std::span<const AnnotatedPair> annotated, const std::string& path) {
  std::vector<LabeledPair> rows;
  rows.reserve(annotated.size());
  for (const AnnotatedPair& ap : annotated) {
    LabeledPair row = ap.pair;
    json extra;
    if (!row.extra_json.empty()) extra = json::parse(row.extra_json);
    extra["chosen_index"] = ap.chosen_index;
    extra["degenerate"] = ap.degenerate;
    extra["method"] = std::string(method_name(ap.method));
    extra["reward_chosen"] = ap.reward_chosen;
    extra["reward_rejected"] = ap.reward_rejected;
    extra["rejected_index"] = ap.rejected_index;
    row.extra_json = extra.dump();
    rows.push_back(std::move(row));
  }
  write_jsonl(rows, path);
}

}  // namespace cirm
