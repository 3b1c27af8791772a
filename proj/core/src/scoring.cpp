#include "cirm/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cirm/error.hpp"
#include "cirm/graph.hpp"

namespace cirm {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::vanilla: return "vanilla";
    case Method::cirm: return "cirm";
    case Method::lp: return "lp";
    case Method::lwr: return "lwr";
  }
  return "?";
}

Method method_from_name(std::string_view name) {
  for (Method m : kAllMethods)
    if (method_name(m) == name) return m;
  throw Error("bad_method", "unknown method '" + std::string(name) + "'");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::median: return "median";
    case Variant::zero: return "zero";
    case Variant::swap: return "swap";
  }
  return "?";
}

Variant variant_from_name(std::string_view name) {
  for (Variant v : {Variant::median, Variant::zero, Variant::swap})
    if (variant_name(v) == name) return v;
  throw Error("bad_variant", "unknown variant '" + std::string(name) + "'");
}

ScoredPair make_scored(double reward_a, double reward_b, Method method) {
  ScoredPair sp;
  sp.reward_a = reward_a;
  sp.reward_b = reward_b;
  sp.method = method;
  sp.tie = reward_a == reward_b;
  sp.choice = reward_a >= reward_b ? Gold::A : Gold::B;
  return sp;
}

double bt_probability(double r1, double r2) {
  if (!std::isfinite(r1) || !std::isfinite(r2))
    throw Error("non_finite", "bt_probability requires finite rewards");
  return stable_sigmoid(r1 - r2);
}

namespace {

std::vector<int64_t> render_tokens(const PromptTemplate& prompt, const std::string& query,
                                   const std::string& response) {
  return byte_tokens(prompt.render(query, response));
}

// Manifests are only valid for the exact model they were probed on. An empty
// manifest with no recorded provenance is the identity intervention and is
// accepted for any model.
void guard_manifest(const Model& m, const InterventionManifest& manifest) {
  if (manifest.empty() && manifest.model_checksum == 0) return;
  if (manifest.model_checksum != model_checksum(m))
    throw Error("manifest_model_mismatch",
                "manifest was built for a different model (checksum mismatch)");
}

}  // namespace

ScoredPair predict_te(const Model& m, const PreferencePair& pair, const PromptTemplate& prompt) {
  double ra = score(m, render_tokens(prompt, pair.query, pair.response_a)).reward;
  double rb = score(m, render_tokens(prompt, pair.query, pair.response_b)).reward;
  return make_scored(ra, rb, Method::vanilla);
}

ScoredPair predict_cde(const Model& m, const PreferencePair& pair,
                       const InterventionManifest& manifest, const PromptTemplate& prompt) {
  guard_manifest(m, manifest);
  InterventionMap iv = manifest.to_interventions();
  double ra = score_intervened(m, render_tokens(prompt, pair.query, pair.response_a), iv).reward;
  double rb = score_intervened(m, render_tokens(prompt, pair.query, pair.response_b), iv).reward;
  return make_scored(ra, rb, Method::cirm);
}

ScoredPair intervention_variant(const Model& m, const PreferencePair& pair,
                                const InterventionManifest& manifest, Variant variant,
                                const PromptTemplate& prompt, SwapDirection swap_dir) {
  if (variant == Variant::median) return predict_cde(m, pair, manifest, prompt);
  guard_manifest(m, manifest);
  std::vector<NeuronAddress> addrs = manifest.address_union();
  if (variant == Variant::zero) {
    InterventionMap iv;
    iv.reserve(addrs.size());
    for (const NeuronAddress& a : addrs) iv.emplace_back(a, 0.0);
    double ra = score_intervened(m, render_tokens(prompt, pair.query, pair.response_a), iv).reward;
    double rb = score_intervened(m, render_tokens(prompt, pair.query, pair.response_b), iv).reward;
    return make_scored(ra, rb, Method::cirm);
  }
  // swap: the source response is scored plainly and its recorded activations
  // at the manifest addresses overwrite the target response's.
  const bool patch_a = swap_dir == SwapDirection::patch_a_with_b;
  const std::string& source = patch_a ? pair.response_b : pair.response_a;
  const std::string& target = patch_a ? pair.response_a : pair.response_b;
  ScoreResult src = score(m, render_tokens(prompt, pair.query, source));
  ActivationLayout layout(m.config);
  InterventionMap iv;
  iv.reserve(addrs.size());
  for (const NeuronAddress& a : addrs)
    iv.emplace_back(a, src.record.values[static_cast<size_t>(layout.index_of(a))]);
  double patched = score_intervened(m, render_tokens(prompt, pair.query, target), iv).reward;
  double ra = patch_a ? patched : src.reward;
  double rb = patch_a ? src.reward : patched;
  return make_scored(ra, rb, Method::cirm);
}

double lp_score(double reward, const QueryResponse& item, double alpha) {
  if (!std::isfinite(reward)) throw Error("non_finite", "lp_score requires a finite reward");
  if (!(alpha >= 0.0)) throw Error("bad_alpha", "length-penalty alpha must be >= 0");
  return reward - alpha * static_cast<double>(utf8_scalar_count(item.response));
}

ScoredPair predict_lp(const Model& m, const PreferencePair& pair, double alpha,
                      const PromptTemplate& prompt) {
  double ra = score(m, render_tokens(prompt, pair.query, pair.response_a)).reward;
  double rb = score(m, render_tokens(prompt, pair.query, pair.response_b)).reward;
  ra = lp_score(ra, {pair.query, pair.response_a}, alpha);
  rb = lp_score(rb, {pair.query, pair.response_b}, alpha);
  return make_scored(ra, rb, Method::lp);
}

LwrCalibration lwr_calibrate(std::vector<std::pair<double, double>> points, double tau) {
  if (!(tau > 0.0) || tau > 1.0) throw Error("lwr_bad_tau", "tau must lie in (0, 1]");
  if (points.size() < 5)
    throw Error("lwr_too_few_points", "lwr_calibrate requires at least 5 points, got " +
                                          std::to_string(points.size()));
  for (const auto& [x, y] : points)
    if (!std::isfinite(x) || !std::isfinite(y))
      throw Error("non_finite", "lwr_calibrate requires finite points");
  // Canonical order makes the fit independent of how callers assembled the
  // list; ties in length are ordered by reward.
  std::sort(points.begin(), points.end());
  bool degenerate = true;
  for (const auto& [x, y] : points)
    if (x != points.front().first) degenerate = false;
  if (degenerate)
    throw Error("lwr_degenerate_lengths", "all calibration lengths are identical");

  LwrCalibration cal;
  cal.tau_ = tau;
  int64_t n = static_cast<int64_t>(points.size());
  int64_t r = static_cast<int64_t>(std::ceil(tau * static_cast<double>(n)));
  cal.neighborhood_ = std::clamp<int64_t>(r, 2, n);
  cal.points_ = std::move(points);
  return cal;
}

double LwrCalibration::estimate(double length) const {
  const int64_t n = static_cast<int64_t>(points_.size());
  const int64_t r = neighborhood_;
  // Nearest-r selection by |length - l|; equal distances resolve to the
  // smaller length first (points_ is sorted), keeping the window unique.
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    double da = std::abs(points_[static_cast<size_t>(a)].first - length);
    double db = std::abs(points_[static_cast<size_t>(b)].first - length);
    return da < db;
  });
  idx.resize(static_cast<size_t>(r));

  // A locally constant reward is reproduced exactly rather than through the
  // normal equations, so constant data debias to exactly zero.
  bool const_reward = true;
  for (int64_t i : idx)
    if (points_[static_cast<size_t>(i)].second != points_[static_cast<size_t>(idx[0])].second)
      const_reward = false;
  if (const_reward) return points_[static_cast<size_t>(idx[0])].second;

  double dmax = 0.0;
  for (int64_t i : idx)
    dmax = std::max(dmax, std::abs(points_[static_cast<size_t>(i)].first - length));

  std::vector<double> w(static_cast<size_t>(r), 1.0);
  if (dmax > 0.0) {
    double sw = 0.0;
    for (size_t j = 0; j < idx.size(); ++j) {
      double d = std::abs(points_[static_cast<size_t>(idx[j])].first - length) / dmax;
      double t = 1.0 - d * d * d;
      w[j] = t * t * t;
      sw += w[j];
    }
    if (!(sw > 0.0)) std::fill(w.begin(), w.end(), 1.0);  // all at the rim: fall back to uniform
  }

  // Weighted least squares of reward on (length - l); the intercept is the
  // fitted value at the query length.
  double Sw = 0.0, Su = 0.0, Sy = 0.0, Suu = 0.0, Suy = 0.0;
  bool same_len = true;
  for (size_t j = 0; j < idx.size(); ++j) {
    const auto& [x, y] = points_[static_cast<size_t>(idx[j])];
    if (x != points_[static_cast<size_t>(idx[0])].first) same_len = false;
    double u = x - length;
    Sw += w[j];
    Su += w[j] * u;
    Sy += w[j] * y;
    Suu += w[j] * u * u;
    Suy += w[j] * u * y;
  }
  if (same_len) return Sy / Sw;  // rank-deficient window: weighted mean
  double det = Sw * Suu - Su * Su;
  if (!(det > 0.0)) return Sy / Sw;
  double slope = (Sw * Suy - Su * Sy) / det;
  return (Sy - slope * Su) / Sw;
}

ScoredPair predict_lwr(const Model& m, const PreferencePair& pair, const LwrCalibration& cal,
                       const PromptTemplate& prompt) {
  double ra = score(m, render_tokens(prompt, pair.query, pair.response_a)).reward;
  double rb = score(m, render_tokens(prompt, pair.query, pair.response_b)).reward;
  ra = cal.debias(ra, static_cast<double>(utf8_scalar_count(pair.response_a)));
  rb = cal.debias(rb, static_cast<double>(utf8_scalar_count(pair.response_b)));
  return make_scored(ra, rb, Method::lwr);
}

}  // namespace cirm
