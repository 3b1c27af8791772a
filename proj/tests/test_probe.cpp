#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "cirm/error.hpp"
#include "cirm/probe.hpp"
#include "cirm/rng.hpp"
#include "cirm/serial.hpp"
#include "doctest.h"

using namespace cirm;

namespace {

// Independent Spearman oracle: counting ranks and textbook sum formulas,
// deliberately a different computation path from the library.
double brute_spearman(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate) {
  size_t n = x.size();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (size_t j = 0; j < n; ++j) {
        if (v[j] < v[i]) ++less;
        else if (j != i && v[j] == v[i]) ++equal;
      }
      r[i] = 1.0 + less + 0.5 * equal;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    sx += rx[i];
    sy += ry[i];
    sxx += rx[i] * rx[i];
    syy += ry[i] * ry[i];
    sxy += rx[i] * ry[i];
  }
  double dn = static_cast<double>(n);
  double cov = sxy - sx * sy / dn;
  double vx = sxx - sx * sx / dn;
  double vy = syy - sy * sy / dn;
  if (vx <= 0.0 || vy <= 0.0) {
    *degenerate = true;
    return 0.0;
  }
  *degenerate = false;
  return cov / std::sqrt(vx * vy);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 128;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 64;
  cfg.init_seed = 7;
  return cfg;
}

// Synthetic activation matrix with hand-set columns and features.
ActivationMatrix synthetic_matrix(int64_t rows) {
  ModelConfig cfg = tiny_config();
  ActivationLayout layout(cfg);
  ActivationMatrix m;
  m.config = cfg;
  m.rows = rows;
  m.cols = layout.total();
  m.data.assign(static_cast<size_t>(rows * m.cols), 0.0);
  m.features.resize(static_cast<size_t>(rows));
  m.model_checksum = 0xabc;
  m.valset_hash = 0xdef;
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("probe");

TEST_CASE("average ranks share tie positions") {
  auto r = average_ranks(std::vector<double>{3, 1, 4, 1, 5});
  CHECK(r == std::vector<double>{3, 1.5, 4, 1.5, 5});
  auto all_same = average_ranks(std::vector<double>{2, 2, 2});
  CHECK(all_same == std::vector<double>{2, 2, 2});
}

TEST_CASE("spearman matches the hand-computed tie example") {
  std::vector<double> x{1, 2, 2, 3};
  std::vector<double> y{1, 2, 3, 4};
  SpearmanResult s = spearman(x, y);
  CHECK_FALSE(s.degenerate);
  CHECK(s.rho == doctest::Approx(0.9486832980505138).epsilon(1e-15));
}

TEST_CASE("spearman is exactly monotone-invariant and antisymmetric") {
  std::vector<double> x{0.3, -2.0, 5.5, 1.1, 0.0};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 3.0);  // strictly increasing map
  SpearmanResult s = spearman(x, y);
  CHECK(s.rho == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<double> yn;
  for (double v : x) yn.push_back(-v);
  CHECK(spearman(x, yn).rho == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("constant inputs are flagged degenerate with rho zero") {
  std::vector<double> c{4, 4, 4, 4};
  std::vector<double> y{1, 2, 3, 4};
  SpearmanResult s = spearman(c, y);
  CHECK(s.degenerate);
  CHECK(s.rho == 0.0);
  s = spearman(y, c);
  CHECK(s.degenerate);
  CHECK(s.rho == 0.0);
  // Too-short inputs are degenerate too.
  CHECK(spearman(std::vector<double>{1.0}, std::vector<double>{2.0}).degenerate);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1}), Error);
}

TEST_CASE("spearman agrees with the brute-force oracle on random tied data") {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    size_t n = static_cast<size_t>(rng.range(2, 60));
    std::vector<double> x(n), y(n);
    for (size_t i = 0; i < n; ++i) {
      // Coarse quantization forces plenty of ties.
      x[i] = static_cast<double>(rng.range(0, 8));
      y[i] = static_cast<double>(rng.range(0, 8)) + 0.5 * static_cast<double>(rng.range(0, 1));
    }
    bool bd = false;
    double br = brute_spearman(x, y, &bd);
    SpearmanResult s = spearman(x, y);
    CHECK(s.degenerate == bd);
    if (!bd) CHECK(std::abs(s.rho - br) < 1e-12);
  }
}

TEST_CASE("collect_activations rows equal direct scoring and are thread-invariant") {
  Model m = init_model(tiny_config());
  std::vector<QueryResponse> dataset = {
      {"add one", "two!"}, {"hello", "world\n\nworld"}, {"q", "**bold** text"}};
  PromptTemplate prompt;
  ActivationMatrix mat = collect_activations(m, dataset, prompt, 1);
  ActivationLayout layout(m.config);
  CHECK(mat.rows == 3);
  CHECK(mat.cols == layout.total());
  CHECK(mat.model_checksum == model_checksum(m));
  CHECK(mat.valset_hash == dataset_content_hash(dataset));

  for (size_t i = 0; i < dataset.size(); ++i) {
    ScoreResult sr = score(m, byte_tokens(prompt.render(dataset[i].query, dataset[i].response)));
    for (int64_t c = 0; c < mat.cols; ++c)
      CHECK(mat.at(static_cast<int64_t>(i), c) == sr.record.values[static_cast<size_t>(c)]);
    CHECK(mat.features[i] == extract_features(dataset[i]));
  }

  ActivationMatrix mat3 = collect_activations(m, dataset, prompt, 3);
  CHECK(mat3.data == mat.data);
  CHECK_THROWS_AS(collect_activations(m, {}, prompt, 1), Error);
}

TEST_CASE("matrix save/load round-trips and detects corruption") {
  namespace fs = std::filesystem;
  ActivationMatrix m = synthetic_matrix(5);
  Rng rng(55);
  for (double& v : m.data) v = rng.gauss();
  for (size_t r = 0; r < 5; ++r)
    m.features[r] = FeatureVector{.len = static_cast<int64_t>(r), .para = 1, .over = 0.25, .excl = 2, .bold = 0};

  std::string path = (fs::temp_directory_path() / "cirm_probe_matrix.bin").string();
  save_matrix(m, path);
  ActivationMatrix loaded = load_matrix(path);
  CHECK(loaded.config == m.config);
  CHECK(loaded.rows == m.rows);
  CHECK(loaded.cols == m.cols);
  CHECK(loaded.data == m.data);
  CHECK(loaded.model_checksum == m.model_checksum);
  CHECK(loaded.valset_hash == m.valset_hash);
  for (size_t r = 0; r < 5; ++r) CHECK(loaded.features[r] == m.features[r]);

  std::string blob = read_file(path);
  blob[100] = static_cast<char>(blob[100] ^ 0x40);
  write_file(path, blob);
  CHECK_THROWS_AS(load_matrix(path), Error);
  fs::remove(path);
}

TEST_CASE("rankings correlate neurons with the requested feature") {
  ActivationMatrix m = synthetic_matrix(40);
  ActivationLayout layout(m.config);
  Rng rng(9);
  int64_t len_col = layout.index_of({0, Site::Gate, 3});
  int64_t anti_col = layout.index_of({1, Site::Up, 7});
  for (int64_t r = 0; r < m.rows; ++r) {
    int64_t len = 10 + 3 * r;
    m.features[static_cast<size_t>(r)].len = len;
    m.features[static_cast<size_t>(r)].excl = static_cast<int64_t>(rng.range(0, 5));
    for (int64_t c = 0; c < m.cols; ++c)
      m.data[static_cast<size_t>(r * m.cols + c)] = rng.gauss() * 0.1;
    m.data[static_cast<size_t>(r * m.cols + len_col)] = static_cast<double>(len) + 0.01 * rng.gauss();
    m.data[static_cast<size_t>(r * m.cols + anti_col)] = -static_cast<double>(len);
  }
  NeuronRanking nr = rank_neurons(m, Bias::len);
  CHECK(nr.rho[static_cast<size_t>(len_col)] > 0.99);
  CHECK(nr.rho[static_cast<size_t>(anti_col)] == doctest::Approx(-1.0).epsilon(1e-12));

  // Column ranks must agree with a direct spearman call.
  std::vector<double> col(static_cast<size_t>(m.rows)), feat(static_cast<size_t>(m.rows));
  for (int64_t r = 0; r < m.rows; ++r) {
    col[static_cast<size_t>(r)] = m.at(r, len_col);
    feat[static_cast<size_t>(r)] = m.feature(r, Bias::len);
  }
  CHECK(nr.rho[static_cast<size_t>(len_col)] == doctest::Approx(spearman(col, feat).rho).epsilon(1e-15));
}

TEST_CASE("selection takes top and bottom k with canonical tie-breaks") {
  ActivationMatrix m = synthetic_matrix(4);
  ActivationLayout layout(m.config);
  NeuronRanking nr;
  nr.bias = Bias::len;
  nr.rho.assign(static_cast<size_t>(layout.total()), 0.0);
  nr.degenerate.assign(static_cast<size_t>(layout.total()), 0);
  nr.rho[10] = 0.9;
  nr.rho[20] = 0.9;   // tie with 10: canonical order prefers 10
  nr.rho[30] = 0.85;
  nr.rho[40] = -0.95;
  nr.rho[50] = -0.8;

  Selection sel = select_bias_neurons(nr, layout, 1);
  REQUIRE(sel.addresses.size() == 2);
  CHECK_FALSE(sel.truncated);
  CHECK(layout.index_of(sel.addresses[0]) == 10);
  CHECK(layout.index_of(sel.addresses[1]) == 40);

  sel = select_bias_neurons(nr, layout, 2);
  REQUIRE(sel.addresses.size() == 4);
  // Canonically sorted output.
  CHECK(layout.index_of(sel.addresses[0]) == 10);
  CHECK(layout.index_of(sel.addresses[1]) == 20);
  CHECK(layout.index_of(sel.addresses[2]) == 40);
  CHECK(layout.index_of(sel.addresses[3]) == 50);
  CHECK(std::is_sorted(sel.addresses.begin(), sel.addresses.end()));

  // Degenerate columns are excluded.
  nr.degenerate[10] = 1;
  sel = select_bias_neurons(nr, layout, 1);
  CHECK(layout.index_of(sel.addresses[0]) == 20);

  CHECK(select_bias_neurons(nr, layout, 0).addresses.empty());
  CHECK_THROWS_AS(select_bias_neurons(nr, layout, -1), Error);
}

TEST_CASE("selection truncates when fewer than 2k usable columns exist") {
  ActivationMatrix m = synthetic_matrix(4);
  ActivationLayout layout(m.config);
  NeuronRanking nr;
  nr.bias = Bias::excl;
  nr.rho.assign(static_cast<size_t>(layout.total()), 0.0);
  nr.degenerate.assign(static_cast<size_t>(layout.total()), 1);  // all degenerate...
  nr.degenerate[3] = 0;
  nr.degenerate[8] = 0;
  nr.degenerate[12] = 0;  // ...except three
  nr.rho[3] = 0.5;
  nr.rho[8] = -0.5;
  nr.rho[12] = 0.1;

  Selection sel = select_bias_neurons(nr, layout, 2);  // needs 4, only 3 available
  CHECK(sel.truncated);
  REQUIRE(sel.addresses.size() == 3);
  CHECK(layout.index_of(sel.addresses[0]) == 3);
  CHECK(layout.index_of(sel.addresses[1]) == 8);
  CHECK(layout.index_of(sel.addresses[2]) == 12);
}

TEST_CASE("medians match sorted-column definition for odd and even row counts") {
  ActivationMatrix m = synthetic_matrix(4);
  ActivationLayout layout(m.config);
  NeuronAddress a{0, Site::Q, 0};
  int64_t c = layout.index_of(a);
  double vals[4] = {5.0, -1.0, 3.0, 100.0};
  for (int64_t r = 0; r < 4; ++r) m.data[static_cast<size_t>(r * m.cols + c)] = vals[r];
  auto med = compute_medians(m, std::vector<NeuronAddress>{a});
  CHECK(med.at(a) == 4.0);  // (3 + 5) / 2

  ActivationMatrix modd = synthetic_matrix(3);
  for (int64_t r = 0; r < 3; ++r) modd.data[static_cast<size_t>(r * modd.cols + c)] = vals[r];
  med = compute_medians(modd, std::vector<NeuronAddress>{a});
  CHECK(med.at(a) == 3.0);
}

TEST_CASE("probe cache agrees with standalone ranking and medians") {
  ActivationMatrix m = synthetic_matrix(25);
  Rng rng(77);
  for (int64_t r = 0; r < m.rows; ++r) {
    m.features[static_cast<size_t>(r)].len = rng.range(5, 50);
    m.features[static_cast<size_t>(r)].bold = rng.range(0, 3);
    for (int64_t c = 0; c < m.cols; ++c)
      m.data[static_cast<size_t>(r * m.cols + c)] = rng.gauss();
  }
  ProbeCache cache(m);
  for (Bias b : {Bias::len, Bias::bold}) {
    NeuronRanking direct = rank_neurons(m, b);
    const NeuronRanking& cached = cache.ranking(b);
    CHECK(cached.rho == direct.rho);
    CHECK(cached.degenerate == direct.degenerate);
  }
  ActivationLayout layout(m.config);
  NeuronAddress a{1, Site::Down, 2};
  auto med = compute_medians(m, std::vector<NeuronAddress>{a});
  CHECK(cache.median(layout.index_of(a)) == med.at(a));
}

TEST_CASE("manifest build selects per bias and medians cover the union") {
  ActivationMatrix m = synthetic_matrix(30);
  ActivationLayout layout(m.config);
  Rng rng(5);
  for (int64_t r = 0; r < m.rows; ++r) {
    m.features[static_cast<size_t>(r)].len = 10 + r;
    m.features[static_cast<size_t>(r)].excl = r % 5;
    for (int64_t c = 0; c < m.cols; ++c)
      m.data[static_cast<size_t>(r * m.cols + c)] = rng.gauss() * 0.01;
    // Strong len neuron at column 7, strong excl neuron at column 9.
    m.data[static_cast<size_t>(r * m.cols + 7)] = static_cast<double>(r);
    m.data[static_cast<size_t>(r * m.cols + 9)] = static_cast<double>(r % 5);
  }
  ProbeCache cache(m);
  std::array<int64_t, kBiasCount> k{};
  k[static_cast<size_t>(Bias::len)] = 1;
  k[static_cast<size_t>(Bias::excl)] = 2;
  InterventionManifest mf = build_manifest(cache, k);

  CHECK(mf.model_checksum == m.model_checksum);
  CHECK(mf.valset_hash == m.valset_hash);
  CHECK(mf.addresses[static_cast<size_t>(Bias::len)].size() == 2);
  CHECK(mf.addresses[static_cast<size_t>(Bias::para)].empty());
  CHECK(layout.index_of(mf.addresses[static_cast<size_t>(Bias::len)][0]) == 7);

  // Medians cover exactly the union.
  std::set<NeuronAddress> unioned;
  for (const auto& per_bias : mf.addresses) unioned.insert(per_bias.begin(), per_bias.end());
  CHECK(mf.medians.size() == unioned.size());
  for (const auto& a : unioned) CHECK(mf.medians.count(a) == 1);

  // Interventions mirror the medians.
  InterventionMap iv = mf.to_interventions();
  CHECK(iv.size() == mf.medians.size());

  // k = 0 everywhere produces an empty manifest.
  InterventionManifest empty = build_manifest(cache, {});
  CHECK(empty.empty());
  CHECK(empty.to_interventions().empty());
}

TEST_CASE("manifest json round-trips exactly") {
  ActivationMatrix m = synthetic_matrix(12);
  Rng rng(11);
  for (int64_t r = 0; r < m.rows; ++r) {
    m.features[static_cast<size_t>(r)].len = rng.range(1, 99);
    m.features[static_cast<size_t>(r)].para = rng.range(0, 4);
    m.features[static_cast<size_t>(r)].over = rng.uniform01();
    m.features[static_cast<size_t>(r)].excl = rng.range(0, 4);
    m.features[static_cast<size_t>(r)].bold = rng.range(0, 4);
    for (int64_t c = 0; c < m.cols; ++c)
      m.data[static_cast<size_t>(r * m.cols + c)] = rng.gauss();
  }
  ProbeCache cache(m);
  InterventionManifest mf = build_manifest(cache, {2, 1, 1, 1, 1});

  std::string text = manifest_to_json(mf);
  InterventionManifest back = manifest_from_json(text);
  CHECK(back.model_checksum == mf.model_checksum);
  CHECK(back.valset_hash == mf.valset_hash);
  CHECK(back.k_per_bias == mf.k_per_bias);
  for (size_t b = 0; b < kBiasCount; ++b) {
    CHECK(back.addresses[b] == mf.addresses[b]);
    CHECK(back.truncated[b] == mf.truncated[b]);
  }
  CHECK(back.medians == mf.medians);  // doubles survive via shortest round-trip
  CHECK(manifest_to_json(back) == text);

  CHECK_THROWS_AS(manifest_from_json("not json"), Error);
  CHECK_THROWS_AS(manifest_from_json("{}"), Error);
}

TEST_CASE("manifest building refuses a mismatched model") {
  Model real = init_model(tiny_config());
  ActivationMatrix m = synthetic_matrix(4);  // carries checksum 0xabc, not real's
  for (int64_t r = 0; r < 4; ++r) m.features[static_cast<size_t>(r)].len = r;
  try {
    build_manifest(real, m, {1, 1, 1, 1, 1});
    FAIL("expected checksum mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == "checksum_mismatch");
  }
}

TEST_SUITE_END();
