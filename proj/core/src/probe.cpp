#include "cirm/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cirm/error.hpp"
#include "cirm/hash.hpp"
#include "cirm/parallel.hpp"
#include "cirm/serial.hpp"
#include "json.hpp"

namespace cirm {

std::vector<double> average_ranks(std::span<const double> x) {
  size_t n = x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });

  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Positions i..j (0-based) share the average 1-based rank.
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

namespace {

SpearmanResult pearson_of_ranks(std::span<const double> ra, std::span<const double> rb) {
  size_t n = ra.size();
  double mean_a = 0.0, mean_b = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mean_a += ra[i];
    mean_b += rb[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double da = ra[i] - mean_a;
    double db = rb[i] - mean_b;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return {0.0, true};
  return {sab / std::sqrt(saa * sbb), false};
}

}  // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw Error("bad_argument", "spearman requires equal-length inputs, got " +
                                    std::to_string(x.size()) + " and " + std::to_string(y.size()));
  if (x.size() < 2) return {0.0, true};
  std::vector<double> ra = average_ranks(x);
  std::vector<double> rb = average_ranks(y);
  return pearson_of_ranks(ra, rb);
}

uint64_t dataset_content_hash(std::span<const QueryResponse> dataset) {
  uint64_t h = kFnvOffset;
  auto mix_str = [&h](const std::string& s) {
    uint64_t len = s.size();
    h = fnv1a64(&len, sizeof(len), h);
    h = fnv1a64(s.data(), s.size(), h);
  };
  uint64_t n = dataset.size();
  h = fnv1a64(&n, sizeof(n), h);
  for (const QueryResponse& qr : dataset) {
    mix_str(qr.query);
    mix_str(qr.response);
  }
  return h;
}

ActivationMatrix collect_activations(const Model& m, std::span<const QueryResponse> dataset,
                                     const PromptTemplate& prompt, int threads) {
  if (dataset.empty()) throw Error("bad_argument", "cannot collect activations of an empty dataset");
  ActivationLayout layout(m.config);

  ActivationMatrix mat;
  mat.config = m.config;
  mat.rows = static_cast<int64_t>(dataset.size());
  mat.cols = layout.total();
  mat.data.assign(static_cast<size_t>(mat.rows * mat.cols), 0.0);
  mat.features.resize(dataset.size());
  mat.model_checksum = model_checksum(m);
  mat.valset_hash = dataset_content_hash(dataset);

  parallel_for(mat.rows, threads, [&](int64_t r) {
    const QueryResponse& qr = dataset[static_cast<size_t>(r)];
    std::vector<int64_t> toks = byte_tokens(prompt.render(qr.query, qr.response));
    ScoreResult sr = score(m, toks);
    std::copy(sr.record.values.begin(), sr.record.values.end(),
              mat.data.begin() + static_cast<size_t>(r * mat.cols));
    mat.features[static_cast<size_t>(r)] = extract_features(qr);
  });
  return mat;
}

// ---------------------------------------------------------------------------
// Matrix persistence

namespace {
constexpr char kMatrixMagic[4] = {'C', 'A', 'C', 'T'};
constexpr uint32_t kMatrixVersion = 1;
}  // namespace

void save_matrix(const ActivationMatrix& m, const std::string& path) {
  ByteWriter w;
  w.bytes(kMatrixMagic, 4);
  w.u32(kMatrixVersion);
  w.u32(static_cast<uint32_t>(m.config.vocab_size));
  w.u32(static_cast<uint32_t>(m.config.d_model));
  w.u32(static_cast<uint32_t>(m.config.n_layers));
  w.u32(static_cast<uint32_t>(m.config.n_heads));
  w.u32(static_cast<uint32_t>(m.config.d_ff));
  w.u32(static_cast<uint32_t>(m.config.max_seq_len));
  w.u64(m.config.init_seed);
  w.u64(m.model_checksum);
  w.u64(m.valset_hash);
  w.i64(m.rows);
  w.i64(m.cols);
  for (double v : m.data) w.f64(v);
  for (const FeatureVector& f : m.features) {
    w.i64(f.len);
    w.i64(f.para);
    w.f64(f.over);
    w.i64(f.excl);
    w.i64(f.bold);
  }
  std::string body = w.take();
  uint64_t checksum = fnv1a64(body.data(), body.size());
  ByteWriter tail;
  tail.u64(checksum);
  body += tail.data();
  write_file(path, body);
}

ActivationMatrix load_matrix(const std::string& path) {
  std::string blob = read_file(path);
  if (blob.size() < 4 + 4 + 8) throw Error("truncated", "activation matrix file too small: " + path);
  std::string_view body(blob.data(), blob.size() - 8);
  {
    ByteReader tail(std::string_view(blob.data() + blob.size() - 8, 8));
    uint64_t stored = tail.u64();
    uint64_t actual = fnv1a64(body.data(), body.size());
    if (stored != actual)
      throw Error("checksum_mismatch", "activation matrix checksum mismatch in " + path);
  }
  ByteReader r(body);
  if (r.bytes(4) != std::string_view(kMatrixMagic, 4))
    throw Error("bad_magic", "not an activation matrix file: " + path);
  if (r.u32() != kMatrixVersion) throw Error("bad_version", "unsupported activation matrix version");

  ActivationMatrix m;
  m.config.vocab_size = r.u32();
  m.config.d_model = r.u32();
  m.config.n_layers = r.u32();
  m.config.n_heads = r.u32();
  m.config.d_ff = r.u32();
  m.config.max_seq_len = r.u32();
  m.config.init_seed = r.u64();
  m.config.validate();
  m.model_checksum = r.u64();
  m.valset_hash = r.u64();
  m.rows = r.i64();
  m.cols = r.i64();
  ActivationLayout layout(m.config);
  if (m.rows <= 0 || m.cols != layout.total())
    throw Error("bad_config", "activation matrix dimensions inconsistent with its model config");
  m.data.resize(static_cast<size_t>(m.rows * m.cols));
  for (double& v : m.data) v = r.f64();
  m.features.resize(static_cast<size_t>(m.rows));
  for (FeatureVector& f : m.features) {
    f.len = r.i64();
    f.para = r.i64();
    f.over = r.f64();
    f.excl = r.i64();
    f.bold = r.i64();
  }
  if (!r.at_end()) throw Error("truncated", "activation matrix file has trailing bytes");
  return m;
}

// ---------------------------------------------------------------------------
// Ranking and selection

NeuronRanking rank_neurons(const ActivationMatrix& m, Bias bias) {
  ProbeCache cache(m);
  return cache.ranking(bias);
}

Selection select_bias_neurons(const NeuronRanking& ranking, const ActivationLayout& layout, int64_t k) {
  if (k < 0) throw Error("bad_argument", "selection k must be non-negative");
  if (static_cast<int64_t>(ranking.rho.size()) != layout.total())
    throw Error("bad_argument", "ranking size does not match layout");

  Selection sel;
  if (k == 0) return sel;

  // Non-degenerate columns sorted by (rho desc, canonical address asc).
  std::vector<int64_t> cols;
  cols.reserve(ranking.rho.size());
  for (int64_t c = 0; c < static_cast<int64_t>(ranking.rho.size()); ++c)
    if (!ranking.degenerate[static_cast<size_t>(c)]) cols.push_back(c);

  if (static_cast<int64_t>(cols.size()) < 2 * k) {
    sel.truncated = true;
    std::set<NeuronAddress> all;
    for (int64_t c : cols) all.insert(layout.address_at(c));
    sel.addresses.assign(all.begin(), all.end());
    return sel;
  }

  std::sort(cols.begin(), cols.end(), [&](int64_t a, int64_t b) {
    double ra = ranking.rho[static_cast<size_t>(a)];
    double rb = ranking.rho[static_cast<size_t>(b)];
    if (ra != rb) return ra > rb;
    return a < b;  // canonical flat order == canonical address order
  });

  std::set<NeuronAddress> chosen;
  for (int64_t i = 0; i < k; ++i) chosen.insert(layout.address_at(cols[static_cast<size_t>(i)]));
  // Bottom-k: most negative rho first, canonical order among ties.
  std::vector<int64_t> tail(cols.end() - static_cast<ptrdiff_t>(k), cols.end());
  std::sort(tail.begin(), tail.end(), [&](int64_t a, int64_t b) {
    double ra = ranking.rho[static_cast<size_t>(a)];
    double rb = ranking.rho[static_cast<size_t>(b)];
    if (ra != rb) return ra < rb;
    return a < b;
  });
  for (int64_t i = 0; i < k; ++i) chosen.insert(layout.address_at(tail[static_cast<size_t>(i)]));

  sel.addresses.assign(chosen.begin(), chosen.end());
  return sel;
}

std::map<NeuronAddress, double> compute_medians(const ActivationMatrix& m,
                                                std::span<const NeuronAddress> addresses) {
  if (m.rows <= 0) throw Error("bad_argument", "cannot take medians over an empty matrix");
  ActivationLayout layout(m.config);
  std::map<NeuronAddress, double> medians;
  std::vector<double> column(static_cast<size_t>(m.rows));
  for (const NeuronAddress& a : addresses) {
    int64_t c = layout.index_of(a);
    for (int64_t r = 0; r < m.rows; ++r) column[static_cast<size_t>(r)] = m.at(r, c);
    std::sort(column.begin(), column.end());
    size_t n = column.size();
    double med = (n % 2 == 1) ? column[n / 2] : (column[n / 2 - 1] + column[n / 2]) / 2.0;
    medians[a] = med;
  }
  return medians;
}

// ---------------------------------------------------------------------------
// ProbeCache

ProbeCache::ProbeCache(const ActivationMatrix& m) : m_(&m), layout_(m.config) {
  if (m.rows <= 0 || m.cols != layout_.total())
    throw Error("bad_argument", "activation matrix inconsistent with its own config");
  median_value_.assign(static_cast<size_t>(m.cols), 0.0);
  median_known_.assign(static_cast<size_t>(m.cols), 0);
}

void ProbeCache::build_ranks() const {
  if (ranks_built_) return;
  const ActivationMatrix& m = *m_;
  rank_cols_.assign(static_cast<size_t>(m.rows * m.cols), 0.0);
  std::vector<double> column(static_cast<size_t>(m.rows));
  for (int64_t c = 0; c < m.cols; ++c) {
    for (int64_t r = 0; r < m.rows; ++r) column[static_cast<size_t>(r)] = m.at(r, c);
    std::vector<double> ranks = average_ranks(column);
    for (int64_t r = 0; r < m.rows; ++r) rank_cols_[static_cast<size_t>(r * m.cols + c)] = ranks[static_cast<size_t>(r)];
  }
  ranks_built_ = true;
}

const NeuronRanking& ProbeCache::ranking(Bias b) const {
  auto& slot = rankings_[static_cast<size_t>(b)];
  if (slot.has_value()) return *slot;
  build_ranks();

  const ActivationMatrix& m = *m_;
  std::vector<double> feat(static_cast<size_t>(m.rows));
  for (int64_t r = 0; r < m.rows; ++r) feat[static_cast<size_t>(r)] = m.feature(r, b);
  std::vector<double> feat_ranks = average_ranks(feat);

  NeuronRanking nr;
  nr.bias = b;
  nr.rho.resize(static_cast<size_t>(m.cols));
  nr.degenerate.resize(static_cast<size_t>(m.cols));
  std::vector<double> col_ranks(static_cast<size_t>(m.rows));
  for (int64_t c = 0; c < m.cols; ++c) {
    for (int64_t r = 0; r < m.rows; ++r)
      col_ranks[static_cast<size_t>(r)] = rank_cols_[static_cast<size_t>(r * m.cols + c)];
    SpearmanResult sr = pearson_of_ranks(col_ranks, feat_ranks);
    nr.rho[static_cast<size_t>(c)] = sr.rho;
    nr.degenerate[static_cast<size_t>(c)] = sr.degenerate ? 1 : 0;
  }
  slot = std::move(nr);
  return *slot;
}

double ProbeCache::median(int64_t col) const {
  if (col < 0 || col >= m_->cols) throw Error("bad_argument", "median column out of range");
  if (!median_known_[static_cast<size_t>(col)]) {
    std::vector<double> column(static_cast<size_t>(m_->rows));
    for (int64_t r = 0; r < m_->rows; ++r) column[static_cast<size_t>(r)] = m_->at(r, col);
    std::sort(column.begin(), column.end());
    size_t n = column.size();
    median_value_[static_cast<size_t>(col)] =
        (n % 2 == 1) ? column[n / 2] : (column[n / 2 - 1] + column[n / 2]) / 2.0;
    median_known_[static_cast<size_t>(col)] = 1;
  }
  return median_value_[static_cast<size_t>(col)];
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<NeuronAddress> InterventionManifest::address_union() const {
  std::vector<NeuronAddress> u;
  u.reserve(medians.size());
  for (const auto& [a, v] : medians) u.push_back(a);
  return u;
}

InterventionMap InterventionManifest::to_interventions() const {
  InterventionMap iv;
  iv.reserve(medians.size());
  for (const auto& [a, v] : medians) iv.emplace_back(a, v);
  return iv;
}

InterventionManifest build_manifest(const ProbeCache& cache,
                                    const std::array<int64_t, kBiasCount>& k_per_bias) {
  InterventionManifest mf;
  mf.k_per_bias = k_per_bias;
  mf.model_checksum = cache.matrix().model_checksum;
  mf.valset_hash = cache.matrix().valset_hash;

  std::set<NeuronAddress> unioned;
  for (Bias b : kAllBiases) {
    size_t bi = static_cast<size_t>(b);
    Selection sel = select_bias_neurons(cache.ranking(b), cache.layout(), k_per_bias[bi]);
    mf.addresses[bi] = sel.addresses;
    mf.truncated[bi] = sel.truncated;
    unioned.insert(sel.addresses.begin(), sel.addresses.end());
  }
  for (const NeuronAddress& a : unioned) mf.medians[a] = cache.median(cache.layout().index_of(a));
  return mf;
}

InterventionManifest build_manifest(const Model& m, const ActivationMatrix& matrix,
                                    const std::array<int64_t, kBiasCount>& k_per_bias) {
  if (model_checksum(m) != matrix.model_checksum)
    throw Error("checksum_mismatch",
                "activation matrix was collected from a different model than the one provided");
  ProbeCache cache(matrix);
  return build_manifest(cache, k_per_bias);
}

std::string manifest_to_json(const InterventionManifest& mf) {
  nlohmann::json j;
  j["model_checksum"] = hex_u64(mf.model_checksum);
  j["valset_hash"] = hex_u64(mf.valset_hash);
  for (Bias b : kAllBiases) {
    size_t bi = static_cast<size_t>(b);
    std::string name(bias_name(b));
    j["k_per_bias"][name] = mf.k_per_bias[bi];
    j["truncated"][name] = mf.truncated[bi];
    nlohmann::json arr = nlohmann::json::array();
    for (const NeuronAddress& a : mf.addresses[bi]) arr.push_back(to_string(a));
    j["addresses"][name] = std::move(arr);
  }
  nlohmann::json meds = nlohmann::json::object();
  for (const auto& [a, v] : mf.medians) meds[to_string(a)] = v;
  j["medians"] = std::move(meds);
  return j.dump(2) + "\n";
}

InterventionManifest manifest_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("bad_manifest", std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    InterventionManifest mf;
    mf.model_checksum = parse_hex_u64(j.at("model_checksum").get<std::string>());
    mf.valset_hash = parse_hex_u64(j.at("valset_hash").get<std::string>());
    std::set<NeuronAddress> unioned;
    for (Bias b : kAllBiases) {
      size_t bi = static_cast<size_t>(b);
      std::string name(bias_name(b));
      mf.k_per_bias[bi] = j.at("k_per_bias").at(name).get<int64_t>();
      if (mf.k_per_bias[bi] < 0) throw Error("bad_manifest", "negative k for bias " + name);
      mf.truncated[bi] = j.at("truncated").at(name).get<bool>();
      for (const auto& s : j.at("addresses").at(name)) {
        NeuronAddress a = parse_address(s.get<std::string>());
        mf.addresses[bi].push_back(a);
        unioned.insert(a);
      }
    }
    for (const auto& [key, value] : j.at("medians").items()) {
      NeuronAddress a = parse_address(key);
      if (!unioned.count(a))
        throw Error("bad_manifest", "median for " + key + " is not in any bias address set");
      mf.medians[a] = value.get<double>();
    }
    if (mf.medians.size() != unioned.size())
      throw Error("bad_manifest", "medians do not cover the union of bias address sets");
    return mf;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_manifest", std::string("manifest structure invalid: ") + e.what());
  }
}

void save_manifest(const InterventionManifest& mf, const std::string& path) {
  write_file(path, manifest_to_json(mf));
}

InterventionManifest load_manifest(const std::string& path) {
  return manifest_from_json(read_file(path));
}

}  // namespace cirm
