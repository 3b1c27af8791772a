#include "cirm/model.hpp"

#include <charconv>
#include <cmath>

#include "cirm/error.hpp"
#include "cirm/hash.hpp"
#include "cirm/rng.hpp"
#include "cirm/serial.hpp"

namespace cirm {

void ModelConfig::validate() const {
  auto positive = [](int64_t v, const char* what) {
    if (v <= 0) throw Error("bad_config", std::string(what) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0)
    throw Error("bad_config", "d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                  std::to_string(n_heads) + ")");
  if (vocab_size > 1'000'000 || d_model > 65536 || max_seq_len > 1'000'000)
    throw Error("bad_config", "configuration dimension implausibly large");
}

std::string_view site_name(Site s) {
  switch (s) {
    case Site::Q: return "Q";
    case Site::K: return "K";
    case Site::V: return "V";
    case Site::O: return "O";
    case Site::Gate: return "GATE";
    case Site::Up: return "UP";
    case Site::Down: return "DOWN";
  }
  return "?";
}

Site site_from_name(std::string_view name) {
  for (Site s : kAllSites)
    if (site_name(s) == name) return s;
  throw Error("bad_address", "unknown site name '" + std::string(name) + "'");
}

std::string to_string(const NeuronAddress& a) {
  return std::to_string(a.layer) + "." + std::string(site_name(a.site)) + "." + std::to_string(a.index);
}

NeuronAddress parse_address(std::string_view s) {
  size_t dot1 = s.find('.');
  size_t dot2 = dot1 == std::string_view::npos ? std::string_view::npos : s.find('.', dot1 + 1);
  if (dot1 == std::string_view::npos || dot2 == std::string_view::npos)
    throw Error("bad_address", "expected layer.site.index, got '" + std::string(s) + "'");
  auto parse_int = [&](std::string_view part) {
    int32_t v = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || p != part.data() + part.size())
      throw Error("bad_address", "bad integer in address '" + std::string(s) + "'");
    return v;
  };
  NeuronAddress a;
  a.layer = parse_int(s.substr(0, dot1));
  a.site = site_from_name(s.substr(dot1 + 1, dot2 - dot1 - 1));
  a.index = parse_int(s.substr(dot2 + 1));
  return a;
}

ActivationLayout::ActivationLayout(const ModelConfig& cfg) {
  cfg.validate();
  d_ = cfg.d_model;
  ff_ = cfg.d_ff;
  layers_ = cfg.n_layers;
  layer_stride_ = 4 * d_ + 2 * ff_ + d_;
}

bool ActivationLayout::valid(const NeuronAddress& a) const {
  return a.layer >= 0 && a.layer < layers_ && a.index >= 0 && a.index < site_dim(a.site);
}

int64_t ActivationLayout::index_of(const NeuronAddress& a) const {
  if (!valid(a))
    throw Error("bad_address", "address " + to_string(a) + " out of range for this model");
  int64_t off = 0;
  switch (a.site) {
    case Site::Q: off = 0; break;
    case Site::K: off = d_; break;
    case Site::V: off = 2 * d_; break;
    case Site::O: off = 3 * d_; break;
    case Site::Gate: off = 4 * d_; break;
    case Site::Up: off = 4 * d_ + ff_; break;
    case Site::Down: off = 4 * d_ + 2 * ff_; break;
  }
  return a.layer * layer_stride_ + off + a.index;
}

NeuronAddress ActivationLayout::address_at(int64_t flat) const {
  if (flat < 0 || flat >= total())
    throw Error("bad_address", "flat index " + std::to_string(flat) + " out of range");
  NeuronAddress a;
  a.layer = static_cast<int32_t>(flat / layer_stride_);
  int64_t rem = flat % layer_stride_;
  if (rem < d_) { a.site = Site::Q; a.index = static_cast<int32_t>(rem); }
  else if (rem < 2 * d_) { a.site = Site::K; a.index = static_cast<int32_t>(rem - d_); }
  else if (rem < 3 * d_) { a.site = Site::V; a.index = static_cast<int32_t>(rem - 2 * d_); }
  else if (rem < 4 * d_) { a.site = Site::O; a.index = static_cast<int32_t>(rem - 3 * d_); }
  else if (rem < 4 * d_ + ff_) { a.site = Site::Gate; a.index = static_cast<int32_t>(rem - 4 * d_); }
  else if (rem < 4 * d_ + 2 * ff_) { a.site = Site::Up; a.index = static_cast<int32_t>(rem - 4 * d_ - ff_); }
  else { a.site = Site::Down; a.index = static_cast<int32_t>(rem - 4 * d_ - 2 * ff_); }
  return a;
}

const Tensor& Model::param(std::string_view name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw Error("bad_argument", "model has no parameter '" + std::string(name) + "'");
}

Tensor& Model::param(std::string_view name) {
  for (auto& [n, t] : params)
    if (n == name) return t;
  throw Error("bad_argument", "model has no parameter '" + std::string(name) + "'");
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

namespace {

std::string layer_param(int64_t l, const char* suffix) {
  return "layers." + std::to_string(l) + "." + suffix;
}

// Declared parameter order; initialization, serialization, and training all
// iterate parameters in exactly this order.
std::vector<std::pair<std::string, std::vector<int64_t>>> param_plan(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<int64_t>>> plan;
  plan.emplace_back("tok_emb", std::vector<int64_t>{cfg.vocab_size, cfg.d_model});
  plan.emplace_back("pos_emb", std::vector<int64_t>{cfg.max_seq_len, cfg.d_model});
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    plan.emplace_back(layer_param(l, "wq"), std::vector<int64_t>{cfg.d_model, cfg.d_model});
    plan.emplace_back(layer_param(l, "wk"), std::vector<int64_t>{cfg.d_model, cfg.d_model});
    plan.emplace_back(layer_param(l, "wv"), std::vector<int64_t>{cfg.d_model, cfg.d_model});
    plan.emplace_back(layer_param(l, "wo"), std::vector<int64_t>{cfg.d_model, cfg.d_model});
    plan.emplace_back(layer_param(l, "w_gate"), std::vector<int64_t>{cfg.d_model, cfg.d_ff});
    plan.emplace_back(layer_param(l, "w_up"), std::vector<int64_t>{cfg.d_model, cfg.d_ff});
    plan.emplace_back(layer_param(l, "w_down"), std::vector<int64_t>{cfg.d_ff, cfg.d_model});
    plan.emplace_back(layer_param(l, "g_attn"), std::vector<int64_t>{cfg.d_model});
    plan.emplace_back(layer_param(l, "g_mlp"), std::vector<int64_t>{cfg.d_model});
  }
  plan.emplace_back("head", std::vector<int64_t>{cfg.d_model, 1});
  return plan;
}

bool is_gain(std::string_view name) {
  return name.ends_with("g_attn") || name.ends_with("g_mlp");
}

}  // namespace

Model init_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng(cfg.init_seed);
  for (auto& [name, shape] : param_plan(cfg)) {
    Tensor t(shape);
    if (is_gain(name)) {
      t.fill(1.0);
    } else {
      for (double& v : t.data) v = rng.gauss() * 0.02;
    }
    m.params.emplace_back(name, std::move(t));
  }
  return m;
}

ForwardBuild append_forward(Graph& g, const ModelConfig& cfg, int64_t seq_len,
                            const std::string& tokens_leaf) {
  cfg.validate();
  if (seq_len <= 0 || seq_len > cfg.max_seq_len)
    throw Error("too_long", "sequence length " + std::to_string(seq_len) + " outside [1, " +
                                std::to_string(cfg.max_seq_len) + "]");

  // Parameter leaves are shared between forwards appended to the same graph.
  auto param_leaf = [&](const std::string& name) {
    int id = g.find(name);
    return id >= 0 ? id : g.leaf(name);
  };

  ForwardBuild fb;
  fb.tokens_leaf = tokens_leaf;
  fb.seq_len = seq_len;

  int tokens = g.leaf(tokens_leaf);
  int x = g.add(g.embedding(param_leaf("tok_emb"), tokens),
                g.slice(param_leaf("pos_emb"), 0, 0, seq_len));

  int64_t dh = cfg.head_dim();
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    std::array<int, kSiteCount> taps{};

    int normed = g.rms_norm(x, param_leaf(layer_param(l, "g_attn")));
    int q = g.matmul(normed, param_leaf(layer_param(l, "wq")));
    int k = g.matmul(normed, param_leaf(layer_param(l, "wk")));
    int v = g.matmul(normed, param_leaf(layer_param(l, "wv")));
    taps[static_cast<int>(Site::Q)] = q;
    taps[static_cast<int>(Site::K)] = k;
    taps[static_cast<int>(Site::V)] = v;

    // Per-head attention; the per-head output projections (row blocks of wo)
    // are summed left to right, and that sum is the O site.
    int wo = param_leaf(layer_param(l, "wo"));
    int attn_out = -1;
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      int qh = g.slice(q, 1, h * dh, (h + 1) * dh);
      int kh = g.slice(k, 1, h * dh, (h + 1) * dh);
      int vh = g.slice(v, 1, h * dh, (h + 1) * dh);
      int scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dh);
      int weights = g.row_softmax(scores, /*causal=*/true);
      int ctx = g.matmul(weights, vh);
      int oh = g.matmul(ctx, g.slice(wo, 0, h * dh, (h + 1) * dh));
      attn_out = attn_out < 0 ? oh : g.add(attn_out, oh);
    }
    taps[static_cast<int>(Site::O)] = attn_out;
    x = g.add(x, attn_out);

    int normed2 = g.rms_norm(x, param_leaf(layer_param(l, "g_mlp")));
    int gate = g.matmul(normed2, param_leaf(layer_param(l, "w_gate")));
    int up = g.matmul(normed2, param_leaf(layer_param(l, "w_up")));
    taps[static_cast<int>(Site::Gate)] = gate;
    taps[static_cast<int>(Site::Up)] = up;
    int down = g.matmul(g.mul(g.silu(gate), up), param_leaf(layer_param(l, "w_down")));
    taps[static_cast<int>(Site::Down)] = down;
    x = g.add(x, down);

    fb.taps.push_back(taps);
  }

  fb.reward = g.matmul(g.slice(x, 0, seq_len - 1, seq_len), param_leaf("head"));
  return fb;
}

Bindings model_bindings(const Model& m) {
  Bindings b;
  for (const auto& [name, t] : m.params) b[name] = t;
  return b;
}

Tensor tokens_tensor(std::span<const int64_t> tokens) {
  Tensor t({static_cast<int64_t>(tokens.size())});
  for (size_t i = 0; i < tokens.size(); ++i) t.data[i] = static_cast<double>(tokens[i]);
  return t;
}

std::vector<NodePatch> build_patches(const ForwardBuild& fb, const ActivationLayout& layout,
                                     const InterventionMap& interventions) {
  std::vector<NodePatch> patches;
  patches.reserve(interventions.size());
  for (const auto& [addr, value] : interventions) {
    if (!layout.valid(addr))
      throw Error("bad_address", "intervention address " + to_string(addr) + " out of range");
    NodePatch p;
    p.node = fb.taps[static_cast<size_t>(addr.layer)][static_cast<int>(addr.site)];
    p.row = fb.seq_len - 1;
    p.col = addr.index;
    p.value = value;
    patches.push_back(p);
  }
  return patches;
}

ActivationRecord extract_record(const Evaluator& ev, const ForwardBuild& fb,
                                const ActivationLayout& layout) {
  ActivationRecord rec;
  rec.values.resize(static_cast<size_t>(layout.total()));
  size_t pos = 0;
  int64_t last = fb.seq_len - 1;
  for (const auto& taps : fb.taps) {
    for (Site s : kAllSites) {
      const Tensor& t = ev.value(taps[static_cast<int>(s)]);
      int64_t dim = layout.site_dim(s);
      const double* row = t.data.data() + last * t.cols();
      for (int64_t j = 0; j < dim; ++j) rec.values[pos++] = row[j];
    }
  }
  return rec;
}

void validate_tokens(const Model& m, std::span<const int64_t> tokens) {
  if (tokens.empty()) throw Error("empty_sequence", "cannot score an empty token sequence");
  if (static_cast<int64_t>(tokens.size()) > m.config.max_seq_len)
    throw Error("too_long", "sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_seq_len " + std::to_string(m.config.max_seq_len));
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= m.config.vocab_size)
      throw Error("token_range", "token " + std::to_string(tokens[i]) + " at position " +
                                     std::to_string(i) + " outside vocabulary of " +
                                     std::to_string(m.config.vocab_size));
  }
}

ScoreResult score_intervened(const Model& m, std::span<const int64_t> tokens,
                             const InterventionMap& interventions) {
  validate_tokens(m, tokens);
  Graph g;
  ForwardBuild fb = append_forward(g, m.config, static_cast<int64_t>(tokens.size()), "tokens");
  ActivationLayout layout(m.config);
  std::vector<NodePatch> patches = build_patches(fb, layout, interventions);

  Bindings bind = model_bindings(m);
  bind["tokens"] = tokens_tensor(tokens);
  Evaluator ev(g);
  ev.run(bind, patches);

  ScoreResult result;
  result.reward = ev.value(fb.reward).data[0];
  result.record = extract_record(ev, fb, layout);
  return result;
}

ScoreResult score(const Model& m, std::span<const int64_t> tokens) {
  return score_intervened(m, tokens, {});
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr char kMagic[4] = {'C', 'I', 'R', 'M'};
constexpr uint32_t kVersion = 1;
}  // namespace

std::string serialize_model(const Model& m) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(m.config.vocab_size));
  w.u32(static_cast<uint32_t>(m.config.d_model));
  w.u32(static_cast<uint32_t>(m.config.n_layers));
  w.u32(static_cast<uint32_t>(m.config.n_heads));
  w.u32(static_cast<uint32_t>(m.config.d_ff));
  w.u32(static_cast<uint32_t>(m.config.max_seq_len));
  w.u64(m.config.init_seed);
  for (const auto& [name, t] : m.params)
    for (double v : t.data) w.f64(v);
  return w.take();
}

uint64_t model_checksum(const Model& m) {
  std::string body = serialize_model(m);
  return fnv1a64(body.data(), body.size());
}

void save_model(const Model& m, const std::string& path) {
  std::string body = serialize_model(m);
  uint64_t checksum = fnv1a64(body.data(), body.size());
  ByteWriter tail;
  tail.u64(checksum);
  body += tail.data();
  write_file(path, body);
}

Model load_model(const std::string& path) {
  std::string blob = read_file(path);
  if (blob.size() < 12 + 8) throw Error("truncated", "model file too small: " + path);

  std::string_view body(blob.data(), blob.size() - 8);
  ByteReader tail(std::string_view(blob.data() + blob.size() - 8, 8));
  uint64_t stored = tail.u64();
  uint64_t actual = fnv1a64(body.data(), body.size());
  if (stored != actual)
    throw Error("checksum_mismatch", "model file checksum mismatch in " + path + ": stored " +
                                         hex_u64(stored) + ", computed " + hex_u64(actual));

  ByteReader r(body);
  if (r.bytes(4) != std::string_view(kMagic, 4))
    throw Error("bad_magic", "not a model file: " + path);
  uint32_t version = r.u32();
  if (version != kVersion)
    throw Error("bad_version", "unsupported model file version " + std::to_string(version));

  Model m;
  m.config.vocab_size = r.u32();
  m.config.d_model = r.u32();
  m.config.n_layers = r.u32();
  m.config.n_heads = r.u32();
  m.config.d_ff = r.u32();
  m.config.max_seq_len = r.u32();
  m.config.init_seed = r.u64();
  m.config.validate();

  for (auto& [name, shape] : param_plan(m.config)) {
    Tensor t(shape);
    for (double& v : t.data) v = r.f64();
    m.params.emplace_back(name, std::move(t));
  }
  if (!r.at_end())
    throw Error("truncated", "model file has " + std::to_string(r.remaining()) + " unexpected trailing bytes");
  return m;
}

}  // namespace cirm
