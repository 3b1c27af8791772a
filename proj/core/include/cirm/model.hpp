#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cirm/graph.hpp"
#include "cirm/tensor.hpp"

namespace cirm {

// Toy decoder-only transformer reward model: pre-norm blocks, RMSNorm,
// multi-head causal self-attention, SiLU-gated MLP, learned absolute position
// embeddings, no bias terms, no final norm. The reward is a linear readout of
// the last position's residual stream.
struct ModelConfig {
  int64_t vocab_size = 256;
  int64_t d_model = 64;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_ff = 128;
  int64_t max_seq_len = 512;
  uint64_t init_seed = 0x5eed;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws Error("bad_config")
  bool operator==(const ModelConfig&) const = default;
};

// The seven per-layer activation sites that can be read out and patched.
// Enum order is the canonical site order used in flattened records.
enum class Site : uint8_t { Q = 0, K = 1, V = 2, O = 3, Gate = 4, Up = 5, Down = 6 };

inline constexpr int kSiteCount = 7;
inline constexpr Site kAllSites[kSiteCount] = {Site::Q, Site::K, Site::V, Site::O,
                                               Site::Gate, Site::Up, Site::Down};

std::string_view site_name(Site s);
Site site_from_name(std::string_view name);

// A single scalar activation coordinate: (layer, site, channel index).
struct NeuronAddress {
  int32_t layer = 0;
  Site site = Site::Q;
  int32_t index = 0;

  auto operator<=>(const NeuronAddress&) const = default;
};

// "layer.site.index", e.g. "2.GATE.17".
std::string to_string(const NeuronAddress& a);
NeuronAddress parse_address(std::string_view s);

// Maps neuron addresses to positions in the flattened per-token activation
// record (layer-major, then site order Q,K,V,O,GATE,UP,DOWN, then channel).
class ActivationLayout {
public:
  explicit ActivationLayout(const ModelConfig& cfg);

  int64_t total() const { return layers_ * layer_stride_; }
  int64_t site_dim(Site s) const { return (s == Site::Gate || s == Site::Up) ? ff_ : d_; }
  bool valid(const NeuronAddress& a) const;
  int64_t index_of(const NeuronAddress& a) const;  // throws Error("bad_address")
  NeuronAddress address_at(int64_t flat) const;

private:
  int64_t d_ = 0, ff_ = 0, layers_ = 0, layer_stride_ = 0;
};

// Flattened activations of the last token of one forward pass.
struct ActivationRecord {
  std::vector<double> values;
};

// Activation overrides keyed by address; applied where the site is produced,
// before anything downstream consumes it.
using InterventionMap = std::vector<std::pair<NeuronAddress, double>>;

struct Model {
  ModelConfig config;
  // Parameters in declared order; this order defines the serialization
  // layout and the initialization draw order.
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor& param(std::string_view name) const;
  Tensor& param(std::string_view name);
  int64_t param_count() const;
};

// Deterministic Gaussian(0, 0.02) initialization; norm gains start at 1.
Model init_model(const ModelConfig& cfg);

// Everything needed to drive one forward pass appended onto a graph. Multiple
// forwards can share one graph (and its parameter leaves); each gets its own
// tokens leaf.
struct ForwardBuild {
  int reward = -1;  // (1,1) node
  std::vector<std::array<int, kSiteCount>> taps;
  std::string tokens_leaf;
  int64_t seq_len = 0;
};

ForwardBuild append_forward(Graph& g, const ModelConfig& cfg, int64_t seq_len,
                            const std::string& tokens_leaf);

// Parameter bindings for a graph built by append_forward. Token tensors are
// added by the caller.
Bindings model_bindings(const Model& m);

Tensor tokens_tensor(std::span<const int64_t> tokens);

// Converts address-keyed overrides into node patches at the last position.
std::vector<NodePatch> build_patches(const ForwardBuild& fb, const ActivationLayout& layout,
                                     const InterventionMap& interventions);

ActivationRecord extract_record(const Evaluator& ev, const ForwardBuild& fb,
                                const ActivationLayout& layout);

struct ScoreResult {
  double reward = 0.0;
  ActivationRecord record;
};

// Rejects empty, overlong, and out-of-vocabulary token sequences with the
// errors empty_sequence / too_long / token_range.
void validate_tokens(const Model& m, std::span<const int64_t> tokens);

// Scores a token sequence, returning the reward and the last-token activation
// record. score_intervened additionally overrides the given activations; with
// an empty map it is bit-identical to score().
ScoreResult score(const Model& m, std::span<const int64_t> tokens);
ScoreResult score_intervened(const Model& m, std::span<const int64_t> tokens,
                             const InterventionMap& interventions);

// Binary model file: magic, version, config, raw parameter blobs in declared
// order, trailing FNV-1a checksum of everything before it.
std::string serialize_model(const Model& m);  // body without the checksum
uint64_t model_checksum(const Model& m);
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace cirm
