#include <cmath>
#include <filesystem>

#include "cirm/error.hpp"
#include "cirm/features.hpp"
#include "cirm/model.hpp"
#include "cirm/serial.hpp"
#include "doctest.h"

using namespace cirm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 24;
  cfg.init_seed = 99;
  return cfg;
}

std::vector<int64_t> some_tokens(int64_t n, int64_t vocab) {
  std::vector<int64_t> t;
  for (int64_t i = 0; i < n; ++i) t.push_back((i * 7 + 3) % vocab);
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation catches bad dimensions") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.d_model = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_NOTHROW(tiny_config().validate());
  CHECK_NOTHROW(ModelConfig{}.validate());  // defaults are valid
}

TEST_CASE("initialization is seed-deterministic with unit gains") {
  Model a = init_model(tiny_config());
  Model b = init_model(tiny_config());
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].first == b.params[i].first);
    CHECK(a.params[i].second.data == b.params[i].second.data);
  }

  for (double v : a.param("layers.0.g_attn").data) CHECK(v == 1.0);
  for (double v : a.param("layers.1.g_mlp").data) CHECK(v == 1.0);

  // Weight scale is roughly 0.02.
  const Tensor& w = a.param("tok_emb");
  double ss = 0.0;
  for (double v : w.data) ss += v * v;
  double sd = std::sqrt(ss / static_cast<double>(w.numel()));
  CHECK(sd > 0.01);
  CHECK(sd < 0.03);

  ModelConfig other = tiny_config();
  other.init_seed = 100;
  Model c = init_model(other);
  CHECK(c.param("tok_emb").data != a.param("tok_emb").data);
}

TEST_CASE("declared parameter order is stable") {
  Model m = init_model(tiny_config());
  REQUIRE(m.params.size() == 2 + 2 * 9 + 1);
  CHECK(m.params[0].first == "tok_emb");
  CHECK(m.params[1].first == "pos_emb");
  CHECK(m.params[2].first == "layers.0.wq");
  CHECK(m.params[10].first == "layers.0.g_mlp");
  CHECK(m.params[11].first == "layers.1.wq");
  CHECK(m.params.back().first == "head");
}

TEST_CASE("activation layout has the documented stride and round-trips") {
  ModelConfig cfg = tiny_config();
  ActivationLayout layout(cfg);
  CHECK(layout.total() == cfg.n_layers * (4 * cfg.d_model + 2 * cfg.d_ff + cfg.d_model));
  for (int64_t flat = 0; flat < layout.total(); ++flat) {
    NeuronAddress a = layout.address_at(flat);
    CHECK(layout.index_of(a) == flat);
  }
  CHECK_THROWS_AS(layout.index_of({9, Site::Q, 0}), Error);
  CHECK_THROWS_AS(layout.index_of({0, Site::Gate, 16}), Error);
  CHECK_THROWS_AS(layout.address_at(layout.total()), Error);
}

TEST_CASE("neuron addresses serialize as layer.site.index") {
  NeuronAddress a{2, Site::Gate, 17};
  CHECK(to_string(a) == "2.GATE.17");
  CHECK(parse_address("2.GATE.17") == a);
  for (Site s : kAllSites) {
    NeuronAddress x{1, s, 3};
    CHECK(parse_address(to_string(x)) == x);
  }
  CHECK_THROWS_AS(parse_address("1.NOPE.3"), Error);
  CHECK_THROWS_AS(parse_address("1.Q"), Error);
  CHECK_THROWS_AS(parse_address("x.Q.1"), Error);
}

TEST_CASE("canonical address order is layer, then site, then channel") {
  CHECK(NeuronAddress{0, Site::Down, 99} < NeuronAddress{1, Site::Q, 0});
  CHECK(NeuronAddress{0, Site::Q, 5} < NeuronAddress{0, Site::K, 0});
  CHECK(NeuronAddress{0, Site::Gate, 1} < NeuronAddress{0, Site::Gate, 2});
}

TEST_CASE("scoring is deterministic and validates tokens") {
  Model m = init_model(tiny_config());
  auto toks = some_tokens(10, m.config.vocab_size);
  ScoreResult r1 = score(m, toks);
  ScoreResult r2 = score(m, toks);
  CHECK(r1.reward == r2.reward);
  CHECK(r1.record.values == r2.record.values);
  CHECK(std::isfinite(r1.reward));
  ActivationLayout layout(m.config);
  CHECK(static_cast<int64_t>(r1.record.values.size()) == layout.total());

  CHECK_THROWS_AS(score(m, std::vector<int64_t>{}), Error);
  CHECK_THROWS_AS(score(m, some_tokens(m.config.max_seq_len + 1, m.config.vocab_size)), Error);
  CHECK_THROWS_AS(score(m, std::vector<int64_t>{0, 64}), Error);
  CHECK_THROWS_AS(score(m, std::vector<int64_t>{-1}), Error);
}

TEST_CASE("causal attention: earlier positions are unchanged when tokens are appended") {
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  auto short_toks = some_tokens(6, cfg.vocab_size);
  auto long_toks = some_tokens(11, cfg.vocab_size);  // same first 6 tokens

  Graph g_short, g_long;
  ForwardBuild fb_s = append_forward(g_short, cfg, 6, "t");
  ForwardBuild fb_l = append_forward(g_long, cfg, 11, "t");
  Bindings bind_s = model_bindings(m);
  bind_s["t"] = tokens_tensor(short_toks);
  Bindings bind_l = model_bindings(m);
  bind_l["t"] = tokens_tensor(long_toks);
  Evaluator ev_s(g_short), ev_l(g_long);
  ev_s.run(bind_s);
  ev_l.run(bind_l);

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    for (Site s : kAllSites) {
      const Tensor& a = ev_s.value(fb_s.taps[static_cast<size_t>(l)][static_cast<int>(s)]);
      const Tensor& b = ev_l.value(fb_l.taps[static_cast<size_t>(l)][static_cast<int>(s)]);
      for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < a.cols(); ++j) CHECK(a.at(i, j) == b.at(i, j));
    }
  }
}

TEST_CASE("an empty intervention map reproduces score() bitwise") {
  Model m = init_model(tiny_config());
  auto toks = some_tokens(12, m.config.vocab_size);
  ScoreResult plain = score(m, toks);
  ScoreResult patched = score_intervened(m, toks, {});
  CHECK(plain.reward == patched.reward);
  CHECK(plain.record.values == patched.record.values);
}

TEST_CASE("interventions overwrite exactly the addressed activations") {
  Model m = init_model(tiny_config());
  ActivationLayout layout(m.config);
  auto toks = some_tokens(9, m.config.vocab_size);
  ScoreResult plain = score(m, toks);

  InterventionMap iv = {{{0, Site::Gate, 3}, 5.0}, {{1, Site::Q, 1}, -2.5}};
  ScoreResult patched = score_intervened(m, toks, iv);
  CHECK(patched.record.values[static_cast<size_t>(layout.index_of({0, Site::Gate, 3}))] == 5.0);
  CHECK(patched.record.values[static_cast<size_t>(layout.index_of({1, Site::Q, 1}))] == -2.5);
  // A large gate override must propagate to the reward.
  CHECK(patched.reward != plain.reward);

  // Out-of-range addresses are rejected.
  CHECK_THROWS_AS(score_intervened(m, toks, InterventionMap{{{5, Site::Q, 0}, 0.0}}), Error);
  CHECK_THROWS_AS(score_intervened(m, toks, InterventionMap{{{0, Site::Up, 99}, 0.0}}), Error);
}

TEST_CASE("patching sites feeds downstream consumers, not just the record") {
  // Patching DOWN of the last layer shifts the reward by head-weighted delta:
  // reward' - reward = sum_j (patch_j - orig_j) * head_j at the last position.
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  auto toks = some_tokens(7, cfg.vocab_size);
  ScoreResult plain = score(m, toks);
  ActivationLayout layout(cfg);

  int32_t last_layer = static_cast<int32_t>(cfg.n_layers - 1);
  NeuronAddress addr{last_layer, Site::Down, 2};
  double orig = plain.record.values[static_cast<size_t>(layout.index_of(addr))];
  double patch_value = orig + 10.0;
  ScoreResult patched = score_intervened(m, toks, {{addr, patch_value}});

  double head_w = m.param("head").data[2];
  CHECK(patched.reward == doctest::Approx(plain.reward + 10.0 * head_w).epsilon(1e-12));
}

TEST_CASE("model save/load round-trips bitwise and checks integrity") {
  namespace fs = std::filesystem;
  Model m = init_model(tiny_config());
  std::string path = (fs::temp_directory_path() / "cirm_model_test.bin").string();
  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.config == m.config);
  REQUIRE(loaded.params.size() == m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    CHECK(loaded.params[i].first == m.params[i].first);
    CHECK(loaded.params[i].second.data == m.params[i].second.data);
  }
  CHECK(model_checksum(loaded) == model_checksum(m));

  // Scores agree bitwise after a round-trip.
  auto toks = some_tokens(8, m.config.vocab_size);
  CHECK(score(m, toks).reward == score(loaded, toks).reward);

  // Flip one byte in the middle: checksum must catch it.
  std::string blob = read_file(path);
  blob[blob.size() / 2] = static_cast<char>(blob[blob.size() / 2] ^ 0x01);
  write_file(path, blob);
  try {
    load_model(path);
    FAIL("expected checksum error");
  } catch (const Error& e) {
    CHECK(e.kind() == "checksum_mismatch");
  }

  // Truncation is caught.
  write_file(path, std::string_view(blob).substr(0, 10));
  CHECK_THROWS_AS(load_model(path), Error);
  fs::remove(path);
}

TEST_CASE("reward gradients match central differences on the full tiny model") {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 8;
  cfg.init_seed = 5;
  Model m = init_model(cfg);

  Graph g;
  ForwardBuild fb = append_forward(g, cfg, 5, "tokens");
  g.set_name(fb.reward, "reward");
  Bindings bind = model_bindings(m);
  bind["tokens"] = tokens_tensor(some_tokens(5, cfg.vocab_size));

  std::vector<std::string> wrt;
  for (const auto& [name, t] : m.params) wrt.push_back(name);
  auto ad = gradient(g, bind, wrt, "reward");
  auto fd = finite_difference_gradient(g, bind, wrt, "reward", 1e-5);
  double worst = 0.0;
  for (const auto& name : wrt) {
    const Tensor& a = ad.at(name);
    const Tensor& f = fd.at(name);
    REQUIRE(a.shape == f.shape);
    for (size_t i = 0; i < a.data.size(); ++i) {
      double denom = std::max(1e-6, std::abs(f.data[i]));
      worst = std::max(worst, std::abs(a.data[i] - f.data[i]) / denom);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_SUITE_END();
