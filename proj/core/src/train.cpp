#include "cirm/train.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cirm/error.hpp"
#include "cirm/graph.hpp"
#include "cirm/hash.hpp"
#include "cirm/rng.hpp"
#include "cirm/serial.hpp"

namespace cirm {

std::string_view optimizer_name(Optimizer o) {
  return o == Optimizer::sgd ? "sgd" : "adam";
}

Optimizer optimizer_from_name(std::string_view name) {
  if (name == "sgd") return Optimizer::sgd;
  if (name == "adam") return Optimizer::adam;
  throw Error("bad_optimizer", "unknown optimizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw Error("bad_config", "epochs must be >= 0");
  if (batch_size < 1) throw Error("bad_config", "batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw Error("bad_config", "learning_rate must be > 0");
  if (!(clip_norm > 0.0)) throw Error("bad_config", "clip_norm must be > 0");
}

double bt_loss(double r_chosen, double r_rejected) {
  if (!std::isfinite(r_chosen) || !std::isfinite(r_rejected))
    throw Error("non_finite", "bt_loss requires finite rewards");
  double d = r_chosen - r_rejected;
  if (d >= 0.0) return std::log1p(std::exp(-d));
  return -d + std::log1p(std::exp(d));
}

namespace {

// One response's forward pass held open so the loss gradient can be seeded
// into its backward sweep after both rewards are known.
struct OpenForward {
  Graph graph;
  ForwardBuild fb;
  Bindings bindings;
  Tensor tokens;
  std::unique_ptr<Evaluator> ev;
  double reward = 0.0;

  void run(const Model& model, const PromptTemplate& prompt, const std::string& query,
           const std::string& response) {
    std::vector<int64_t> toks = byte_tokens(prompt.render(query, response));
    validate_tokens(model, toks);
    graph = Graph();
    fb = append_forward(graph, model.config, static_cast<int64_t>(toks.size()), "tokens");
    bindings = model_bindings(model);
    bindings["tokens"] = tokens_tensor(toks);
    ev = std::make_unique<Evaluator>(graph);
    ev->run(bindings);
    reward = ev->value(fb.reward).data[0];
  }

  // Adds seed * d(reward)/d(params) into the flat accumulator (declared
  // parameter order).
  void accumulate(const Model& model, double seed, std::vector<double>& grad) {
    ev->backward(fb.reward, seed);
    size_t off = 0;
    for (const auto& [name, t] : model.params) {
      const Tensor& g = ev->grad(graph.require(name));
      for (size_t i = 0; i < g.data.size(); ++i) grad[off + i] += g.data[i];
      off += t.data.size();
    }
  }
};

}  // namespace

TrainResult train(const Model& m, std::span<const LabeledPair> pairs, const TrainConfig& cfg,
                  const PromptTemplate& prompt) {
  cfg.validate();
  if (pairs.empty()) throw Error("empty_input", "train requires at least one pair");
  for (const LabeledPair& p : pairs)
    if (!p.pair.gold.has_value())
      throw Error("missing_gold", "train requires gold labels on every pair");

  TrainResult result;
  result.model = m;
  Model& model = result.model;

  size_t total = 0;
  for (const auto& [name, t] : model.params) total += t.data.size();
  std::vector<double> grad(total, 0.0);
  std::vector<double> m1, m2;
  if (cfg.optimizer == Optimizer::adam) {
    m1.assign(total, 0.0);
    m2.assign(total, 0.0);
  }

  const uint64_t shuffle_base = derive_seed(cfg.seed, fnv1a64("shuffle"));
  std::vector<int64_t> perm(pairs.size());
  OpenForward chosen, rejected;
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), int64_t{0});
    Rng shuffle_rng(derive_seed(shuffle_base, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(perm);

    double epoch_loss = 0.0;
    int64_t epoch_count = 0;
    for (size_t start = 0; start < perm.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(perm.size(), start + static_cast<size_t>(cfg.batch_size));
      int64_t batch_index = static_cast<int64_t>(start / static_cast<size_t>(cfg.batch_size));
      double inv_b = 1.0 / static_cast<double>(stop - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;

      try {
        for (size_t j = start; j < stop; ++j) {
          const LabeledPair& p = pairs[static_cast<size_t>(perm[j])];
          bool gold_a = *p.pair.gold == Gold::A;
          chosen.run(model, prompt, p.pair.query, gold_a ? p.pair.response_a : p.pair.response_b);
          rejected.run(model, prompt, p.pair.query, gold_a ? p.pair.response_b : p.pair.response_a);
          double loss = bt_loss(chosen.reward, rejected.reward);
          batch_loss += loss;
          // d(loss)/d(r_chosen) = -(1 - sigma(margin)); the rejected side gets
          // the opposite sign. Scale by 1/batch for the mean.
          double g = stable_sigmoid(rejected.reward - chosen.reward);
          chosen.accumulate(model, -g * inv_b, grad);
          rejected.accumulate(model, g * inv_b, grad);
        }
      } catch (const Error& e) {
        if (e.kind() == "non_finite")
          throw Error("divergence", "non-finite value at epoch " + std::to_string(epoch + 1) +
                                        " batch " + std::to_string(batch_index + 1) + ": " +
                                        e.what());
        throw;
      }

      double norm_sq = 0.0;
      for (double v : grad) norm_sq += v * v;
      double norm = std::sqrt(norm_sq);
      if (!std::isfinite(batch_loss) || !std::isfinite(norm))
        throw Error("divergence", "non-finite loss or gradient at epoch " +
                                      std::to_string(epoch + 1) + " batch " +
                                      std::to_string(batch_index + 1));
      if (norm > cfg.clip_norm) {
        double s = cfg.clip_norm / norm;
        for (double& v : grad) v *= s;
      }

      ++step;
      size_t off = 0;
      if (cfg.optimizer == Optimizer::sgd) {
        for (auto& [name, t] : model.params) {
          for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= cfg.learning_rate * grad[off + i];
          off += t.data.size();
        }
      } else {
        double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
        double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
        for (auto& [name, t] : model.params) {
          for (size_t i = 0; i < t.data.size(); ++i) {
            size_t k = off + i;
            m1[k] = kAdamBeta1 * m1[k] + (1.0 - kAdamBeta1) * grad[k];
            m2[k] = kAdamBeta2 * m2[k] + (1.0 - kAdamBeta2) * grad[k] * grad[k];
            double mhat = m1[k] / c1;
            double vhat = m2[k] / c2;
            t.data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
          }
          off += t.data.size();
        }
      }

      epoch_loss += batch_loss;
      epoch_count += static_cast<int64_t>(stop - start);
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(epoch_count));
  }
  return result;
}

void write_loss_csv(std::span<const double> curve, const std::string& path) {
  std::string out = "epoch,mean_loss\n";
  for (size_t i = 0; i < curve.size(); ++i)
    out += std::to_string(i + 1) + "," + format_double(curve[i]) + "\n";
  write_file(path, out);
}

}  // namespace cirm
