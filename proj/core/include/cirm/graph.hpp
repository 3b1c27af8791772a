#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm {

// Fixed op vocabulary for the expression graph. The model forward pass is
// expressed entirely in these ops so the same graph serves evaluation,
// gradient computation, and activation patching.
enum class Op : uint8_t {
  leaf,         // externally bound input
  matmul,       // (n,k) x (k,m) -> (n,m)
  add,          // elementwise, same shape
  mul,          // elementwise, same shape
  row_softmax,  // per-row softmax; causal=true restricts row i to columns <= i
  rms_norm,     // row-wise RMS normalization with a learned gain vector
  silu,         // x * sigmoid(x)
  sigmoid,      //
  embedding,    // (V,d) table gathered by an integer index vector (L) -> (L,d)
  slice,        // contiguous range along axis 0 or 1
  transpose,    // (n,m) -> (m,n)
  scale,        // multiply by a compile-time constant
};

std::string_view op_name(Op op);

struct Node {
  Op op = Op::leaf;
  int32_t a = -1;  // first input
  int32_t b = -1;  // second input (matmul/add/mul/rms_norm/embedding)
  // op-specific attributes
  int32_t axis = 0;
  int64_t start = 0;
  int64_t stop = 0;
  double scalar = 1.0;   // scale factor
  double eps = 1e-6;     // rms_norm epsilon
  bool causal = false;   // row_softmax masking
  std::string name;      // required for leaves, optional elsewhere
};

// Append-only DAG builder. Node ids are indices in insertion order, so a
// node's inputs always precede it and a single forward sweep evaluates the
// whole graph.
class Graph {
public:
  int leaf(std::string name);
  int matmul(int a, int b);
  int add(int a, int b);
  int mul(int a, int b);
  int row_softmax(int a, bool causal = false);
  int rms_norm(int x, int gain, double eps = 1e-6);
  int silu(int a);
  int sigmoid(int a);
  int embedding(int table, int indices);
  int slice(int a, int axis, int64_t start, int64_t stop);
  int transpose(int a);
  int scale(int a, double s);

  // Attaches a name to an existing node so evaluate()/gradient() can address
  // it. Names must be unique within a graph.
  void set_name(int node, std::string name);

  int find(std::string_view name) const;  // -1 when absent
  int require(std::string_view name) const;

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<int>& leaves() const { return leaves_; }

private:
  int push(Node n);
  int check_id(int id, const char* what) const;

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  std::map<std::string, int, std::less<>> names_;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;

// One activation override: after `node` is computed, values[row, col] is
// replaced before any consumer reads it.
struct NodePatch {
  int node = -1;
  int64_t row = 0;
  int64_t col = 0;
  double value = 0.0;
};

// Evaluates a graph, holding per-node buffers that are reused across runs so
// repeated evaluation of the same shapes does not allocate. Bound leaf
// tensors are referenced, not copied; the bindings must outlive the run.
class Evaluator {
public:
  explicit Evaluator(const Graph& g);

  void run(const Bindings& bindings);
  void run(const Bindings& bindings, std::span<const NodePatch> patches);

  const Tensor& value(int node) const;

  // Reverse-mode sweep from a scalar-valued node. seed is d(objective)/d(node)
  // for objectives computed outside the graph from that node's value.
  void backward(int output, double seed = 1.0);

  const Tensor& grad(int node) const;
  bool ran() const { return ran_; }

private:
  void compute(int id);
  void apply_patches(std::span<const NodePatch> patches);
  void check_finite(int id, const Tensor& t) const;
  [[noreturn]] void fail_shape(int id, const std::string& detail) const;
  const Tensor& input(int id) const;
  Tensor& out(int id, std::vector<int64_t> shape);
  Tensor& grad_buf(int id, const Tensor& like);

  const Graph* g_;
  std::vector<Tensor> values_;             // non-leaf outputs
  std::vector<const Tensor*> bound_;       // leaf bindings
  std::vector<Tensor> grads_;
  std::vector<uint8_t> grad_live_;
  bool ran_ = false;
  bool patched_run_ = false;
};

// Convenience wrappers over Evaluator.
//
// evaluate: returns the values of all named nodes.
// gradient: reverse-mode gradients of the named scalar output with respect to
//           the named leaves.
// finite_difference_gradient: central differences with the given step; the
//           independent check used to validate the reverse-mode sweep.
std::map<std::string, Tensor> evaluate(const Graph& g, const Bindings& bindings);
std::map<std::string, Tensor> gradient(const Graph& g, const Bindings& bindings,
                                       const std::vector<std::string>& wrt,
                                       std::string_view output);
std::map<std::string, Tensor> finite_difference_gradient(const Graph& g, const Bindings& bindings,
                                                         const std::vector<std::string>& wrt,
                                                         std::string_view output, double step);

// Overflow-safe logistic function; the single implementation shared by the
// sigmoid/silu kernels, preference probabilities, and the training loss so
// they agree bitwise.
double stable_sigmoid(double x);

}  // namespace cirm
