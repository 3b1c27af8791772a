#include "cirm/graph.hpp"

#include <cmath>
#include <cstring>

#include "cirm/error.hpp"

namespace cirm {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::row_softmax: return "row_softmax";
    case Op::rms_norm: return "rms_norm";
    case Op::silu: return "silu";
    case Op::sigmoid: return "sigmoid";
    case Op::embedding: return "embedding";
    case Op::slice: return "slice";
    case Op::transpose: return "transpose";
    case Op::scale: return "scale";
  }
  return "?";
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

std::string node_label(const Graph& g, int id) {
  const Node& n = g.node(id);
  std::string s = std::string(op_name(n.op)) + "#" + std::to_string(id);
  if (!n.name.empty()) s += " ('" + n.name + "')";
  return s;
}

// C (n,m) += or = A (n,k) * B (k,m). The k loop is outermost inside each row
// so every C[i,j] accumulates contributions in ascending k order — a fixed
// summation order regardless of vectorization.
void matmul_nn(const double* A, const double* B, double* C, int64_t n, int64_t k, int64_t m) {
  std::memset(C, 0, static_cast<size_t>(n * m) * sizeof(double));
  for (int64_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    double* c = C + i * m;
    for (int64_t l = 0; l < k; ++l) {
      double av = a[l];
      const double* b = B + l * m;
      for (int64_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// dA (n,k) += dC (n,m) * B^T, with B (k,m).
void matmul_acc_nt(const double* dC, const double* B, double* dA, int64_t n, int64_t k, int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    const double* dc = dC + i * m;
    double* da = dA + i * k;
    for (int64_t l = 0; l < k; ++l) {
      const double* b = B + l * m;
      double s = 0.0;
      for (int64_t j = 0; j < m; ++j) s += dc[j] * b[j];
      da[l] += s;
    }
  }
}

// dB (k,m) += A^T * dC, with A (n,k), dC (n,m).
void matmul_acc_tn(const double* A, const double* dC, double* dB, int64_t n, int64_t k, int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    const double* dc = dC + i * m;
    for (int64_t l = 0; l < k; ++l) {
      double av = a[l];
      double* db = dB + l * m;
      for (int64_t j = 0; j < m; ++j) db[j] += av * dc[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph builder

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_.back().op == Op::leaf) leaves_.push_back(id);
  return id;
}

int Graph::check_id(int id, const char* what) const {
  if (id < 0 || id >= size())
    throw Error("bad_argument", std::string("graph: invalid ") + what + " node id " + std::to_string(id));
  return id;
}

int Graph::leaf(std::string name) {
  if (name.empty()) throw Error("bad_argument", "graph: leaf requires a name");
  Node n;
  n.op = Op::leaf;
  n.name = name;
  int id = push(std::move(n));
  set_name(id, nodes_.back().name);
  return id;
}

int Graph::matmul(int a, int b) {
  Node n;
  n.op = Op::matmul;
  n.a = check_id(a, "matmul lhs");
  n.b = check_id(b, "matmul rhs");
  return push(std::move(n));
}

int Graph::add(int a, int b) {
  Node n;
  n.op = Op::add;
  n.a = check_id(a, "add lhs");
  n.b = check_id(b, "add rhs");
  return push(std::move(n));
}

int Graph::mul(int a, int b) {
  Node n;
  n.op = Op::mul;
  n.a = check_id(a, "mul lhs");
  n.b = check_id(b, "mul rhs");
  return push(std::move(n));
}

int Graph::row_softmax(int a, bool causal) {
  Node n;
  n.op = Op::row_softmax;
  n.a = check_id(a, "row_softmax input");
  n.causal = causal;
  return push(std::move(n));
}

int Graph::rms_norm(int x, int gain, double eps) {
  if (!(eps > 0.0)) throw Error("bad_argument", "graph: rms_norm eps must be positive");
  Node n;
  n.op = Op::rms_norm;
  n.a = check_id(x, "rms_norm input");
  n.b = check_id(gain, "rms_norm gain");
  n.eps = eps;
  return push(std::move(n));
}

int Graph::silu(int a) {
  Node n;
  n.op = Op::silu;
  n.a = check_id(a, "silu input");
  return push(std::move(n));
}

int Graph::sigmoid(int a) {
  Node n;
  n.op = Op::sigmoid;
  n.a = check_id(a, "sigmoid input");
  return push(std::move(n));
}

int Graph::embedding(int table, int indices) {
  Node n;
  n.op = Op::embedding;
  n.a = check_id(table, "embedding table");
  n.b = check_id(indices, "embedding indices");
  return push(std::move(n));
}

int Graph::slice(int a, int axis, int64_t start, int64_t stop) {
  if (axis != 0 && axis != 1) throw Error("bad_argument", "graph: slice axis must be 0 or 1");
  if (start < 0 || stop <= start)
    throw Error("bad_argument", "graph: slice requires 0 <= start < stop");
  Node n;
  n.op = Op::slice;
  n.a = check_id(a, "slice input");
  n.axis = axis;
  n.start = start;
  n.stop = stop;
  return push(std::move(n));
}

int Graph::transpose(int a) {
  Node n;
  n.op = Op::transpose;
  n.a = check_id(a, "transpose input");
  return push(std::move(n));
}

int Graph::scale(int a, double s) {
  Node n;
  n.op = Op::scale;
  n.a = check_id(a, "scale input");
  n.scalar = s;
  return push(std::move(n));
}

void Graph::set_name(int node, std::string name) {
  check_id(node, "set_name");
  if (name.empty()) throw Error("bad_argument", "graph: node name must be nonempty");
  auto [it, inserted] = names_.emplace(std::move(name), node);
  if (!inserted && it->second != node)
    throw Error("bad_argument", "graph: duplicate node name '" + it->first + "'");
  nodes_[static_cast<size_t>(node)].name = it->first;
}

int Graph::find(std::string_view name) const {
  auto it = names_.find(name);
  return it == names_.end() ? -1 : it->second;
}

int Graph::require(std::string_view name) const {
  int id = find(name);
  if (id < 0) throw Error("unknown_node", "graph: no node named '" + std::string(name) + "'");
  return id;
}

// ---------------------------------------------------------------------------
// Evaluator

Evaluator::Evaluator(const Graph& g) : g_(&g) {
  values_.resize(static_cast<size_t>(g.size()));
  bound_.assign(static_cast<size_t>(g.size()), nullptr);
  grads_.resize(static_cast<size_t>(g.size()));
  grad_live_.assign(static_cast<size_t>(g.size()), 0);
}

const Tensor& Evaluator::input(int id) const { return value(id); }

const Tensor& Evaluator::value(int node) const {
  const Node& n = g_->node(node);
  if (n.op == Op::leaf) {
    const Tensor* t = bound_[static_cast<size_t>(node)];
    if (t == nullptr) throw Error("missing_binding", "no binding for leaf '" + n.name + "'");
    return *t;
  }
  return values_[static_cast<size_t>(node)];
}

Tensor& Evaluator::out(int id, std::vector<int64_t> shape) {
  Tensor& t = values_[static_cast<size_t>(id)];
  if (t.shape != shape) t.reshape_to(shape);
  return t;
}

void Evaluator::fail_shape(int id, const std::string& detail) const {
  throw Error("shape_mismatch", "node " + node_label(*g_, id) + ": " + detail);
}

void Evaluator::check_finite(int id, const Tensor& t) const {
  for (double v : t.data) {
    if (!std::isfinite(v))
      throw Error("non_finite", "node " + node_label(*g_, id) + " produced a non-finite value");
  }
}

void Evaluator::run(const Bindings& bindings) { run(bindings, {}); }

void Evaluator::run(const Bindings& bindings, std::span<const NodePatch> patches) {
  for (int id : g_->leaves()) {
    const Node& n = g_->node(id);
    auto it = bindings.find(n.name);
    if (it == bindings.end())
      throw Error("missing_binding", "no binding for leaf '" + n.name + "'");
    bound_[static_cast<size_t>(id)] = &it->second;
  }

  // Validate patches up front; group them by node so each is applied
  // immediately after its node is computed, before any consumer runs.
  std::map<int, std::vector<const NodePatch*>> by_node;
  for (const NodePatch& p : patches) {
    if (p.node < 0 || p.node >= g_->size())
      throw Error("bad_patch", "patch targets invalid node id " + std::to_string(p.node));
    if (g_->node(p.node).op == Op::leaf)
      throw Error("bad_patch", "cannot patch leaf node " + node_label(*g_, p.node));
    if (!std::isfinite(p.value))
      throw Error("bad_patch", "patch value for node " + node_label(*g_, p.node) + " is not finite");
    by_node[p.node].push_back(&p);
  }

  for (int id = 0; id < g_->size(); ++id) {
    if (g_->node(id).op != Op::leaf) compute(id);
    if (!by_node.empty()) {
      auto it = by_node.find(id);
      if (it != by_node.end()) {
        Tensor& t = values_[static_cast<size_t>(id)];
        if (!t.is_matrix()) fail_shape(id, "patch target must be rank-2");
        for (const NodePatch* p : it->second) {
          if (p->row < 0 || p->row >= t.rows() || p->col < 0 || p->col >= t.cols())
            throw Error("bad_patch", "patch (" + std::to_string(p->row) + ", " + std::to_string(p->col) +
                                         ") out of range for node " + node_label(*g_, id) + " with shape " +
                                         t.shape_str());
          t.at(p->row, p->col) = p->value;
        }
      }
    }
  }
  ran_ = true;
  patched_run_ = !patches.empty();
}

void Evaluator::compute(int id) {
  const Node& n = g_->node(id);
  switch (n.op) {
    case Op::leaf:
      return;

    case Op::matmul: {
      const Tensor& A = input(n.a);
      const Tensor& B = input(n.b);
      if (!A.is_matrix() || !B.is_matrix())
        fail_shape(id, "matmul requires rank-2 inputs, got " + A.shape_str() + " and " + B.shape_str());
      if (A.cols() != B.rows())
        fail_shape(id, "matmul inner dimensions differ: " + A.shape_str() + " x " + B.shape_str());
      Tensor& C = out(id, {A.rows(), B.cols()});
      matmul_nn(A.data.data(), B.data.data(), C.data.data(), A.rows(), A.cols(), B.cols());
      check_finite(id, C);
      return;
    }

    case Op::add:
    case Op::mul: {
      const Tensor& A = input(n.a);
      const Tensor& B = input(n.b);
      if (!A.same_shape(B))
        fail_shape(id, std::string(op_name(n.op)) + " requires identical shapes, got " + A.shape_str() +
                           " and " + B.shape_str());
      Tensor& C = out(id, A.shape);
      const size_t cnt = A.data.size();
      if (n.op == Op::add) {
        for (size_t i = 0; i < cnt; ++i) C.data[i] = A.data[i] + B.data[i];
      } else {
        for (size_t i = 0; i < cnt; ++i) C.data[i] = A.data[i] * B.data[i];
      }
      check_finite(id, C);
      return;
    }

    case Op::row_softmax: {
      const Tensor& X = input(n.a);
      if (!X.is_matrix()) fail_shape(id, "row_softmax requires a rank-2 input, got " + X.shape_str());
      int64_t rows = X.rows(), cols = X.cols();
      Tensor& Y = out(id, X.shape);
      for (int64_t i = 0; i < rows; ++i) {
        // With causal masking row i attends to columns [0, i]; masked entries
        // are exactly zero, which keeps every value finite (no -inf logits)
        // and makes causality exact rather than approximate.
        int64_t vis = n.causal ? std::min<int64_t>(i + 1, cols) : cols;
        const double* x = X.data.data() + i * cols;
        double* y = Y.data.data() + i * cols;
        double mx = x[0];
        for (int64_t j = 1; j < vis; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < vis; ++j) {
          y[j] = std::exp(x[j] - mx);
          sum += y[j];
        }
        for (int64_t j = 0; j < vis; ++j) y[j] /= sum;
        for (int64_t j = vis; j < cols; ++j) y[j] = 0.0;
      }
      check_finite(id, Y);
      return;
    }

    case Op::rms_norm: {
      const Tensor& X = input(n.a);
      const Tensor& G = input(n.b);
      if (!X.is_matrix()) fail_shape(id, "rms_norm requires a rank-2 input, got " + X.shape_str());
      if (!G.is_vector() || G.shape[0] != X.cols())
        fail_shape(id, "rms_norm gain must be a vector of size " + std::to_string(X.cols()) + ", got " +
                           G.shape_str());
      int64_t rows = X.rows(), cols = X.cols();
      Tensor& Y = out(id, X.shape);
      for (int64_t i = 0; i < rows; ++i) {
        const double* x = X.data.data() + i * cols;
        double* y = Y.data.data() + i * cols;
        double ss = 0.0;
        for (int64_t j = 0; j < cols; ++j) ss += x[j] * x[j];
        double r = std::sqrt(ss / static_cast<double>(cols) + n.eps);
        for (int64_t j = 0; j < cols; ++j) y[j] = x[j] / r * G.data[static_cast<size_t>(j)];
      }
      check_finite(id, Y);
      return;
    }

    case Op::silu: {
      const Tensor& X = input(n.a);
      Tensor& Y = out(id, X.shape);
      for (size_t i = 0; i < X.data.size(); ++i) {
        double x = X.data[i];
        Y.data[i] = x * stable_sigmoid(x);
      }
      check_finite(id, Y);
      return;
    }

    case Op::sigmoid: {
      const Tensor& X = input(n.a);
      Tensor& Y = out(id, X.shape);
      for (size_t i = 0; i < X.data.size(); ++i) Y.data[i] = stable_sigmoid(X.data[i]);
      check_finite(id, Y);
      return;
    }

    case Op::embedding: {
      const Tensor& T = input(n.a);
      const Tensor& I = input(n.b);
      if (!T.is_matrix()) fail_shape(id, "embedding table must be rank-2, got " + T.shape_str());
      if (!I.is_vector()) fail_shape(id, "embedding indices must be rank-1, got " + I.shape_str());
      int64_t L = I.shape[0], V = T.rows(), d = T.cols();
      Tensor& Y = out(id, {L, d});
      for (int64_t i = 0; i < L; ++i) {
        double raw = I.data[static_cast<size_t>(i)];
        int64_t idx = static_cast<int64_t>(raw);
        if (static_cast<double>(idx) != raw || idx < 0 || idx >= V)
          throw Error("token_range", "node " + node_label(*g_, id) + ": index " + std::to_string(raw) +
                                         " at position " + std::to_string(i) + " outside table of " +
                                         std::to_string(V) + " rows");
        std::memcpy(Y.data.data() + i * d, T.data.data() + idx * d, static_cast<size_t>(d) * sizeof(double));
      }
      check_finite(id, Y);
      return;
    }

    case Op::slice: {
      const Tensor& X = input(n.a);
      if (!X.is_matrix()) fail_shape(id, "slice requires a rank-2 input, got " + X.shape_str());
      int64_t rows = X.rows(), cols = X.cols();
      int64_t extent = n.axis == 0 ? rows : cols;
      if (n.stop > extent)
        fail_shape(id, "slice [" + std::to_string(n.start) + ", " + std::to_string(n.stop) +
                           ") exceeds axis " + std::to_string(n.axis) + " of " + X.shape_str());
      if (n.axis == 0) {
        Tensor& Y = out(id, {n.stop - n.start, cols});
        std::memcpy(Y.data.data(), X.data.data() + n.start * cols,
                    static_cast<size_t>((n.stop - n.start) * cols) * sizeof(double));
        check_finite(id, Y);
      } else {
        int64_t w = n.stop - n.start;
        Tensor& Y = out(id, {rows, w});
        for (int64_t i = 0; i < rows; ++i)
          std::memcpy(Y.data.data() + i * w, X.data.data() + i * cols + n.start,
                      static_cast<size_t>(w) * sizeof(double));
        check_finite(id, Y);
      }
      return;
    }

    case Op::transpose: {
      const Tensor& X = input(n.a);
      if (!X.is_matrix()) fail_shape(id, "transpose requires a rank-2 input, got " + X.shape_str());
      int64_t rows = X.rows(), cols = X.cols();
      Tensor& Y = out(id, {cols, rows});
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) Y.data[static_cast<size_t>(j * rows + i)] = X.data[static_cast<size_t>(i * cols + j)];
      check_finite(id, Y);
      return;
    }

    case Op::scale: {
      const Tensor& X = input(n.a);
      Tensor& Y = out(id, X.shape);
      for (size_t i = 0; i < X.data.size(); ++i) Y.data[i] = X.data[i] * n.scalar;
      check_finite(id, Y);
      return;
    }
  }
}

Tensor& Evaluator::grad_buf(int id, const Tensor& like) {
  Tensor& t = grads_[static_cast<size_t>(id)];
  if (t.shape != like.shape) {
    t.reshape_to(like.shape);
    t.fill(0.0);
    grad_live_[static_cast<size_t>(id)] = 1;
  } else if (!grad_live_[static_cast<size_t>(id)]) {
    t.fill(0.0);
    grad_live_[static_cast<size_t>(id)] = 1;
  }
  return t;
}

const Tensor& Evaluator::grad(int node) const {
  if (!grad_live_[static_cast<size_t>(node)])
    throw Error("bad_argument", "no gradient was computed for node " + node_label(*g_, node));
  return grads_[static_cast<size_t>(node)];
}

void Evaluator::backward(int output, double seed) {
  if (!ran_) throw Error("bad_argument", "backward called before run");
  if (patched_run_)
    throw Error("unsupported", "backward after a patched run is not supported; patches are an inference-time construct");
  const Tensor& ov = value(output);
  if (ov.numel() != 1)
    throw Error("bad_argument", "backward requires a scalar output, node " + node_label(*g_, output) +
                                    " has shape " + ov.shape_str());

  // Reverse reachability from the output; unreached nodes are skipped.
  std::vector<uint8_t> needed(static_cast<size_t>(g_->size()), 0);
  needed[static_cast<size_t>(output)] = 1;
  for (int id = output; id >= 0; --id) {
    if (!needed[static_cast<size_t>(id)]) continue;
    const Node& n = g_->node(id);
    if (n.a >= 0) needed[static_cast<size_t>(n.a)] = 1;
    if (n.b >= 0) needed[static_cast<size_t>(n.b)] = 1;
  }

  std::fill(grad_live_.begin(), grad_live_.end(), 0);
  grad_buf(output, ov).data[0] = seed;

  for (int id = output; id >= 0; --id) {
    if (!needed[static_cast<size_t>(id)] || !grad_live_[static_cast<size_t>(id)]) continue;
    const Node& n = g_->node(id);
    if (n.op == Op::leaf) continue;
    const Tensor& dY = grads_[static_cast<size_t>(id)];

    switch (n.op) {
      case Op::leaf:
        break;

      case Op::matmul: {
        const Tensor& A = input(n.a);
        const Tensor& B = input(n.b);
        Tensor& dA = grad_buf(n.a, A);
        matmul_acc_nt(dY.data.data(), B.data.data(), dA.data.data(), A.rows(), A.cols(), B.cols());
        Tensor& dB = grad_buf(n.b, B);
        matmul_acc_tn(A.data.data(), dY.data.data(), dB.data.data(), A.rows(), A.cols(), B.cols());
        break;
      }

      case Op::add: {
        Tensor& dA = grad_buf(n.a, input(n.a));
        for (size_t i = 0; i < dY.data.size(); ++i) dA.data[i] += dY.data[i];
        Tensor& dB = grad_buf(n.b, input(n.b));
        for (size_t i = 0; i < dY.data.size(); ++i) dB.data[i] += dY.data[i];
        break;
      }

      case Op::mul: {
        const Tensor& A = input(n.a);
        const Tensor& B = input(n.b);
        {
          Tensor& dA = grad_buf(n.a, A);
          for (size_t i = 0; i < dY.data.size(); ++i) dA.data[i] += dY.data[i] * B.data[i];
        }
        {
          Tensor& dB = grad_buf(n.b, B);
          for (size_t i = 0; i < dY.data.size(); ++i) dB.data[i] += dY.data[i] * A.data[i];
        }
        break;
      }

      case Op::row_softmax: {
        const Tensor& Y = values_[static_cast<size_t>(id)];
        const Tensor& X = input(n.a);
        Tensor& dX = grad_buf(n.a, X);
        int64_t rows = Y.rows(), cols = Y.cols();
        for (int64_t i = 0; i < rows; ++i) {
          const double* y = Y.data.data() + i * cols;
          const double* dy = dY.data.data() + i * cols;
          double* dx = dX.data.data() + i * cols;
          double s = 0.0;
          for (int64_t j = 0; j < cols; ++j) s += dy[j] * y[j];
          // Masked columns have y == 0, so their dx contribution is zero.
          for (int64_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - s);
        }
        break;
      }

      case Op::rms_norm: {
        const Tensor& X = input(n.a);
        const Tensor& G = input(n.b);
        Tensor& dX = grad_buf(n.a, X);
        Tensor& dG = grad_buf(n.b, G);
        int64_t rows = X.rows(), cols = X.cols();
        double dn = static_cast<double>(cols);
        for (int64_t i = 0; i < rows; ++i) {
          const double* x = X.data.data() + i * cols;
          const double* dy = dY.data.data() + i * cols;
          double* dx = dX.data.data() + i * cols;
          double ss = 0.0;
          for (int64_t j = 0; j < cols; ++j) ss += x[j] * x[j];
          double r = std::sqrt(ss / dn + n.eps);
          double proj = 0.0;  // sum_k dy_k * x_k * g_k
          for (int64_t j = 0; j < cols; ++j) proj += dy[j] * x[j] * G.data[static_cast<size_t>(j)];
          double r3 = r * r * r;
          for (int64_t j = 0; j < cols; ++j) {
            dx[j] += dy[j] * G.data[static_cast<size_t>(j)] / r - x[j] * proj / (dn * r3);
            dG.data[static_cast<size_t>(j)] += dy[j] * x[j] / r;
          }
        }
        break;
      }

      case Op::silu: {
        const Tensor& X = input(n.a);
        Tensor& dX = grad_buf(n.a, X);
        for (size_t i = 0; i < X.data.size(); ++i) {
          double x = X.data[i];
          double sg = stable_sigmoid(x);
          dX.data[i] += dY.data[i] * sg * (1.0 + x * (1.0 - sg));
        }
        break;
      }

      case Op::sigmoid: {
        const Tensor& Y = values_[static_cast<size_t>(id)];
        Tensor& dX = grad_buf(n.a, input(n.a));
        for (size_t i = 0; i < Y.data.size(); ++i) {
          double y = Y.data[i];
          dX.data[i] += dY.data[i] * y * (1.0 - y);
        }
        break;
      }

      case Op::embedding: {
        const Tensor& T = input(n.a);
        const Tensor& I = input(n.b);
        Tensor& dT = grad_buf(n.a, T);
        int64_t L = I.shape[0], d = T.cols();
        for (int64_t i = 0; i < L; ++i) {
          int64_t idx = static_cast<int64_t>(I.data[static_cast<size_t>(i)]);
          const double* dy = dY.data.data() + i * d;
          double* dt = dT.data.data() + idx * d;
          for (int64_t j = 0; j < d; ++j) dt[j] += dy[j];
        }
        // Indices are integer positions; no gradient flows to them.
        break;
      }

      case Op::slice: {
        const Tensor& X = input(n.a);
        Tensor& dX = grad_buf(n.a, X);
        int64_t cols = X.cols();
        if (n.axis == 0) {
          int64_t w = dY.cols();
          for (int64_t i = 0; i < dY.rows(); ++i) {
            const double* dy = dY.data.data() + i * w;
            double* dx = dX.data.data() + (n.start + i) * cols;
            for (int64_t j = 0; j < w; ++j) dx[j] += dy[j];
          }
        } else {
          int64_t w = dY.cols();
          for (int64_t i = 0; i < dY.rows(); ++i) {
            const double* dy = dY.data.data() + i * w;
            double* dx = dX.data.data() + i * cols + n.start;
            for (int64_t j = 0; j < w; ++j) dx[j] += dy[j];
          }
        }
        break;
      }

      case Op::transpose: {
        const Tensor& X = input(n.a);
        Tensor& dX = grad_buf(n.a, X);
        int64_t rows = X.rows(), cols = X.cols();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j)
            dX.data[static_cast<size_t>(i * cols + j)] += dY.data[static_cast<size_t>(j * rows + i)];
        break;
      }

      case Op::scale: {
        Tensor& dX = grad_buf(n.a, input(n.a));
        for (size_t i = 0; i < dY.data.size(); ++i) dX.data[i] += dY.data[i] * n.scalar;
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convenience wrappers

std::map<std::string, Tensor> evaluate(const Graph& g, const Bindings& bindings) {
  Evaluator ev(g);
  ev.run(bindings);
  std::map<std::string, Tensor> result;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (!n.name.empty()) result[n.name] = ev.value(id);
  }
  return result;
}

std::map<std::string, Tensor> gradient(const Graph& g, const Bindings& bindings,
                                       const std::vector<std::string>& wrt, std::string_view output) {
  Evaluator ev(g);
  ev.run(bindings);
  ev.backward(g.require(output), 1.0);
  std::map<std::string, Tensor> result;
  for (const std::string& name : wrt) {
    int id = g.require(name);
    if (g.node(id).op != Op::leaf)
      throw Error("bad_argument", "gradient target '" + name + "' is not a leaf");
    auto it = bindings.find(name);
    if (it == bindings.end()) throw Error("missing_binding", "no binding for leaf '" + name + "'");
    try {
      result[name] = ev.grad(id);
    } catch (const Error&) {
      // Leaf unreachable from the output: gradient is identically zero.
      result[name] = Tensor(it->second.shape);
    }
  }
  return result;
}

std::map<std::string, Tensor> finite_difference_gradient(const Graph& g, const Bindings& bindings,
                                                         const std::vector<std::string>& wrt,
                                                         std::string_view output, double step) {
  if (!(step > 0.0)) throw Error("bad_argument", "finite_difference_gradient requires step > 0");
  Bindings local = bindings;
  int out_id = g.require(output);
  Evaluator ev(g);

  auto eval_scalar = [&]() {
    ev.run(local);
    const Tensor& v = ev.value(out_id);
    if (v.numel() != 1)
      throw Error("bad_argument", "finite_difference_gradient requires a scalar output, got shape " +
                                      v.shape_str());
    return v.data[0];
  };

  std::map<std::string, Tensor> result;
  for (const std::string& name : wrt) {
    auto it = local.find(name);
    if (it == local.end()) throw Error("missing_binding", "no binding for leaf '" + name + "'");
    Tensor& t = it->second;
    Tensor gr(t.shape);
    for (size_t c = 0; c < t.data.size(); ++c) {
      double orig = t.data[c];
      t.data[c] = orig + step;
      double fp = eval_scalar();
      t.data[c] = orig - step;
      double fm = eval_scalar();
      t.data[c] = orig;
      gr.data[c] = (fp - fm) / (2.0 * step);
    }
    result[name] = std::move(gr);
  }
  return result;
}

}  // namespace cirm
