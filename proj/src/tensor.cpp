#include "rmmnav/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rmmnav {

namespace detail {

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool touched = false;  // leaf reached by a backward pass
  bool reached = false;  // reached during the current backward pass
  std::function<void(const Node&)> backward;

  std::vector<Scalar>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    reached = true;
    if (leaf) touched = true;
    return grad;
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& ptr(const Tensor& t) {
    if (!t.node_) throw PreconditionError("use of undefined tensor");
    return t.node_;
  }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local Tape* g_tape = nullptr;

const NodePtr& P(const Tensor& t) { return TensorAccess::ptr(t); }

std::string shape_of(const Node& n) { return "[" + std::to_string(n.rows) + "," + std::to_string(n.cols) + "]"; }

[[noreturn]] void dim_error(const char* op, const Node& a, const Node& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

NodePtr make_result(int rows, int cols, std::vector<Scalar> value, const char* op) {
  for (Scalar v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  return n;
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (P(*t)->requires_grad) return true;
  }
  return false;
}

template <class F>
Tensor finish(NodePtr out, bool track, F&& backward) {
  if (track) {
    out->requires_grad = true;
    out->leaf = false;
    out->backward = std::forward<F>(backward);
    g_tape->record(out);
  }
  return TensorAccess::wrap(std::move(out));
}

template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F&& fwd, D dydx) {
  const NodePtr& an = P(a);
  std::vector<Scalar> y(an->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(an->value[i]);
  auto out = make_result(an->rows, an->cols, std::move(y), op);
  const bool track = tracking({&a});
  NodePtr ap = an;
  return finish(std::move(out), track, [ap, dydx](const Node& self) {
    if (!ap->requires_grad) return;
    auto& g = ap->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dydx(ap->value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(int rows, int cols) { return from(std::vector<Scalar>(static_cast<std::size_t>(rows) * cols), rows, cols); }

Tensor Tensor::from(std::vector<Scalar> values, int rows, int cols) {
  if (rows < 0 || cols < 0 || values.size() != static_cast<std::size_t>(rows) * cols)
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) + " values for shape [" +
                         std::to_string(rows) + "," + std::to_string(cols) + "]");
  return Tensor(make_result(rows, cols, std::move(values), "Tensor::from"));
}

Tensor Tensor::row(std::vector<Scalar> values) {
  const int n = static_cast<int>(values.size());
  return from(std::move(values), 1, n);
}

Tensor Tensor::scalar(Scalar value) { return from({value}, 1, 1); }

Tensor Tensor::parameter(std::vector<Scalar> values, int rows, int cols) {
  Tensor t = from(std::move(values), rows, cols);
  t.node_->requires_grad = true;
  return t;
}

int Tensor::rows() const { return P(*this)->rows; }
int Tensor::cols() const { return P(*this)->cols; }
std::size_t Tensor::size() const { return P(*this)->value.size(); }
std::span<const Scalar> Tensor::data() const { return P(*this)->value; }
std::span<Scalar> Tensor::mutable_data() { return P(*this)->value; }

Scalar Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string());
  return node_->value[0];
}

Scalar Tensor::at(int r, int c) const {
  const auto& n = *P(*this);
  if (r < 0 || r >= n.rows || c < 0 || c >= n.cols) throw DimensionError("at(): index out of range");
  return n.value[static_cast<std::size_t>(r) * n.cols + c];
}

bool Tensor::requires_grad() const { return P(*this)->requires_grad; }
bool Tensor::grad_populated() const { return P(*this)->touched; }

std::span<const Scalar> Tensor::grad() const {
  auto& n = *P(*this);
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0f);
  return n.grad;
}

std::span<Scalar> Tensor::mutable_grad() {
  auto& n = *P(*this);
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0f);
  n.touched = true;  // hand-written gradients count as populated
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = *P(*this);
  std::fill(n.grad.begin(), n.grad.end(), 0.0f);
  n.touched = false;
}

Tensor Tensor::detach() const {
  const auto& n = *P(*this);
  return Tensor(make_result(n.rows, n.cols, n.value, "detach"));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

std::string Tensor::shape_string() const { return shape_of(*P(*this)); }

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& loss) {
  const NodePtr& ln = P(loss);
  if (ln->value.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_of(*ln));
  if (!ln->requires_grad) return;
  for (auto& n : nodes_) {
    n->grad.assign(n->value.size(), 0.0f);
    n->reached = false;
  }
  ln->ensure_grad()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.reached && n.backward) n.backward(n);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }
NoGradScope::NoGradScope() : previous_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = previous_; }
Tape* active_tape() { return g_tape; }

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  const NodePtr& an = P(a);
  const NodePtr& bn = P(b);
  if (an->cols != bn->rows) dim_error("matmul", *an, *bn);
  const int m = an->rows, k = an->cols, n = bn->cols;
  std::vector<Scalar> y(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    Scalar* yi = &y[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const Scalar aip = an->value[static_cast<std::size_t>(i) * k + p];
      if (aip == 0.0f) continue;
      const Scalar* brow = &bn->value[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) yi[j] += aip * brow[j];
    }
  }
  auto out = make_result(m, n, std::move(y), "matmul");
  NodePtr ap = an, bp = bn;
  return finish(std::move(out), tracking({&a, &b}), [ap, bp, m, k, n](const Node& self) {
    const auto& g = self.grad;
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const Scalar* gi = &g[static_cast<std::size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
          const Scalar* brow = &bp->value[static_cast<std::size_t>(p) * n];
          Scalar s = 0.0f;
          for (int j = 0; j < n; ++j) s += gi[j] * brow[j];
          ga[static_cast<std::size_t>(i) * k + p] += s;
        }
      }
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const Scalar* gi = &g[static_cast<std::size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
          const Scalar aip = ap->value[static_cast<std::size_t>(i) * k + p];
          if (aip == 0.0f) continue;
          Scalar* gbrow = &gb[static_cast<std::size_t>(p) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += aip * gi[j];
        }
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const NodePtr& an = P(a);
  const NodePtr& bn = P(b);
  if (an->cols != bn->cols) dim_error("matmul_nt", *an, *bn);
  const int m = an->rows, k = an->cols, n = bn->rows;
  std::vector<Scalar> y(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p)
        s += static_cast<double>(an->value[static_cast<std::size_t>(i) * k + p]) * bn->value[static_cast<std::size_t>(j) * k + p];
      y[static_cast<std::size_t>(i) * n + j] = static_cast<Scalar>(s);
    }
  }
  auto out = make_result(m, n, std::move(y), "matmul_nt");
  NodePtr ap = an, bp = bn;
  return finish(std::move(out), tracking({&a, &b}), [ap, bp, m, k, n](const Node& self) {
    const auto& g = self.grad;
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const Scalar gij = g[static_cast<std::size_t>(i) * n + j];
          for (int p = 0; p < k; ++p) ga[static_cast<std::size_t>(i) * k + p] += gij * bp->value[static_cast<std::size_t>(j) * k + p];
        }
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const Scalar gij = g[static_cast<std::size_t>(i) * n + j];
          for (int p = 0; p < k; ++p) gb[static_cast<std::size_t>(j) * k + p] += gij * ap->value[static_cast<std::size_t>(i) * k + p];
        }
    }
  });
}

namespace {

// Shared body for add/sub: b may be a [1,n] row broadcast over a's rows.
Tensor add_impl(const Tensor& a, const Tensor& b, Scalar sign, const char* op) {
  const NodePtr& an = P(a);
  const NodePtr& bn = P(b);
  const bool same = an->rows == bn->rows && an->cols == bn->cols;
  const bool bcast = !same && bn->rows == 1 && bn->cols == an->cols;
  if (!same && !bcast) dim_error(op, *an, *bn);
  const int cols = an->cols;
  std::vector<Scalar> y(an->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = an->value[i] + sign * bn->value[same ? i : i % cols];
  auto out = make_result(an->rows, an->cols, std::move(y), op);
  NodePtr ap = an, bp = bn;
  return finish(std::move(out), tracking({&a, &b}), [ap, bp, sign, same, cols](const Node& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[same ? i : i % cols] += sign * self.grad[i];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_impl(a, b, 1.0f, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_impl(a, b, -1.0f, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const NodePtr& an = P(a);
  const NodePtr& bn = P(b);
  if (an->rows != bn->rows || an->cols != bn->cols) dim_error("mul", *an, *bn);
  std::vector<Scalar> y(an->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = an->value[i] * bn->value[i];
  auto out = make_result(an->rows, an->cols, std::move(y), "mul");
  NodePtr ap = an, bp = bn;
  return finish(std::move(out), tracking({&a, &b}), [ap, bp](const Node& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bp->value[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * ap->value[i];
    }
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  return unary(a, "scale", [s](Scalar x) { return s * x; }, [s](Scalar, Scalar) { return s; });
}

Tensor add_scalar(const Tensor& a, Scalar s) {
  return unary(a, "add_scalar", [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return 1.0f; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return 1.0f - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](Scalar x) { return static_cast<Scalar>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](Scalar, Scalar y) { return y * (1.0f - y); });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](Scalar x) { return x > 0.0f ? x : 0.0f; }, [](Scalar x, Scalar) { return x > 0.0f ? 1.0f : 0.0f; });
}

namespace {

std::vector<Scalar> softmax_rows(const Node& n) {
  std::vector<Scalar> y(n.value.size());
  for (int r = 0; r < n.rows; ++r) {
    const Scalar* x = &n.value[static_cast<std::size_t>(r) * n.cols];
    Scalar* out = &y[static_cast<std::size_t>(r) * n.cols];
    const Scalar mx = *std::max_element(x, x + n.cols);
    double z = 0.0;
    for (int c = 0; c < n.cols; ++c) z += std::exp(static_cast<double>(x[c]) - mx);
    for (int c = 0; c < n.cols; ++c) out[c] = static_cast<Scalar>(std::exp(static_cast<double>(x[c]) - mx) / z);
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& a) {
  const NodePtr& an = P(a);
  if (an->cols == 0) throw DimensionError("softmax: empty row");
  auto out = make_result(an->rows, an->cols, softmax_rows(*an), "softmax");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap](const Node& self) {
    if (!ap->requires_grad) return;
    auto& ga = ap->ensure_grad();
    for (int r = 0; r < self.rows; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * self.cols;
      double dot = 0.0;
      for (int c = 0; c < self.cols; ++c) dot += static_cast<double>(self.grad[o + c]) * self.value[o + c];
      for (int c = 0; c < self.cols; ++c) ga[o + c] += self.value[o + c] * static_cast<Scalar>(self.grad[o + c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const NodePtr& an = P(a);
  if (an->cols == 0) throw DimensionError("log_softmax: empty row");
  std::vector<Scalar> y(an->value.size());
  for (int r = 0; r < an->rows; ++r) {
    const Scalar* x = &an->value[static_cast<std::size_t>(r) * an->cols];
    const Scalar mx = *std::max_element(x, x + an->cols);
    double z = 0.0;
    for (int c = 0; c < an->cols; ++c) z += std::exp(static_cast<double>(x[c]) - mx);
    const double lse = mx + std::log(z);
    for (int c = 0; c < an->cols; ++c) y[static_cast<std::size_t>(r) * an->cols + c] = static_cast<Scalar>(x[c] - lse);
  }
  auto out = make_result(an->rows, an->cols, std::move(y), "log_softmax");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap](const Node& self) {
    if (!ap->requires_grad) return;
    auto& ga = ap->ensure_grad();
    for (int r = 0; r < self.rows; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * self.cols;
      double gsum = 0.0;
      for (int c = 0; c < self.cols; ++c) gsum += self.grad[o + c];
      for (int c = 0; c < self.cols; ++c)
        ga[o + c] += self.grad[o + c] - static_cast<Scalar>(std::exp(static_cast<double>(self.value[o + c])) * gsum);
    }
  });
}

Tensor embed(const Tensor& table, int index) {
  const NodePtr& tn = P(table);
  if (index < 0 || index >= tn->rows)
    throw DimensionError("embed: index " + std::to_string(index) + " outside table " + shape_of(*tn));
  const int d = tn->cols;
  std::vector<Scalar> y(tn->value.begin() + static_cast<std::ptrdiff_t>(index) * d,
                       tn->value.begin() + static_cast<std::ptrdiff_t>(index + 1) * d);
  auto out = make_result(1, d, std::move(y), "embed");
  NodePtr tp = tn;
  return finish(std::move(out), tracking({&table}), [tp, index, d](const Node& self) {
    if (!tp->requires_grad) return;
    auto& g = tp->ensure_grad();
    for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(index) * d + j] += self.grad[j];
  });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw PreconditionError("concat: no inputs");
  const int rows = P(parts[0])->rows;
  int cols = 0;
  bool track = false;
  std::vector<NodePtr> nodes;
  for (const auto& t : parts) {
    const NodePtr& n = P(t);
    if (n->rows != rows) dim_error("concat", *P(parts[0]), *n);
    cols += n->cols;
    track = track || (g_tape != nullptr && n->requires_grad);
    nodes.push_back(n);
  }
  std::vector<Scalar> y(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    int off = 0;
    for (const auto& n : nodes) {
      std::copy_n(&n->value[static_cast<std::size_t>(r) * n->cols], n->cols, &y[static_cast<std::size_t>(r) * cols + off]);
      off += n->cols;
    }
  }
  auto out = make_result(rows, cols, std::move(y), "concat");
  return finish(std::move(out), track, [nodes, rows, cols](const Node& self) {
    int off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < n->cols; ++c)
            g[static_cast<std::size_t>(r) * n->cols + c] += self.grad[static_cast<std::size_t>(r) * cols + off + c];
      }
      off += n->cols;
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts) { return concat(std::span<const Tensor>(parts.begin(), parts.size())); }

Tensor slice_cols(const Tensor& a, int start, int len) {
  const NodePtr& an = P(a);
  if (start < 0 || len < 0 || start + len > an->cols)
    throw DimensionError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside " +
                         shape_of(*an));
  const int rows = an->rows, cols = an->cols;
  std::vector<Scalar> y(static_cast<std::size_t>(rows) * len);
  for (int r = 0; r < rows; ++r)
    std::copy_n(&an->value[static_cast<std::size_t>(r) * cols + start], len, &y[static_cast<std::size_t>(r) * len]);
  auto out = make_result(rows, len, std::move(y), "slice_cols");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap, rows, cols, start, len](const Node& self) {
    if (!ap->requires_grad) return;
    auto& g = ap->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c) g[static_cast<std::size_t>(r) * cols + start + c] += self.grad[static_cast<std::size_t>(r) * len + c];
  });
}

Tensor stack_rows(std::span<const Tensor> rows_in) {
  if (rows_in.empty()) throw PreconditionError("stack_rows: no inputs");
  const int cols = P(rows_in[0])->cols;
  bool track = false;
  std::vector<NodePtr> nodes;
  for (const auto& t : rows_in) {
    const NodePtr& n = P(t);
    if (n->rows != 1 || n->cols != cols) dim_error("stack_rows", *P(rows_in[0]), *n);
    track = track || (g_tape != nullptr && n->requires_grad);
    nodes.push_back(n);
  }
  std::vector<Scalar> y;
  y.reserve(nodes.size() * cols);
  for (const auto& n : nodes) y.insert(y.end(), n->value.begin(), n->value.end());
  auto out = make_result(static_cast<int>(nodes.size()), cols, std::move(y), "stack_rows");
  return finish(std::move(out), track, [nodes, cols](const Node& self) {
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      if (!nodes[r]->requires_grad) continue;
      auto& g = nodes[r]->ensure_grad();
      for (int c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    }
  });
}

Tensor sum(const Tensor& a) {
  const NodePtr& an = P(a);
  double s = 0.0;
  for (Scalar v : an->value) s += v;
  auto out = make_result(1, 1, {static_cast<Scalar>(s)}, "sum");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap](const Node& self) {
    if (!ap->requires_grad) return;
    auto& g = ap->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto n = P(a)->value.size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<Scalar>(n));
}

Tensor pick(const Tensor& a, int flat_index) {
  const NodePtr& an = P(a);
  if (flat_index < 0 || flat_index >= static_cast<int>(an->value.size()))
    throw DimensionError("pick: index " + std::to_string(flat_index) + " outside " + shape_of(*an));
  auto out = make_result(1, 1, {an->value[flat_index]}, "pick");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap, flat_index](const Node& self) {
    if (!ap->requires_grad) return;
    ap->ensure_grad()[flat_index] += self.grad[0];
  });
}

Tensor dropout(const Tensor& a, Scalar p, Rng& rng, bool train) {
  if (!(p >= 0.0f && p < 1.0f)) throw PreconditionError("dropout: p must be in [0,1)");
  if (!train || p == 0.0f) return a;
  const NodePtr& an = P(a);
  const Scalar keep_scale = 1.0f / (1.0f - p);
  std::vector<Scalar> mask(an->value.size());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0f;
  std::vector<Scalar> y(an->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = an->value[i] * mask[i];
  auto out = make_result(an->rows, an->cols, std::move(y), "dropout");
  NodePtr ap = an;
  return finish(std::move(out), tracking({&a}), [ap, mask = std::move(mask)](const Node& self) {
    if (!ap->requires_grad) return;
    auto& g = ap->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor cross_entropy(const Tensor& logits, int target) {
  const NodePtr& ln = P(logits);
  if (ln->rows != 1) throw DimensionError("cross_entropy: expected a single row, got " + shape_of(*ln));
  if (target < 0 || target >= ln->cols)
    throw PreconditionError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                            std::to_string(ln->cols) + " classes");
  const auto& x = ln->value;
  const Scalar mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (Scalar v : x) z += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(z);
  auto out = make_result(1, 1, {static_cast<Scalar>(lse - x[target])}, "cross_entropy");
  NodePtr lp = ln;
  return finish(std::move(out), tracking({&logits}), [lp, target, mx, z](const Node& self) {
    if (!lp->requires_grad) return;
    auto& g = lp->ensure_grad();
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double p = std::exp(static_cast<double>(lp->value[c]) - mx) / z;
      g[c] += self.grad[0] * static_cast<Scalar>(p - (static_cast<int>(c) == target ? 1.0 : 0.0));
    }
  });
}

// ---------------------------------------------------------------------------
// ParamStore

const Tensor& ParamStore::add(const std::string& name, int rows, int cols, std::vector<Scalar> init) {
  if (params_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  Parameter p;
  p.value = Tensor::parameter(std::move(init), rows, cols);
  return params_.emplace(name, std::move(p)).first->second.value;
}

const Tensor& ParamStore::add_uniform(const std::string& name, int rows, int cols, Scalar scale_, Rng& rng) {
  std::vector<Scalar> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = static_cast<Scalar>(rng.uniform(-scale_, scale_));
  return add(name, rows, cols, std::move(v));
}

const Tensor& ParamStore::add_zeros(const std::string& name, int rows, int cols) {
  return add(name, rows, cols, std::vector<Scalar>(static_cast<std::size_t>(rows) * cols));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw MissingArtifact("missing parameter '" + name + "'");
  return it->second.value;
}

Parameter& ParamStore::entry(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw MissingArtifact("missing parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) {
    if (name.starts_with(prefix)) out.push_back(name);
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.value.zero_grad();
}

double ParamStore::grad_norm(const std::string& prefix) const {
  double s = 0.0;
  for (const auto& [name, p] : params_) {
    if (!name.starts_with(prefix)) continue;
    for (Scalar g : p.value.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, p] : params_) {
    Parameter q;
    q.value = p.value.clone();
    q.m = p.m;
    q.v = p.v;
    q.sq = p.sq;
    q.step = p.step;
    out.params_.emplace(name, std::move(q));
  }
  return out;
}

bool ParamStore::identical(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (const auto& [name, p] : params_) {
    auto it = other.params_.find(name);
    if (it == other.params_.end()) return false;
    const auto& q = it->second;
    auto a = p.value.data();
    auto b = q.value.data();
    if (p.value.rows() != q.value.rows() || p.value.cols() != q.value.cols()) return false;
    if (std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) return false;
    if (p.m != q.m || p.v != q.v || p.sq != q.sq || p.step != q.step) return false;
  }
  return true;
}

namespace {

template <class Update>
void optimizer_step(ParamStore& store, std::span<const std::string> prefixes, const char* name, Update&& update) {
  bool any = false;
  for (auto& [pname, p] : store.entries()) {
    const bool selected = std::ranges::any_of(prefixes, [&](const std::string& pre) { return pname.starts_with(pre); });
    if (!selected || !p.value.grad_populated()) continue;
    any = true;
    update(p);
    for (Scalar v : p.value.data()) {
      if (!std::isfinite(v)) throw NumericError(std::string(name) + ": parameter '" + pname + "' became non-finite");
    }
  }
  if (!any) throw PreconditionError(std::string(name) + ": no populated gradients for the selected parameters");
}

}  // namespace

void adam_step(ParamStore& store, const AdamConfig& cfg, std::span<const std::string> prefixes) {
  optimizer_step(store, prefixes, "adam_step", [&](Parameter& p) {
    const std::size_t n = p.value.size();
    if (p.m.size() != n) p.m.assign(n, 0.0f);
    if (p.v.size() != n) p.v.assign(n, 0.0f);
    ++p.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto theta = p.value.mutable_data();
    auto g = p.value.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
      p.m[i] = static_cast<Scalar>(m);
      p.v[i] = static_cast<Scalar>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double t = theta[i];
      theta[i] = static_cast<Scalar>(t - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) - cfg.lr * cfg.weight_decay * t);
    }
  });
}

void rmsprop_step(ParamStore& store, const RmsPropConfig& cfg, std::span<const std::string> prefixes) {
  optimizer_step(store, prefixes, "rmsprop_step", [&](Parameter& p) {
    const std::size_t n = p.value.size();
    if (p.sq.size() != n) p.sq.assign(n, 0.0f);
    ++p.step;
    auto theta = p.value.mutable_data();
    auto g = p.value.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double sq = cfg.alpha * p.sq[i] + (1.0 - cfg.alpha) * gi * gi;
      p.sq[i] = static_cast<Scalar>(sq);
      theta[i] = static_cast<Scalar>(theta[i] - cfg.lr * gi / (std::sqrt(sq) + cfg.eps));
    }
  });
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::uint32_t byteswap32(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xff00u) | ((x << 8) & 0xff0000u) | (x << 24);
}

std::string blob_name(const std::string& name, const char* slot) {
  std::string s = name;
  std::ranges::replace(s, '/', '.');
  return s + slot + ".bin";
}

void write_blob(const std::filesystem::path& path, std::span<const Scalar> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingArtifact("cannot write " + path.string());
  for (Scalar v : values) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

std::vector<Scalar> read_blob(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("missing checkpoint blob " + path.string());
  std::vector<Scalar> out(count);
  for (auto& v : out) {
    std::uint32_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw MissingArtifact("truncated blob " + path.string());
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    v = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "rmmnav-ckpt-1";
  manifest["params"] = nlohmann::ordered_json::array();
  for (const auto& [name, p] : store.entries()) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = {p.value.rows(), p.value.cols()};
    e["step"] = p.step;
    e["file"] = blob_name(name, "");
    write_blob(dir / blob_name(name, ""), p.value.data());
    std::vector<std::string> slots;
    for (auto [slot, data] : {std::pair{".m", &p.m}, std::pair{".v", &p.v}, std::pair{".sq", &p.sq}}) {
      if (data->empty()) continue;
      slots.emplace_back(slot + 1);
      write_blob(dir / blob_name(name, slot), *data);
    }
    e["slots"] = slots;
    manifest["params"].push_back(std::move(e));
  }
  manifest["extra"] = nlohmann::ordered_json::parse(extra.dump());
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw MissingArtifact("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw MissingArtifact("missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  ParamStore store;
  for (const auto& e : manifest.at("params")) {
    const auto name = e.at("name").get<std::string>();
    const int rows = e.at("shape").at(0).get<int>();
    const int cols = e.at("shape").at(1).get<int>();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    store.add(name, rows, cols, read_blob(dir / e.at("file").get<std::string>(), n));
    auto& p = store.entry(name);
    p.step = e.at("step").get<std::int64_t>();
    for (const auto& slot : e.value("slots", std::vector<std::string>{})) {
      auto data = read_blob(dir / blob_name(name, ("." + slot).c_str()), n);
      if (slot == "m") p.m = std::move(data);
      else if (slot == "v") p.v = std::move(data);
      else if (slot == "sq") p.sq = std::move(data);
    }
  }
  if (extra != nullptr) *extra = manifest.value("extra", nlohmann::json::object());
  return store;
}

}  // namespace rmmnav
