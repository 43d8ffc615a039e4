#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/common.hpp"

// Storage precision. The library is built in Scalar; a double build exists
// only to difference whole losses without Scalar round-off.
#ifndef RMMNAV_SCALAR
#define RMMNAV_SCALAR Scalar
#endif

namespace rmmnav {

using Scalar = RMMNAV_SCALAR;

namespace detail {
struct Node;
}

/// Dense row-major 2-D tensor with optional gradient tracking.
/// Copies are cheap handles onto the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols);
  static Tensor from(std::vector<Scalar> values, int rows, int cols);
  static Tensor row(std::vector<Scalar> values);
  static Tensor scalar(Scalar value);
  /// Trainable leaf: gradients accumulate here across backward passes.
  static Tensor parameter(std::vector<Scalar> values, int rows, int cols);

  bool defined() const { return node_ != nullptr; }
  int rows() const;
  int cols() const;
  std::size_t size() const;
  std::span<const Scalar> data() const;
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(int r, int c) const;

  bool requires_grad() const;
  /// True once a backward pass has reached this leaf since the last zero_grad.
  bool grad_populated() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  void zero_grad();

  /// Same values, no gradient history.
  Tensor detach() const;
  /// Independent deep copy (values and requires_grad flag; no history).
  Tensor clone() const;

  std::string shape_string() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

/// Ordered record of the ops executed while it is the thread's active tape.
/// Creation order is a topological order, so backward walks it in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Accumulates d(loss)/d(leaf) into every reachable trainable leaf.
  void backward(const Tensor& loss);

  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Makes `tape` the active tape for this thread until destroyed.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for this thread until destroyed.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Core ops. Shapes are checked; mismatches throw DimensionError naming both shapes.
Tensor matmul(const Tensor& a, const Tensor& b);     ///< [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  ///< a * b^T, [m,k]x[n,k]
Tensor add(const Tensor& a, const Tensor& b);        ///< same shape, or b is [1,n] broadcast over rows
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
Tensor add_scalar(const Tensor& a, Scalar s);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softmax(const Tensor& a);      ///< row-wise
Tensor log_softmax(const Tensor& a);  ///< row-wise
Tensor embed(const Tensor& table, int index);
Tensor concat(std::span<const Tensor> parts);  ///< along columns
Tensor concat(std::initializer_list<Tensor> parts);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor stack_rows(std::span<const Tensor> rows);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor pick(const Tensor& a, int flat_index);
/// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& a, Scalar p, Rng& rng, bool train);
/// -log softmax(logits)[target] for a [1,C] row.
Tensor cross_entropy(const Tensor& logits, int target);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }

/// Named trainable parameters plus optimizer slots.
struct Parameter {
  Tensor value;
  std::vector<Scalar> m;   ///< Adam first moment
  std::vector<Scalar> v;   ///< Adam second moment
  std::vector<Scalar> sq;  ///< RMSProp mean square
  std::int64_t step = 0;
};

class ParamStore {
 public:
  /// Registers a parameter; names must be unique.
  const Tensor& add(const std::string& name, int rows, int cols, std::vector<Scalar> init);
  /// Uniform(-scale, scale) initialisation from `rng`.
  const Tensor& add_uniform(const std::string& name, int rows, int cols, Scalar scale, Rng& rng);
  const Tensor& add_zeros(const std::string& name, int rows, int cols);

  bool contains(const std::string& name) const { return params_.contains(name); }
  const Tensor& get(const std::string& name) const;
  Parameter& entry(const std::string& name);
  const std::map<std::string, Parameter>& entries() const { return params_; }
  std::map<std::string, Parameter>& entries() { return params_; }

  std::vector<std::string> names(const std::string& prefix = "") const;
  void zero_grad();
  double grad_norm(const std::string& prefix = "") const;
  std::size_t num_values() const;

  /// Deep copy: values and optimizer slots, no shared storage.
  ParamStore clone() const;
  /// Bitwise equality of values and slots.
  bool identical(const ParamStore& other) const;

 private:
  std::map<std::string, Parameter> params_;
};

struct AdamConfig {
  double lr = 1e-4;
  double weight_decay = 5e-4;  ///< decoupled: theta -= lr * wd * theta
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RmsPropConfig {
  double lr = 1e-4;
  double alpha = 0.99;
  double eps = 1e-8;
};

/// Updates parameters whose names start with any of `prefixes` and whose
/// gradients were populated. Throws PreconditionError if none were.
void adam_step(ParamStore& store, const AdamConfig& cfg, std::span<const std::string> prefixes);
void rmsprop_step(ParamStore& store, const RmsPropConfig& cfg, std::span<const std::string> prefixes);

/// Directory checkpoint: manifest.json plus one little-endian float32 blob per tensor.
void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store, const nlohmann::json& extra);
ParamStore load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

}  // namespace rmmnav
