#pragma once

// Finite-difference gradient checks. Single ops are compared against
// double-precision re-implementations of their forward pass; composite
// losses are differenced on the double build of the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rmmnav/nn.hpp"
#include "rmmnav/tensor.hpp"

namespace gradcheck {

struct DMat {
  int r = 0, c = 0;
  std::vector<double> v;
  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * c + j]; }
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * c + j]; }
};

inline DMat dzeros(int r, int c) { return {r, c, std::vector<double>(static_cast<std::size_t>(r) * c, 0.0)}; }

inline DMat to_d(const rmmnav::Tensor& t) {
  DMat m{t.rows(), t.cols(), {}};
  for (double x : t.data()) m.v.push_back(x);
  return m;
}

struct Result {
  double max_err = 0.0;
  int checked = 0;
};

/// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using TensorFn = std::function<rmmnav::Tensor(const std::vector<rmmnav::Tensor>&)>;
using DoubleFn = std::function<DMat(const std::vector<DMat>&)>;
using Shapes = std::function<std::vector<std::pair<int, int>>(rmmnav::Rng&)>;
using Sampler = std::function<float(rmmnav::Rng&)>;

/// Differentiates loss = sum(W ∘ op(inputs)) for fixed random W: analytic via
/// the tape, numeric by central differences (h = 1e-6) on the double oracle.
inline Result check_op(const Shapes& shapes, const TensorFn& op, const DoubleFn& oracle, std::uint64_t seed,
                       int min_coords = 50, const Sampler& sample = nullptr) {
  using namespace rmmnav;
  Rng rng(seed);
  Result res;
  for (int trial = 0; res.checked < min_coords && trial < 200; ++trial) {
    const auto sh = shapes(rng);
    std::vector<Tensor> inputs;
    for (auto [r, c] : sh) {
      std::vector<Scalar> vals(static_cast<std::size_t>(r) * c);
      for (auto& v : vals) v = sample ? sample(rng) : static_cast<Scalar>(rng.uniform(-2.0, 2.0));
      inputs.push_back(Tensor::parameter(std::move(vals), r, c));
    }
    Tape tape;
    Tensor y;
    Tensor loss;
    std::vector<Scalar> wv;
    {
      TapeScope scope(tape);
      y = op(inputs);
      wv.resize(y.size());
      for (auto& w : wv) w = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
      loss = sum(mul(y, Tensor::from(wv, y.rows(), y.cols())));
    }
    tape.backward(loss);
    std::vector<DMat> dins;
    for (const auto& t : inputs) dins.push_back(to_d(t));
    auto weighted = [&](const std::vector<DMat>& xs) {
      const DMat out = oracle(xs);
      double s = 0.0;
      for (std::size_t i = 0; i < out.v.size(); ++i) s += static_cast<double>(wv[i]) * out.v[i];
      return s;
    };
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto g = inputs[k].grad();
      for (int pick = 0; pick < 4; ++pick) {
        const std::size_t idx = rng.below(inputs[k].size());
        const double h = 1e-6;
        auto plus = dins, minus = dins;
        plus[k].v[idx] += h;
        minus[k].v[idx] -= h;
        const double numeric = (weighted(plus) - weighted(minus)) / (2 * h);
        const double analytic = g.empty() ? 0.0 : g[idx];
        res.max_err = std::max(res.max_err, rel_err(analytic, numeric, 1e-3));
        ++res.checked;
      }
    }
  }
  return res;
}

/// Central difference of `loss` in one parameter coordinate.
inline double fd_central(const std::function<double()>& loss, rmmnav::Scalar& param, double h) {
  const rmmnav::Scalar saved = param;
  param = static_cast<rmmnav::Scalar>(saved + h);
  const double up = loss();
  const double real_up = static_cast<double>(param) - saved;
  param = static_cast<rmmnav::Scalar>(saved - h);
  const double down = loss();
  const double real_down = saved - static_cast<double>(param);
  param = saved;
  return (up - down) / (real_up + real_down);
}

// ---- double-precision forward oracles ----

inline DMat d_matmul(const DMat& a, const DMat& b) {
  DMat o = dzeros(a.r, b.c);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < b.c; ++j)
      for (int k = 0; k < a.c; ++k) o.at(i, j) += a.at(i, k) * b.at(k, j);
  return o;
}

inline DMat d_transpose(const DMat& a) {
  DMat o = dzeros(a.c, a.r);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o.at(j, i) = a.at(i, j);
  return o;
}

inline DMat d_map(DMat a, const std::function<double(double)>& f) {
  for (auto& x : a.v) x = f(x);
  return a;
}

inline DMat d_add(const DMat& a, const DMat& b) {
  DMat o = a;
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o.at(i, j) += b.r == 1 ? b.at(0, j) : b.at(i, j);
  return o;
}

inline DMat d_softmax(const DMat& a) {
  DMat o = a;
  for (int i = 0; i < a.r; ++i) {
    double mx = -1e300, z = 0.0;
    for (int j = 0; j < a.c; ++j) mx = std::max(mx, a.at(i, j));
    for (int j = 0; j < a.c; ++j) z += std::exp(a.at(i, j) - mx);
    for (int j = 0; j < a.c; ++j) o.at(i, j) = std::exp(a.at(i, j) - mx) / z;
  }
  return o;
}

inline DMat d_concat(const std::vector<DMat>& parts) {
  int cols = 0;
  for (const auto& p : parts) cols += p.c;
  DMat o = dzeros(parts.front().r, cols);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p.r; ++i)
      for (int j = 0; j < p.c; ++j) o.at(i, off + j) = p.at(i, j);
    off += p.c;
  }
  return o;
}

inline DMat d_slice(const DMat& a, int start, int len) {
  DMat o = dzeros(a.r, len);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < len; ++j) o.at(i, j) = a.at(i, start + j);
  return o;
}

inline double d_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Textbook LSTM step; gates laid out input | forget | output | candidate.
inline std::pair<DMat, DMat> d_lstm(const DMat& x, const DMat& h, const DMat& c, const DMat& w, const DMat& b) {
  const int H = h.c;
  const DMat pre = d_add(d_matmul(d_concat({x, h}), w), b);
  DMat h2 = dzeros(1, H), c2 = dzeros(1, H);
  for (int j = 0; j < H; ++j) {
    const double i = d_sigmoid(pre.at(0, j));
    const double f = d_sigmoid(pre.at(0, H + j));
    const double o = d_sigmoid(pre.at(0, 2 * H + j));
    const double g = std::tanh(pre.at(0, 3 * H + j));
    c2.at(0, j) = f * c.at(0, j) + i * g;
    h2.at(0, j) = o * std::tanh(c2.at(0, j));
  }
  return {h2, c2};
}

}  // namespace gradcheck
