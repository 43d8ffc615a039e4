#include "rmmnav/nn.hpp"

#include <cmath>

namespace rmmnav {

LstmWeights LstmWeights::from_store(const ParamStore& store, const std::string& prefix) {
  LstmWeights w{store.get(prefix + "/w"), store.get(prefix + "/b"), 0};
  if (w.w.cols() % 4 != 0 || w.b.cols() != w.w.cols())
    throw DimensionError("lstm '" + prefix + "': bad weight shapes " + w.w.shape_string() + " / " + w.b.shape_string());
  w.hidden = w.w.cols() / 4;
  return w;
}

void LstmWeights::init(ParamStore& store, const std::string& prefix, int input, int hidden, Rng& rng) {
  const float s = 1.0f / std::sqrt(static_cast<float>(hidden));
  store.add_uniform(prefix + "/w", input + hidden, 4 * hidden, s, rng);
  // Forget-gate bias starts at 1 so early gradients flow through the cell.
  std::vector<Scalar> b(4 * hidden, 0.0f);
  for (int i = hidden; i < 2 * hidden; ++i) b[i] = 1.0f;
  store.add(prefix + "/b", 1, 4 * hidden, std::move(b));
}

LstmState zero_state(int hidden) { return {Tensor::zeros(1, hidden), Tensor::zeros(1, hidden)}; }

LstmState lstm_cell(const Tensor& x, const LstmState& state, const LstmWeights& weights) {
  const int H = weights.hidden;
  if (state.h.cols() != H || state.c.cols() != H)
    throw DimensionError("lstm_cell: state " + state.h.shape_string() + " vs hidden " + std::to_string(H));
  if (x.cols() + H != weights.w.rows())
    throw DimensionError("lstm_cell: input " + x.shape_string() + " vs weights " + weights.w.shape_string());
  const Tensor gates = add(matmul(concat({x, state.h}), weights.w), weights.b);
  const Tensor i = sigmoid(slice_cols(gates, 0, H));
  const Tensor f = sigmoid(slice_cols(gates, H, H));
  const Tensor o = sigmoid(slice_cols(gates, 2 * H, H));
  const Tensor g = tanh(slice_cols(gates, 3 * H, H));
  const Tensor c = f * state.c + i * g;
  return {o * tanh(c), c};
}

std::vector<Tensor> lstm_encode(std::span<const Tensor> seq, const LstmWeights& weights, LstmState& state) {
  std::vector<Tensor> out;
  out.reserve(seq.size());
  for (const auto& x : seq) {
    state = lstm_cell(x, state, weights);
    out.push_back(state.h);
  }
  return out;
}

BiLstmOutput bilstm_encode(std::span<const Tensor> seq, const LstmWeights& forward, const LstmWeights& backward) {
  if (seq.empty()) throw PreconditionError("bilstm_encode: empty sequence");
  LstmState fs = zero_state(forward.hidden);
  LstmState bs = zero_state(backward.hidden);
  std::vector<Tensor> fwd = lstm_encode(seq, forward, fs);
  std::vector<Tensor> bwd(seq.size());
  for (std::size_t t = seq.size(); t-- > 0;) {
    bs = lstm_cell(seq[t], bs, backward);
    bwd[t] = bs.h;
  }
  BiLstmOutput out;
  for (std::size_t t = 0; t < seq.size(); ++t) out.steps.push_back(concat({fwd[t], bwd[t]}));
  out.forward_final = fs;
  out.backward_final = bs;
  return out;
}

AttentionResult attention(const Tensor& query, const Tensor& keys) {
  if (keys.rows() == 0) throw PreconditionError("attention: empty key list");
  if (query.rows() != 1 || query.cols() != keys.cols())
    throw DimensionError("attention: query " + query.shape_string() + " vs keys " + keys.shape_string());
  const Tensor weights = softmax(matmul_nt(query, keys));
  return {matmul(weights, keys), weights};
}

AttentionResult attention(const Tensor& query, std::span<const Tensor> keys) {
  if (keys.empty()) throw PreconditionError("attention: empty key list");
  return attention(query, stack_rows(keys));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace rmmnav
