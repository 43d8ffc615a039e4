#pragma once

#include <span>
#include <string>
#include <vector>

#include "rmmnav/tensor.hpp"

namespace rmmnav {

struct LstmState {
  Tensor h;
  Tensor c;
};

/// Weights of one LSTM layer: w is [(in + hidden), 4*hidden] with gate blocks
/// ordered input | forget | output | candidate; b is [1, 4*hidden].
struct LstmWeights {
  Tensor w;
  Tensor b;
  int hidden = 0;

  static LstmWeights from_store(const ParamStore& store, const std::string& prefix);
  /// Registers "<prefix>/w" and "<prefix>/b".
  static void init(ParamStore& store, const std::string& prefix, int input, int hidden, Rng& rng);
};

LstmState zero_state(int hidden);

LstmState lstm_cell(const Tensor& x, const LstmState& state, const LstmWeights& weights);

/// Runs a forward LSTM over `seq`; returns the per-step hidden states.
std::vector<Tensor> lstm_encode(std::span<const Tensor> seq, const LstmWeights& weights, LstmState& state);

struct BiLstmOutput {
  std::vector<Tensor> steps;  ///< [1, 2*hidden] per position: forward || backward
  LstmState forward_final;
  LstmState backward_final;  ///< state after consuming position 0
};

BiLstmOutput bilstm_encode(std::span<const Tensor> seq, const LstmWeights& forward, const LstmWeights& backward);

struct AttentionResult {
  Tensor context;  ///< [1, d]
  Tensor weights;  ///< [1, k]
};

/// Dot-product attention of a [1,d] query over stacked [k,d] keys.
AttentionResult attention(const Tensor& query, const Tensor& keys);
AttentionResult attention(const Tensor& query, std::span<const Tensor> keys);

/// x * w + b.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace rmmnav
