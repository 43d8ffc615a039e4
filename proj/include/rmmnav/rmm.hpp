#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/gameplay.hpp"
#include "rmmnav/tensor.hpp"

namespace rmmnav {

enum class RmmMode { TrainDistance, InferConfidence };

struct RmmConfig {
  int n = 3;
  int horizon = 5;
  int budget = 0;  ///< total mental rollouts per exchange; 0 means 2*N^2
  double temperature = 0.6;
  RmmMode mode = RmmMode::InferConfidence;

  int effective_budget() const { return budget > 0 ? budget : 2 * n * n; }
  void validate() const;
};

/// One navigator segment of a mental rollout (between two exchanges).
struct MentalSegment {
  std::vector<TokenId> context;
  Pose start;
  int prev_action = kStartAction;
  std::vector<Action> actions;
  std::vector<double> logprobs;
  int depth = 1;  ///< 1 for the candidate pair itself, deeper for recursive exchanges
};

struct BranchResult {
  int q_index = 0;
  int a_index = 0;
  Exchange pair;
  SpeakerInput question_input;
  SpeakerInput answer_input;
  std::vector<MentalSegment> segments;
  Pose end;
  double remaining = 0.0;   ///< shortest-path distance to goal after the rollout
  double confidence = 0.0;  ///< mean log-prob of the mental actions
  double score = 0.0;       ///< the selection key (higher is better)
  int rollout_len = 0;
};

struct RmmStats {
  int top_level_pairs = 0;
  int rollouts = 0;
  int max_depth = 0;
  std::vector<int> branching_by_depth;  ///< candidate pairs generated at each depth (index 0 = depth 1)
};

struct RmmOutcome {
  int chosen = 0;
  std::vector<BranchResult> branches;
  RmmStats stats;
};

/// Candidate fan-out, mental rollouts, and selection at one question point.
/// Never mutates `state`; all randomness comes from `seed`.
RmmOutcome rmm_exchange(const DialogueState& state, const Players& players, const World& world, NodeId goal,
                        const GameConfig& game, const RmmConfig& config, std::uint64_t seed);

/// Mean log-probability of the rollout's actions.
double confidence_score(std::span<const double> logprobs);

/// Index of the best branch under `mode`; ties go to the lowest index.
int select_branch(std::span<const BranchResult> branches, RmmMode mode);

struct BranchLosses {
  int index = 0;
  Tensor ce;        ///< navigator CE against shortest-path actions along the winning mental rollout
  Tensor actor;
  Tensor critic;
  Tensor question_logprob;  ///< sum of log p(question tokens)
  Tensor answer_logprob;
  double advantage = 0.0;  ///< mean remaining distance over branches minus the winner's
};

/// Replays the winning branch under the active tape.
BranchLosses best_branch_losses(const Models& models, const World& world, NodeId goal,
                                std::span<const BranchResult> branches, int td_k = 1);

nlohmann::json rmm_debug_json(const RmmOutcome& outcome);

}  // namespace rmmnav
