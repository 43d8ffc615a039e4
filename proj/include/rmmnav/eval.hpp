#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/agents.hpp"
#include "rmmnav/gameplay.hpp"
#include "rmmnav/rmm.hpp"

namespace rmmnav {

enum class Split { Seen, Unseen };
std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

/// How the agents play at evaluation time.
enum class EvalPolicy {
  Learned,       ///< argmax navigator and speaker, one exchange per question point
  Rmm,           ///< learned agents with confidence-scored RMM selection
  ShortestPath,  ///< teacher navigator, scripted speaker
  Stationary,    ///< stops at once
};
std::string_view eval_policy_name(EvalPolicy p);

struct EvalConfig {
  int episodes_per_world = 2;
  std::vector<ContextMode> modes{ContextMode::TargetOnly, ContextMode::LastExchange, ContextMode::FullHistory};
  void validate() const;
};

struct ModeReport {
  ContextMode mode = ContextMode::FullHistory;
  int episodes = 0;
  double goal_progress = 0.0;      ///< mean final goal progress
  double goal_progress_se = 0.0;   ///< standard error of the mean
  double oracle_stopping = 0.0;    ///< mean of the best progress reached
  double initial_distance = 0.0;   ///< mean d(p0, goal)
  double bleu_mean = 0.0;          ///< mean sentence BLEU over generated utterances
  double bleu_corpus = 0.0;        ///< BLEU of all utterances concatenated
  int utterances = 0;
  int lexical_types = 0;
  std::vector<double> curve;       ///< k = 1..max_exchanges
};

struct EvalReport {
  std::string method;
  Split split = Split::Unseen;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> world_seeds;
  std::vector<ModeReport> modes;
  const ModeReport& mode(ContextMode m) const;
};

nlohmann::ordered_json eval_report_to_json(const EvalReport& r);

struct EvalAgents {
  const Models* models = nullptr;  ///< required for Learned and Rmm
  EvalPolicy policy = EvalPolicy::Learned;
  std::string name;                ///< method label in the report; defaults to the policy name
  RmmConfig rmm;                   ///< Rmm only; mode forced to InferConfidence
};

/// Transcripts of one evaluation, per mode in EvalConfig order.
struct EvalRun {
  EvalReport report;
  std::vector<std::vector<Transcript>> transcripts;
};

/// One evaluation episode; `evaluate` and transcript replay both use it.
Transcript eval_episode(const EvalAgents& agents, const World& world, ContextMode mode, const GameConfig& game,
                        std::uint64_t episode_seed, const Pose& start);

/// Runs every world x episode x mode. Unseen splits must not share seeds with
/// `training_seeds`.
EvalRun evaluate(const EvalAgents& agents, std::span<const World> worlds, Split split,
                 std::span<const std::uint64_t> training_seeds, const EvalConfig& config, const GameConfig& game,
                 std::uint64_t seed);

/// Mean over transcripts of progress at the k-th question / d(p0, goal),
/// k = 1..max_exchanges. An episode that ended earlier contributes its final
/// progress.
std::vector<double> progress_curve(std::span<const Transcript> transcripts, std::span<const World> worlds,
                                   int max_exchanges);

/// Scripted question/answer at the state each exchange of `t` was asked in.
std::vector<Exchange> scripted_references(const World& world, const Transcript& t);

/// Aggregates of one mode recomputed from transcripts alone.
ModeReport aggregate(std::span<const Transcript> transcripts, std::span<const World> worlds, ContextMode mode,
                     int max_exchanges);

}  // namespace rmmnav
