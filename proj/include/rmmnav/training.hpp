#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/agents.hpp"
#include "rmmnav/gameplay.hpp"
#include "rmmnav/lang.hpp"
#include "rmmnav/rmm.hpp"
#include "rmmnav/tensor.hpp"

namespace rmmnav {

struct TrainConfig {
  double lr_nav = 1e-4;
  double wd_nav = 5e-4;
  double lr_spk = 1e-4;
  double lr_selfplay = 0.0;  ///< nav and speaker lr during self-play and augmentation; 0 keeps lr_nav / lr_spk
  double dropout = 0.5;
  int batch_pretrain = 16;
  int iters_pretrain = 200;
  int batch_selfplay = 8;
  int iters_selfplay = 50;
  int td_k = 1;
  double lambda_da = 0.1;
  double ce_weight = 1.0;  ///< weight of J_CE in the navigator loss
  double rl_weight = 1.0;  ///< weight of J_RL in the navigator loss
  bool speaker_rl = true;  ///< route the branch advantage into the speaker update
  bool da_navigator = true;
  bool da_speaker = true;
  std::uint64_t seed = 0;
  void validate() const;
};

struct StepRecord {
  Tensor logits;  ///< [1, 4]
  Tensor value;   ///< [1, 1]; may be undefined when only CE is needed
  Action action = Action::Stop;
  double reward = 0.0;
  std::optional<Action> teacher;
};

struct RolloutRecord {
  std::vector<StepRecord> steps;
  double goal_progress = 0.0;
  double bootstrap = 0.0;  ///< V of the state after the last step; 0 at episode end
  double weight = 1.0;
};

double step_reward(const World& world, const Pose& from, const Pose& to, NodeId goal);

/// Record for consecutive rollouts of one episode; teacher targets are the
/// shortest-path actions at each visited pose.
RolloutRecord make_record(const World& world, NodeId goal, std::span<const Rollout> bursts, bool with_teacher = true);

/// Eq. 1: sum_t -log pi(a*_t).
Tensor ce_loss(const RolloutRecord& r);

struct A2CTerms {
  Tensor actor;
  Tensor critic;
  Tensor total;
};

/// Eq. 2 with k-step targets: A_t = sum_{i<k} r_{t+i} + V(t+k) - V(t), the
/// bootstrap detached; actor -sum detach(A) log pi, critic 1/2 sum A^2.
A2CTerms a2c_loss(const RolloutRecord& r, int k = 1);

struct NavLossBreakdown {
  double ce = 0.0;
  double actor = 0.0;
  double critic = 0.0;
  double total = 0.0;
  double weight_sum = 0.0;
};

/// sum_r w_r (ce_weight CE_r + rl_weight (actor_r + critic_r)) / sum_r w_r.
/// `rl` switches off the A2C part (e.g. for pretraining).
Tensor navigator_loss(std::span<const RolloutRecord> records, const TrainConfig& cfg, bool rl,
                      NavLossBreakdown* out = nullptr);

/// Backward through `tape`, Adam on nav/ and critic/, zero gradients.
/// `extra` (taped on the same tape) is added to the loss, e.g. best-branch terms.
NavLossBreakdown navigator_update(Models& models, Tape& tape, std::span<const RolloutRecord> records,
                                  const TrainConfig& cfg, bool rl = true, const Tensor* extra = nullptr);

struct SpeakerItem {
  Tensor logprob;          ///< summed token log-prob, taped
  bool is_target = true;   ///< CE item (teacher tokens) or REINFORCE item (generated tokens)
  double advantage = 0.0;  ///< REINFORCE weight
  double weight = 1.0;
};

struct SpkLossBreakdown {
  double ce = 0.0;
  double rl = 0.0;
  double total = 0.0;
};

Tensor speaker_loss(std::span<const SpeakerItem> items, bool rl, SpkLossBreakdown* out = nullptr);

/// Backward through `tape`, RMSProp on spk/, zero gradients.
SpkLossBreakdown speaker_update(Models& models, Tape& tape, std::span<const SpeakerItem> items, const TrainConfig& cfg);

struct IterLog {
  int iter = 0;
  double loss_ce = 0.0;
  double loss_actor = 0.0;
  double loss_critic = 0.0;
  double loss_spk = 0.0;
  double mean_goal_progress = 0.0;
};
nlohmann::ordered_json iter_log_json(const IterLog& l);

using LogSink = std::function<void(const IterLog&)>;

/// Worlds referenced by corpus records, looked up by seed.
class WorldSet {
 public:
  explicit WorldSet(std::span<const World> worlds);
  const World& at(std::uint64_t seed) const;

 private:
  std::span<const World> worlds_;
};

/// Navigator CE with student sampling on corpus bursts, speaker token CE on
/// the scripted exchanges.
void pretrain(Models& models, std::span<const CorpusRecord> corpus, std::span<const World> worlds,
              const TrainConfig& cfg, const LogSink& log = nullptr);

enum class SelfPlayMethod { Baseline, DataAugmentation, Rmm };

std::string_view method_name(SelfPlayMethod m);
SelfPlayMethod method_from_name(std::string_view name);

struct SelfPlayOptions {
  SelfPlayMethod method = SelfPlayMethod::Baseline;
  GameConfig game;
  RmmConfig rmm;  ///< used by Rmm (mode forced to TrainDistance)
};

struct DaStats;

struct SelfPlayStats {
  /// Language the method introduced while training: spoken exchanges for
  /// baseline and RMM, the generated augmentation instructions for DA.
  int generated_utterances = 0;
  int generated_lexical_types = 0;
  double mean_goal_progress = 0.0;  ///< over all self-play episodes
};

/// Dialogue self-play on training worlds; updates models in place.
SelfPlayStats self_play(Models& models, std::span<const World> worlds, std::span<const CorpusRecord> corpus,
               const TrainConfig& cfg, const SelfPlayOptions& opts, const LogSink& log = nullptr);

struct DaStats {
  int conversations = 0;
  int rollouts = 0;
  int retained = 0;
  double aug_weight = 0.0;    ///< weight given to the generated pairs' mean loss
  double human_weight = 0.0;  ///< weight given to the scripted data's mean loss
  double aug_loss = 0.0;      ///< mean navigator loss on generated pairs (first batch)
  double human_loss = 0.0;    ///< mean navigator loss on scripted data (first batch)
  std::vector<Utterance> instructions;
};

/// One augmentation round: 3 rollouts per conversation, the best kept,
/// instruction generated, then one epoch of lambda-mixed fine-tuning.
DaStats data_augmentation_round(Models& models, std::span<const World> worlds, std::span<const CorpusRecord> corpus,
                                const TrainConfig& cfg, const GameConfig& game = {}, const LogSink& log = nullptr);

}  // namespace rmmnav
