#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/lang.hpp"
#include "rmmnav/nn.hpp"
#include "rmmnav/tensor.hpp"
#include "rmmnav/world.hpp"

namespace rmmnav {

struct ModelConfig {
  int vocab_size = 64;
  int hidden = 64;
  int word_embed = 32;
  int action_embed = 8;
  int d_img = kDefaultImageDim;
  double dropout = 0.5;
  int l_gen = 12;

  static ModelConfig paper_scale();
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Parameters of all three roles in one store: nav/*, critic/*, spk/*.
struct Models {
  ModelConfig config;
  ParamStore params;
};

Models init_models(const ModelConfig& config, std::uint64_t seed);
void save_models(const std::filesystem::path& dir, const Models& models, const nlohmann::json& extra = {});
Models load_models(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

/// Train-time dropout switch. Inactive unless `rng` is set and train is true.
struct DropoutCtl {
  float p = 0.0f;
  Rng* rng = nullptr;
  bool train = false;
  Tensor apply(const Tensor& x) const;
};

// ---------------------------------------------------------------------------
// Navigator

inline constexpr int kStartAction = kNumActions;  ///< previous-action index before the first move

struct NavContext {
  Tensor u;         ///< [k, H] encoder outputs
  LstmState final;  ///< h_N, c_N
};

NavContext encode_context(const Models& m, std::span<const TokenId> tokens, const DropoutCtl& drop = {});

struct NavStepOutput {
  Tensor logits;  ///< [1, 4]
  LstmState state;
  Tensor value;  ///< [1, 1]
};

NavStepOutput nav_policy_step(const Models& m, const LstmState& state, int prev_action, std::span<const float> obs,
                              const NavContext& ctx, const DropoutCtl& drop = {});

enum class DecodeKind { Argmax, Sample };

struct NavDecode {
  DecodeKind kind = DecodeKind::Argmax;
  Rng* rng = nullptr;  ///< required for Sample
};

/// One navigation burst and everything needed to build losses from it.
struct Rollout {
  std::vector<Action> actions;
  std::vector<Pose> poses;          ///< pose at which each action was chosen
  std::vector<Tensor> logits;       ///< per step
  std::vector<Tensor> values;       ///< critic estimate per step
  std::vector<double> logprobs;     ///< log pi(chosen action)
  Pose end;
  int last_action = kStartAction;
  bool stopped = false;
};

/// Rolls the policy from `start` until Stop or max_steps actions. The decoder
/// starts from the context's final encoder state.
Rollout decode_actions(const Models& m, const NavContext& ctx, const World& world, const Pose& start, int prev_action,
                       const NavDecode& mode, int max_steps, const DropoutCtl& drop = {});

/// Re-runs the decoder along fixed `actions` (teacher forcing); tensors are
/// taped when a tape is active. Stops early if an action is Stop.
Rollout replay_actions(const Models& m, const NavContext& ctx, const World& world, const Pose& start, int prev_action,
                       std::span<const Action> actions, const DropoutCtl& drop = {});

// ---------------------------------------------------------------------------
// Speaker

struct LangDecode {
  DecodeKind kind = DecodeKind::Argmax;
  double temperature = 1.0;
  Rng* rng = nullptr;
};

struct Generated {
  Utterance utterance;
  std::vector<double> logprobs;  ///< model log-prob of each emitted token (EOS included)
};

/// Speaker input: images to encode and the condition tokens placed after the role tag.
struct SpeakerInput {
  Role role = Role::Question;
  std::vector<std::vector<float>> images;
  std::vector<TokenId> condition;  ///< t_O, plus the question words for the Guide
};

Generated generate_utterance(const Models& m, const SpeakerInput& in, const LangDecode& mode);

/// Teacher-forced log-probabilities of `tokens` (EOS appended if missing);
/// differentiable when a tape is active. Returns [1, n] per-token log-probs.
Tensor score_utterance(const Models& m, const SpeakerInput& in, std::span<const TokenId> tokens,
                       const DropoutCtl& drop = {});

/// First-token distribution after the prefix; used for role-conditioning checks.
std::vector<double> first_token_distribution(const Models& m, const SpeakerInput& in);

// ---------------------------------------------------------------------------
// Role policies used by the game engine.

struct BurstRequest {
  const World* world = nullptr;
  Pose start;
  NodeId goal = 0;
  std::span<const TokenId> context;
  int prev_action = kStartAction;
  int max_steps = 1;
};

class NavigatorPolicy {
 public:
  virtual ~NavigatorPolicy() = default;
  /// `rng` is only used by sampling policies.
  virtual Rollout burst(const BurstRequest& req, Rng& rng) const = 0;
};

/// Learned navigator; Rollout tensors are taped when a tape is active.
class LearnedNavigator : public NavigatorPolicy {
 public:
  LearnedNavigator(const Models& m, DecodeKind kind, DropoutCtl drop = {}) : m_(m), kind_(kind), drop_(drop) {}
  Rollout burst(const BurstRequest& req, Rng& rng) const override;

 private:
  const Models& m_;
  DecodeKind kind_;
  DropoutCtl drop_;
};

/// Follows the shortest path to the goal and stops there.
class TeacherNavigator : public NavigatorPolicy {
 public:
  Rollout burst(const BurstRequest& req, Rng& rng) const override;
};

/// Stops immediately.
class StationaryNavigator : public NavigatorPolicy {
 public:
  Rollout burst(const BurstRequest& req, Rng& rng) const override;
};

struct GuideInput {
  const World* world = nullptr;
  Pose pose;
  NodeId goal = 0;
  std::vector<NodeId> path5;
  std::vector<std::vector<float>> images;  ///< guide_view
};

class SpeakerPolicy {
 public:
  virtual ~SpeakerPolicy() = default;
  virtual Generated ask(const World& world, const Pose& pose, TokenId target, const LangDecode& mode) const = 0;
  virtual Generated answer(const GuideInput& in, TokenId target, const Utterance& question,
                           const LangDecode& mode) const = 0;
};

class LearnedSpeaker : public SpeakerPolicy {
 public:
  explicit LearnedSpeaker(const Models& m) : m_(m) {}
  Generated ask(const World& world, const Pose& pose, TokenId target, const LangDecode& mode) const override;
  Generated answer(const GuideInput& in, TokenId target, const Utterance& question,
                   const LangDecode& mode) const override;

 private:
  const Models& m_;
};

/// Templated questions and answers (the human stand-in).
class ScriptedSpeaker : public SpeakerPolicy {
 public:
  Generated ask(const World& world, const Pose& pose, TokenId target, const LangDecode& mode) const override;
  Generated answer(const GuideInput& in, TokenId target, const Utterance& question,
                   const LangDecode& mode) const override;
};

SpeakerInput question_input(const World& world, const Pose& pose, TokenId target, int d_img);
SpeakerInput answer_input(const GuideInput& in, TokenId target, const Utterance& question);

}  // namespace rmmnav
