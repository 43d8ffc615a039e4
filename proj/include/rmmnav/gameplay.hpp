#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/agents.hpp"
#include "rmmnav/lang.hpp"
#include "rmmnav/world.hpp"

namespace rmmnav {

struct RmmConfig;
struct RmmOutcome;

struct GameConfig {
  int question_interval = 4;
  int max_actions = 80;
  int max_exchanges = 20;
  int history_cap = kDefaultHistoryCap;
  ContextMode context = ContextMode::FullHistory;
  bool question_first = false;  ///< ask before the first burst instead of after it
  DecodeKind language = DecodeKind::Argmax;
  double temperature = 0.6;
  void validate() const;
};

/// Everything the navigator side knows mid-episode.
struct DialogueState {
  DialogueHistory history;
  Pose pose;
  int prev_action = kStartAction;
  int actions = 0;
  bool operator==(const DialogueState&) const = default;
};

/// Observations along the next <= 5 shortest-path steps, each oriented along
/// the direction of travel; at the goal, the current observation alone.
std::vector<std::vector<float>> guide_view(const World& world, const Pose& pose, NodeId goal, int d_img);
GuideInput make_guide_input(const World& world, const Pose& pose, NodeId goal, int d_img);

enum class EventKind { Act, Question, Answer };

struct TranscriptEvent {
  int t = 0;  ///< actions taken so far (after this event)
  EventKind kind = EventKind::Act;
  std::string payload;
  Pose pose;
  double gp = 0.0;
};

struct Transcript {
  std::uint64_t world_seed = 0;
  std::uint64_t episode_seed = 0;
  Pose start;
  NodeId goal = 0;
  std::vector<TranscriptEvent> events;
  std::vector<Exchange> exchanges;
  std::vector<Pose> visited;              ///< start pose, then the pose after every action
  std::vector<double> exchange_best_gp;   ///< best progress so far at each exchange
  std::vector<int> context_lengths;       ///< navigator context tokens per burst
  bool stopped = false;                   ///< ended by Stop rather than a budget
  int num_actions = 0;
  double final_gp = 0.0;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();  ///< written into the header line
};

/// Training-time capture of one episode.
struct EpisodeTrace {
  struct Burst {
    std::vector<TokenId> context;
    Rollout rollout;
  };
  struct Asked {
    Pose pose;
    SpeakerInput question_input;
    SpeakerInput answer_input;
    Exchange exchange;
    std::vector<NodeId> path5;
    std::shared_ptr<RmmOutcome> rmm;  ///< set in Rmm selection
  };
  std::vector<Burst> bursts;
  std::vector<Asked> asked;
};

enum class Selection { Plain, Rmm };

struct EpisodeSpec {
  const World* world = nullptr;
  Pose start;
  NodeId goal = 0;
  std::uint64_t seed = 0;
};

struct Players {
  const NavigatorPolicy* navigator = nullptr;
  const SpeakerPolicy* speaker = nullptr;
  /// Rmm only: navigator used for mental rollouts (argmax, no side effects).
  const NavigatorPolicy* mental_navigator = nullptr;
  int d_img = kDefaultImageDim;
};

Transcript run_episode(const Players& players, const EpisodeSpec& spec, const GameConfig& config,
                       Selection selection = Selection::Plain, const RmmConfig* rmm = nullptr,
                       EpisodeTrace* trace = nullptr, nlohmann::json* rmm_debug = nullptr);

double oracle_stopping(const Transcript& t);

std::string event_kind_name(EventKind k);
/// Header line then one line per event; stable field order.
std::string transcript_to_jsonl(const Transcript& t);
Transcript transcript_from_jsonl(const std::string& text);

}  // namespace rmmnav
