#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/common.hpp"
#include "rmmnav/world.hpp"

namespace rmmnav {

using TokenId = int;

/// Closed word list with fixed reserved ids.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNavTag = 4;
  static constexpr TokenId kOraTag = 5;
  static constexpr int kNumReserved = 6;

  explicit Vocabulary(std::vector<std::string> words);

  /// Default 64-word vocabulary: reserved, compass, room labels, objects, template words.
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(words_.size()); }
  TokenId id(std::string_view word) const;  ///< kUnk for unknown words
  const std::string& word(TokenId id) const { return words_.at(id); }
  bool is_special(TokenId id) const { return id < kNumReserved; }

  std::vector<TokenId> encode(std::string_view sentence) const;  ///< whitespace-split
  std::string decode(std::span<const TokenId> tokens) const;     ///< stops at EOS, skips PAD/BOS

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class Role : std::uint8_t { Question, Answer };

inline TokenId role_tag(Role r) { return r == Role::Question ? Vocabulary::kNavTag : Vocabulary::kOraTag; }

struct Utterance {
  Role role = Role::Question;
  std::vector<TokenId> tokens;  ///< ends with EOS unless the length cap was hit

  /// Tokens without the trailing EOS.
  std::span<const TokenId> words() const;
  bool operator==(const Utterance&) const = default;
};

struct Exchange {
  Utterance question;
  Utterance answer;
  bool operator==(const Exchange&) const = default;
};

struct DialogueHistory {
  TokenId target = Vocabulary::kUnk;
  std::vector<Exchange> exchanges;
  bool operator==(const DialogueHistory&) const = default;
};

enum class ContextMode : std::uint8_t { TargetOnly, LastExchange, FullHistory };

std::string_view context_mode_name(ContextMode m);
ContextMode context_mode_from_name(std::string_view name);  ///< accepts t0|qa1|full and the long names

inline constexpr int kDefaultHistoryCap = 160;

/// Navigator input tokens for a history. Oldest material is dropped first;
/// t_O is always kept and a kept utterance is always preceded by its tag.
std::vector<TokenId> build_context(const DialogueHistory& history, ContextMode mode,
                                   int history_cap = kDefaultHistoryCap);

inline constexpr double kBleuEpsilon = 1e-9;

/// Sentence BLEU-4 with uniform weights, closest-reference brevity penalty and
/// epsilon precision for orders with zero matches. EOS/PAD are ignored.
double bleu(std::span<const TokenId> candidate, std::span<const std::vector<TokenId>> references);
double bleu(const Utterance& candidate, std::span<const Utterance> references);

/// Unique word types across utterances (specials excluded) plus counts.
struct LexicalStats {
  int types = 0;
  std::map<TokenId, int> frequency;
};
LexicalStats lexical_types(std::span<const Utterance> utterances);

/// Templated stand-ins for human dialogue.
Utterance script_question(const World& world, const Pose& pose, const Vocabulary& vocab = Vocabulary::standard());
Utterance script_answer(const World& world, NodeId from, std::span<const NodeId> path5,
                        const Vocabulary& vocab = Vocabulary::standard());

TokenId target_token(const World& world, const Vocabulary& vocab = Vocabulary::standard());

/// One navigation burst and the exchange asked right before it.
struct CorpusRecord {
  std::uint64_t world_seed = 0;
  int episode_id = 0;
  int exchange_index = 0;  ///< 0 is the initial burst (no exchange yet)
  Pose burst_start;        ///< pose where the question was asked
  NodeId goal = 0;
  std::vector<TokenId> context_tokens;  ///< FullHistory context including this exchange
  std::vector<Action> nav_actions;      ///< actions actually taken
  std::vector<Action> teacher_actions;  ///< shortest-path action at each visited pose
  std::vector<TokenId> question_tokens;
  std::vector<TokenId> answer_tokens;
  std::vector<NodeId> path5;
  bool operator==(const CorpusRecord&) const = default;
};

struct CorpusParams {
  int episodes_per_world = 4;
  double noise = 0.1;
  std::uint64_t rng_seed = 0;
  int question_interval = 4;
  int max_actions = 80;
  int max_exchanges = 20;
};

/// Sample a start pose outside the goal room (any node if that is impossible).
Pose sample_start(const World& world, Rng& rng);

std::vector<CorpusRecord> generate_corpus(std::span<const World> worlds, const CorpusParams& params);

nlohmann::ordered_json corpus_record_to_json(const CorpusRecord& r);
CorpusRecord corpus_record_from_json(const nlohmann::json& j);

/// Records of one episode, in exchange order.
struct CorpusEpisode {
  std::vector<const CorpusRecord*> bursts;
};
std::vector<CorpusEpisode> group_episodes(std::span<const CorpusRecord> corpus);

}  // namespace rmmnav
