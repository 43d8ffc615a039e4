#include "rmmnav/lang.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rmmnav {

namespace {

std::vector<std::string> standard_words() {
  std::vector<std::string> w = {"<pad>", "<bos>", "<eos>", "<unk>", "<nav>", "<ora>",
                                "north", "east",  "south", "west"};
  for (auto label : kRoomLabels) w.emplace_back(label);
  for (auto obj : kObjectWords) w.emplace_back(obj);
  for (const char* t : {"should", "i",    "go",   "or",   "?",   "to",   "the",  "then",  "and",  "stop",
                        "you",    "are",  "in",   "goal", "room", "see", "a",    ".",     "which", "way",
                        "is",     "it",   "near", "left", "right", "straight", "keep", "here", "turn", "where"})
    w.emplace_back(t);
  return w;
}

using NGramCounts = std::map<std::vector<TokenId>, int>;

NGramCounts count_ngrams(std::span<const TokenId> tokens, int n) {
  NGramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[std::vector<TokenId>(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

std::vector<TokenId> strip(std::span<const TokenId> tokens) {
  std::vector<TokenId> out;
  for (TokenId t : tokens) {
    if (t == Vocabulary::kEos) break;
    if (t != Vocabulary::kPad && t != Vocabulary::kBos) out.push_back(t);
  }
  return out;
}

int move_bucket(const World& world, NodeId from, NodeId to) {
  for (const auto& nb : world.neighbors(from)) {
    if (nb.node == to) return nb.bucket;
  }
  throw PreconditionError("script_answer: path is not a walk in the world");
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 16) throw ConfigError("vocabulary needs at least 16 words");
  static constexpr std::array<std::string_view, kNumReserved> kReserved = {"<pad>", "<bos>", "<eos>",
                                                                           "<unk>", "<nav>", "<ora>"};
  for (int i = 0; i < kNumReserved; ++i) {
    if (words_[i] != kReserved[i]) throw ConfigError("vocabulary reserved ids out of place");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second)
      throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab(standard_words());
  return vocab;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<TokenId> Vocabulary::encode(std::string_view sentence) const {
  std::vector<TokenId> out;
  std::istringstream in{std::string(sentence)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (t == kEos) break;
    if (t == kPad || t == kBos) continue;
    if (!out.empty()) out += ' ';
    out += (t >= 0 && t < size()) ? words_[t] : "<unk>";
  }
  return out;
}

std::span<const TokenId> Utterance::words() const {
  std::span<const TokenId> s(tokens);
  if (!s.empty() && s.back() == Vocabulary::kEos) s = s.first(s.size() - 1);
  return s;
}

std::string_view context_mode_name(ContextMode m) {
  switch (m) {
    case ContextMode::TargetOnly: return "t0";
    case ContextMode::LastExchange: return "qa1";
    case ContextMode::FullHistory: return "full";
  }
  return "?";
}

ContextMode context_mode_from_name(std::string_view name) {
  if (name == "t0" || name == "target_only") return ContextMode::TargetOnly;
  if (name == "qa1" || name == "last_exchange") return ContextMode::LastExchange;
  if (name == "full" || name == "full_history") return ContextMode::FullHistory;
  throw ConfigError("unknown context mode '" + std::string(name) + "'");
}

std::vector<TokenId> build_context(const DialogueHistory& history, ContextMode mode, int history_cap) {
  if (history_cap < 1) throw ConfigError("history_cap must be >= 1");
  std::vector<std::vector<TokenId>> units;  // oldest first, each starts with its tag
  auto add_exchange = [&](const Exchange& ex) {
    for (const Utterance* u : {&ex.question, &ex.answer}) {
      std::vector<TokenId> unit{role_tag(u->role)};
      auto w = u->words();
      unit.insert(unit.end(), w.begin(), w.end());
      units.push_back(std::move(unit));
    }
  };
  if (!history.exchanges.empty()) {
    if (mode == ContextMode::LastExchange) {
      add_exchange(history.exchanges.back());
    } else if (mode == ContextMode::FullHistory) {
      for (const auto& ex : history.exchanges) add_exchange(ex);
    }
  }

  int budget = history_cap - 1;
  std::vector<std::vector<TokenId>> kept;  // newest first
  for (auto it = units.rbegin(); it != units.rend() && budget > 0; ++it) {
    const int size = static_cast<int>(it->size());
    if (size <= budget) {
      kept.push_back(*it);
      budget -= size;
    } else {
      if (budget >= 2) {
        std::vector<TokenId> partial{it->front()};
        partial.insert(partial.end(), it->end() - (budget - 1), it->end());
        kept.push_back(std::move(partial));
      }
      break;
    }
  }
  std::vector<TokenId> out{history.target};
  for (auto it = kept.rbegin(); it != kept.rend(); ++it) out.insert(out.end(), it->begin(), it->end());
  return out;
}

double bleu(std::span<const TokenId> candidate_raw, std::span<const std::vector<TokenId>> references_raw) {
  if (references_raw.empty()) throw PreconditionError("bleu: no references");
  const auto candidate = strip(candidate_raw);
  if (candidate.empty()) return 0.0;
  std::vector<std::vector<TokenId>> references;
  for (const auto& r : references_raw) references.push_back(strip(r));

  double log_sum = 0.0;
  int orders = 0;
  for (int n = 1; n <= 4; ++n) {
    if (static_cast<int>(candidate.size()) < n) break;
    const auto cand_counts = count_ngrams(candidate, n);
    NGramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, c] : count_ngrams(ref, n)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    int matches = 0;
    int total = 0;
    for (const auto& [gram, c] : cand_counts) {
      total += c;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matches += std::min(c, it->second);
    }
    const double p = matches > 0 ? static_cast<double>(matches) / total : kBleuEpsilon;
    log_sum += std::log(p);
    ++orders;
  }

  // Closest reference length; ties go to the shorter reference.
  const double c = static_cast<double>(candidate.size());
  double r = -1.0;
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    if (r < 0 || std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / orders);
}

double bleu(const Utterance& candidate, std::span<const Utterance> references) {
  std::vector<std::vector<TokenId>> refs;
  for (const auto& r : references) refs.push_back(r.tokens);
  return bleu(candidate.tokens, refs);
}

LexicalStats lexical_types(std::span<const Utterance> utterances) {
  LexicalStats stats;
  for (const auto& u : utterances) {
    for (TokenId t : u.words()) {
      if (t >= Vocabulary::kNumReserved) ++stats.frequency[t];
    }
  }
  stats.types = static_cast<int>(stats.frequency.size());
  return stats;
}

TokenId target_token(const World& world, const Vocabulary& vocab) { return vocab.id(world.target_object()); }

Utterance script_question(const World& world, const Pose& pose, const Vocabulary& vocab) {
  std::vector<int> open;
  for (int k = 0; k < kNumHeadings; ++k) {
    const int h = (pose.heading + k) % kNumHeadings;
    for (const auto& nb : world.neighbors(pose.node)) {
      if (nb.bucket == h) {
        open.push_back(h);
        break;
      }
    }
  }
  std::string text;
  if (world.room_has_target(world.room_of(pose.node).id)) text = "i see a " + world.target_object() + " . ";
  if (open.size() >= 2) {
    text += "should i go " + std::string(heading_word(open[0])) + " or " + std::string(heading_word(open[1])) + " ?";
  } else if (open.size() == 1) {
    text += "should i go " + std::string(heading_word(open[0])) + " ?";
  } else {
    text += "where is the " + world.target_object() + " ?";
  }
  Utterance u{Role::Question, vocab.encode(text)};
  u.tokens.push_back(Vocabulary::kEos);
  return u;
}

Utterance script_answer(const World& world, NodeId from, std::span<const NodeId> path5, const Vocabulary& vocab) {
  std::string text;
  if (path5.empty()) {
    text = "you are in the goal room";
  } else {
    // Compress the walk into runs of equal direction.
    std::vector<std::pair<int, NodeId>> runs;  // (direction, last node of run)
    NodeId prev = from;
    for (NodeId n : path5) {
      const int b = move_bucket(world, prev, n);
      if (runs.empty() || runs.back().first != b) {
        runs.emplace_back(b, n);
      } else {
        runs.back().second = n;
      }
      prev = n;
    }
    const bool reaches_goal = path5.back() == world.goal_node();
    text = "go " + std::string(heading_word(runs[0].first)) + " to the " + world.room_of(runs[0].second).label;
    if (runs.size() >= 2) text += " then " + std::string(heading_word(runs[1].first));
    if (reaches_goal && runs.size() <= 2) text += " and stop";
  }
  Utterance u{Role::Answer, vocab.encode(text)};
  u.tokens.push_back(Vocabulary::kEos);
  return u;
}

Pose sample_start(const World& world, Rng& rng) {
  std::vector<NodeId> candidates;
  for (const auto& n : world.nodes()) {
    if (n.room != world.goal_room()) candidates.push_back(n.id);
  }
  if (candidates.empty()) {
    for (const auto& n : world.nodes()) {
      if (n.id != world.goal_node()) candidates.push_back(n.id);
    }
  }
  if (candidates.empty()) candidates.push_back(world.goal_node());
  const NodeId node = candidates[rng.below(candidates.size())];
  return {node, static_cast<int>(rng.below(kNumHeadings))};
}

std::vector<CorpusRecord> generate_corpus(std::span<const World> worlds, const CorpusParams& params) {
  if (!(params.noise >= 0.0 && params.noise <= 1.0)) throw ConfigError("corpus noise must be in [0,1]");
  if (params.question_interval < 1 || params.max_actions < 1) throw ConfigError("corpus budgets must be positive");
  const auto& vocab = Vocabulary::standard();
  std::vector<CorpusRecord> corpus;
  int episode_id = 0;
  for (const World& world : worlds) {
    for (int e = 0; e < params.episodes_per_world; ++e, ++episode_id) {
      Rng rng(derive_seed(params.rng_seed, world.seed(), static_cast<std::uint64_t>(episode_id)));
      const NodeId goal = world.goal_node();
      Pose pose = sample_start(world, rng);
      DialogueHistory history{target_token(world, vocab), {}};
      int actions = 0;
      bool stopped = false;
      CorpusRecord rec;
      auto open_record = [&](int index) {
        rec = CorpusRecord{};
        rec.world_seed = world.seed();
        rec.episode_id = episode_id;
        rec.exchange_index = index;
        rec.burst_start = pose;
        rec.goal = goal;
        rec.context_tokens = build_context(history, ContextMode::FullHistory);
      };
      open_record(0);
      while (true) {
        for (int s = 0; s < params.question_interval && actions < params.max_actions; ++s) {
          const Action teacher = teacher_action(world, pose, goal);
          Action taken = teacher;
          if (rng.uniform() < params.noise) taken = static_cast<Action>(rng.below(3));
          rec.teacher_actions.push_back(teacher);
          rec.nav_actions.push_back(taken);
          ++actions;
          pose = step(world, pose, taken);
          if (taken == Action::Stop) {
            stopped = true;
            break;
          }
        }
        corpus.push_back(rec);
        const int asked = static_cast<int>(history.exchanges.size());
        if (stopped || actions >= params.max_actions || asked >= params.max_exchanges) break;
        auto path5 = shortest_path(world, pose.node, goal, 5);
        Exchange ex{script_question(world, pose, vocab), script_answer(world, pose.node, path5, vocab)};
        history.exchanges.push_back(ex);
        open_record(asked + 1);
        rec.question_tokens = ex.question.tokens;
        rec.answer_tokens = ex.answer.tokens;
        rec.path5 = std::move(path5);
      }
    }
  }
  return corpus;
}

nlohmann::ordered_json corpus_record_to_json(const CorpusRecord& r) {
  std::vector<std::string> nav, teacher;
  for (Action a : r.nav_actions) nav.emplace_back(action_name(a));
  for (Action a : r.teacher_actions) teacher.emplace_back(action_name(a));
  nlohmann::ordered_json j;
  j["world_seed"] = r.world_seed;
  j["episode_id"] = r.episode_id;
  j["exchange_index"] = r.exchange_index;
  j["context_tokens"] = r.context_tokens;
  j["nav_actions"] = nav;
  j["question_tokens"] = r.question_tokens;
  j["answer_tokens"] = r.answer_tokens;
  j["path5"] = r.path5;
  j["teacher_actions"] = teacher;
  j["burst_start"] = {r.burst_start.node, r.burst_start.heading};
  j["goal"] = r.goal;
  return j;
}

CorpusRecord corpus_record_from_json(const nlohmann::json& j) {
  try {
    CorpusRecord r;
    r.world_seed = j.at("world_seed").get<std::uint64_t>();
    r.episode_id = j.at("episode_id").get<int>();
    r.exchange_index = j.at("exchange_index").get<int>();
    r.context_tokens = j.at("context_tokens").get<std::vector<TokenId>>();
    for (const auto& a : j.at("nav_actions")) r.nav_actions.push_back(action_from_name(a.get<std::string>()));
    for (const auto& a : j.at("teacher_actions")) r.teacher_actions.push_back(action_from_name(a.get<std::string>()));
    r.question_tokens = j.at("question_tokens").get<std::vector<TokenId>>();
    r.answer_tokens = j.at("answer_tokens").get<std::vector<TokenId>>();
    r.path5 = j.at("path5").get<std::vector<NodeId>>();
    r.burst_start = {j.at("burst_start").at(0).get<NodeId>(), j.at("burst_start").at(1).get<int>()};
    r.goal = j.at("goal").get<NodeId>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed corpus record: ") + e.what());
  }
}

std::vector<CorpusEpisode> group_episodes(std::span<const CorpusRecord> corpus) {
  std::map<std::pair<std::uint64_t, int>, CorpusEpisode> by_key;
  std::vector<std::pair<std::uint64_t, int>> order;
  for (const auto& r : corpus) {
    auto key = std::make_pair(r.world_seed, r.episode_id);
    auto [it, inserted] = by_key.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.bursts.push_back(&r);
  }
  std::vector<CorpusEpisode> out;
  for (const auto& key : order) {
    auto ep = std::move(by_key[key]);
    std::ranges::sort(ep.bursts, {}, &CorpusRecord::exchange_index);
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace rmmnav
