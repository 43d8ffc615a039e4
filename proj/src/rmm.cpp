#include "rmmnav/rmm.hpp"

#include <algorithm>
#include <cmath>

#include "rmmnav/training.hpp"

namespace rmmnav {

void RmmConfig::validate() const {
  if (n < 1) throw ConfigError("rmm.N must be >= 1");
  if (horizon < 1) throw ConfigError("rmm.horizon must be >= 1");
  if (effective_budget() < n * n) throw ConfigError("rmm.budget must be >= N^2");
  if (!(temperature > 0.0)) throw ConfigError("rmm.temperature must be > 0");
}

double confidence_score(std::span<const double> logprobs) {
  if (logprobs.empty()) throw PreconditionError("confidence_score: empty rollout");
  double s = 0.0;
  for (double v : logprobs) s += v;
  return s / static_cast<double>(logprobs.size());
}

int select_branch(std::span<const BranchResult> branches, RmmMode mode) {
  if (branches.empty()) throw PreconditionError("select_branch: no branches");
  int best = 0;
  for (int i = 1; i < static_cast<int>(branches.size()); ++i) {
    const bool better = mode == RmmMode::TrainDistance ? branches[i].remaining < branches[best].remaining
                                                       : branches[i].confidence > branches[best].confidence;
    if (better) best = i;
  }
  return best;
}

namespace {

// Progress of one candidate's mental rollout.
struct Cursor {
  DialogueHistory history;
  Pose pose;
  int prev_action;
  int actions;     // real + mental actions, for the episode cap
  int remaining;   // mental actions left in the horizon
  int depth = 1;
  bool done = false;
};

}  // namespace

RmmOutcome rmm_exchange(const DialogueState& state, const Players& players, const World& world, NodeId goal,
                        const GameConfig& game, const RmmConfig& config, std::uint64_t seed) {
  config.validate();
  if (players.speaker == nullptr || players.mental_navigator == nullptr)
    throw PreconditionError("rmm_exchange: missing speaker or mental navigator");
  NoGradScope no_grad;
  const int N = config.n;
  const int budget = config.effective_budget();
  const TokenId target = state.history.target;
  const GuideInput guide = make_guide_input(world, state.pose, goal, players.d_img);

  RmmOutcome out;
  out.stats.branching_by_depth.push_back(N * N);
  out.stats.top_level_pairs = N * N;
  out.stats.max_depth = 1;

  auto lang_mode = [&](int index, Rng& rng) {
    return index == 0 ? LangDecode{DecodeKind::Argmax, 1.0, nullptr}
                      : LangDecode{DecodeKind::Sample, config.temperature, &rng};
  };

  std::vector<Generated> questions;
  for (int i = 0; i < N; ++i) {
    Rng rng(derive_seed(seed, 1, i));
    questions.push_back(players.speaker->ask(world, state.pose, target, lang_mode(i, rng)));
  }
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      Rng rng(derive_seed(seed, 2, i * N + j));
      BranchResult b;
      b.q_index = i;
      b.a_index = j;
      b.pair.question = questions[i].utterance;
      b.pair.answer = players.speaker->answer(guide, target, b.pair.question, lang_mode(j, rng)).utterance;
      b.question_input = question_input(world, state.pose, target, players.d_img);
      b.answer_input = answer_input(guide, target, b.pair.question);
      out.branches.push_back(std::move(b));
    }
  }

  std::vector<Cursor> cursors;
  for (const auto& b : out.branches) {
    Cursor c{state.history, state.pose, state.prev_action, state.actions, config.horizon};
    c.history.exchanges.push_back(b.pair);
    cursors.push_back(std::move(c));
  }

  // One navigator segment; returns false when the rollout is over.
  auto advance = [&](int p) {
    Cursor& c = cursors[p];
    const int steps = std::min({game.question_interval, c.remaining, game.max_actions - c.actions});
    if (steps <= 0) return false;
    const auto ctx = build_context(c.history, game.context, game.history_cap);
    Rng rng(derive_seed(seed, 3 + c.depth, p));
    const Rollout r = players.mental_navigator->burst({&world, c.pose, goal, ctx, c.prev_action, steps}, rng);
    out.branches[p].segments.push_back({ctx, c.pose, c.prev_action, r.actions, r.logprobs, c.depth});
    const int len = static_cast<int>(r.actions.size());
    c.remaining -= len;
    c.actions += len;
    c.pose = r.end;
    c.prev_action = r.last_action;
    return !(r.stopped || c.remaining <= 0 || c.actions >= game.max_actions);
  };

  // Every top-level pair gets its rollout before any recursion spends budget.
  for (int p = 0; p < N * N; ++p) {
    ++out.stats.rollouts;
    cursors[p].done = !advance(p);
  }
  for (int p = 0; p < N * N; ++p) {
    Cursor& c = cursors[p];
    while (!c.done) {
      const int exchanges = static_cast<int>(c.history.exchanges.size());
      if (out.stats.rollouts >= budget || exchanges >= game.max_exchanges) break;
      // Deeper question point: branching 1, argmax language.
      ++out.stats.rollouts;
      ++c.depth;
      if (static_cast<int>(out.stats.branching_by_depth.size()) < c.depth) out.stats.branching_by_depth.push_back(0);
      ++out.stats.branching_by_depth[c.depth - 1];
      out.stats.max_depth = std::max(out.stats.max_depth, c.depth);
      const LangDecode argmax{DecodeKind::Argmax, 1.0, nullptr};
      Exchange ex;
      ex.question = players.speaker->ask(world, c.pose, target, argmax).utterance;
      ex.answer = players.speaker
                      ->answer(make_guide_input(world, c.pose, goal, players.d_img), target, ex.question, argmax)
                      .utterance;
      c.history.exchanges.push_back(std::move(ex));
      c.done = !advance(p);
    }
  }

  for (int p = 0; p < N * N; ++p) {
    auto& b = out.branches[p];
    std::vector<double> lps;
    for (const auto& s : b.segments) {
      lps.insert(lps.end(), s.logprobs.begin(), s.logprobs.end());
      b.rollout_len += static_cast<int>(s.actions.size());
    }
    b.end = cursors[p].pose;
    b.remaining = world.distance(b.end.node, goal);
    b.confidence = lps.empty() ? 0.0 : confidence_score(lps);
    b.score = config.mode == RmmMode::TrainDistance ? -b.remaining : b.confidence;
  }
  out.chosen = select_branch(out.branches, config.mode);
  return out;
}

BranchLosses best_branch_losses(const Models& models, const World& world, NodeId goal,
                                std::span<const BranchResult> branches, int td_k) {
  if (branches.empty()) throw PreconditionError("best_branch_losses: no branches");
  BranchLosses out;
  out.index = select_branch(branches, RmmMode::TrainDistance);
  const BranchResult& b = branches[out.index];
  std::vector<Rollout> replay;
  for (const auto& seg : b.segments) {
    const NavContext ctx = encode_context(models, seg.context);
    replay.push_back(replay_actions(models, ctx, world, seg.start, seg.prev_action, seg.actions));
  }
  const RolloutRecord rec = make_record(world, goal, replay);
  out.ce = rec.steps.empty() ? Tensor::scalar(0.0f) : ce_loss(rec);
  const auto a2c = rec.steps.empty() ? A2CTerms{Tensor::scalar(0.0f), Tensor::scalar(0.0f), Tensor::scalar(0.0f)}
                                     : a2c_loss(rec, td_k);
  out.actor = a2c.actor;
  out.critic = a2c.critic;
  out.question_logprob = sum(score_utterance(models, b.question_input, b.pair.question.tokens));
  out.answer_logprob = sum(score_utterance(models, b.answer_input, b.pair.answer.tokens));
  double mean_remaining = 0.0;
  for (const auto& x : branches) mean_remaining += x.remaining;
  mean_remaining /= static_cast<double>(branches.size());
  out.advantage = mean_remaining - b.remaining;
  return out;
}

nlohmann::json rmm_debug_json(const RmmOutcome& outcome) {
  nlohmann::ordered_json j;
  j["pairs"] = nlohmann::ordered_json::array();
  const auto& vocab = Vocabulary::standard();
  for (const auto& b : outcome.branches) {
    nlohmann::ordered_json p;
    p["q"] = vocab.decode(b.pair.question.tokens);
    p["a"] = vocab.decode(b.pair.answer.tokens);
    p["score"] = b.score;
    p["rollout_len"] = b.rollout_len;
    j["pairs"].push_back(std::move(p));
  }
  j["chosen_index"] = outcome.chosen;
  j["rollouts_used"] = outcome.stats.rollouts;
  return nlohmann::json::parse(j.dump());
}

}  // namespace rmmnav
