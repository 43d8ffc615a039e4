#include "rmmnav/gameplay.hpp"

#include <algorithm>
#include <sstream>

#include "rmmnav/rmm.hpp"

namespace rmmnav {

void GameConfig::validate() const {
  if (question_interval < 1 || max_actions < 1 || max_exchanges < 1 || history_cap < 1)
    throw ConfigError("game budgets must be positive");
  if (max_exchanges != max_actions / question_interval)
    throw ConfigError("game.max_exchanges must equal max_actions / question_interval");
  if (!(temperature > 0.0)) throw ConfigError("game.temperature must be > 0");
}

std::vector<std::vector<float>> guide_view(const World& world, const Pose& pose, NodeId goal, int d_img) {
  const auto path = shortest_path(world, pose.node, goal, 5);
  if (path.empty()) return {observation(world, pose, d_img)};
  std::vector<std::vector<float>> out;
  NodeId prev = pose.node;
  for (NodeId n : path) {
    int heading = pose.heading;
    for (const auto& nb : world.neighbors(prev)) {
      if (nb.node == n) heading = nb.bucket;
    }
    out.push_back(observation(world, {n, heading}, d_img));
    prev = n;
  }
  return out;
}

GuideInput make_guide_input(const World& world, const Pose& pose, NodeId goal, int d_img) {
  return {&world, pose, goal, shortest_path(world, pose.node, goal, 5), guide_view(world, pose, goal, d_img)};
}

namespace {

std::string words_of(const Utterance& u) { return Vocabulary::standard().decode(u.tokens); }

}  // namespace

Transcript run_episode(const Players& players, const EpisodeSpec& spec, const GameConfig& config, Selection selection,
                       const RmmConfig* rmm, EpisodeTrace* trace, nlohmann::json* rmm_debug) {
  config.validate();
  if (players.navigator == nullptr || players.speaker == nullptr) throw PreconditionError("run_episode: missing player");
  if (selection == Selection::Rmm && (rmm == nullptr || players.mental_navigator == nullptr))
    throw PreconditionError("run_episode: Rmm selection needs an RmmConfig and a mental navigator");
  const World& world = *spec.world;
  if (!world.has_node(spec.start.node) || !world.has_node(spec.goal)) throw PreconditionError("run_episode: invalid pose");

  Transcript tr;
  tr.world_seed = world.seed();
  tr.episode_seed = spec.seed;
  tr.start = spec.start;
  tr.goal = spec.goal;
  tr.visited.push_back(spec.start);

  Rng nav_rng(derive_seed(spec.seed, 1));
  Rng lang_rng(derive_seed(spec.seed, 2));
  const TokenId target = target_token(world);
  DialogueState st{{target, {}}, spec.start, kStartAction, 0};
  auto gp_at = [&](const Pose& p) { return goal_progress(world, spec.start.node, p.node, spec.goal); };
  double best_gp = 0.0;

  auto ask = [&]() {
    const int idx = static_cast<int>(st.history.exchanges.size());
    const GuideInput guide = make_guide_input(world, st.pose, spec.goal, players.d_img);
    Exchange ex;
    std::shared_ptr<RmmOutcome> outcome;
    if (selection == Selection::Plain) {
      const LangDecode mode{config.language, config.temperature, &lang_rng};
      ex.question = players.speaker->ask(world, st.pose, target, mode).utterance;
      ex.answer = players.speaker->answer(guide, target, ex.question, mode).utterance;
    } else {
      outcome = std::make_shared<RmmOutcome>(
          rmm_exchange(st, players, world, spec.goal, config, *rmm, derive_seed(spec.seed, 3, idx)));
      ex = outcome->branches[outcome->chosen].pair;
      if (rmm_debug != nullptr) {
        auto d = rmm_debug_json(*outcome);
        d["exchange"] = idx;
        rmm_debug->push_back(std::move(d));
      }
    }
    if (trace != nullptr) {
      trace->asked.push_back({st.pose, question_input(world, st.pose, target, players.d_img),
                              answer_input(guide, target, ex.question), ex, guide.path5, outcome});
    }
    st.history.exchanges.push_back(ex);
    tr.exchanges.push_back(ex);
    const double gp = gp_at(st.pose);
    tr.events.push_back({st.actions, EventKind::Question, words_of(ex.question), st.pose, gp});
    tr.events.push_back({st.actions, EventKind::Answer, words_of(ex.answer), st.pose, gp});
    tr.exchange_best_gp.push_back(best_gp);
  };

  bool first = true;
  while (true) {
    if (!first || config.question_first) {
      if (static_cast<int>(st.history.exchanges.size()) >= config.max_exchanges) break;
      ask();
    }
    first = false;
    const auto ctx = build_context(st.history, config.context, config.history_cap);
    tr.context_lengths.push_back(static_cast<int>(ctx.size()));
    const int steps = std::min(config.question_interval, config.max_actions - st.actions);
    Rollout r = players.navigator->burst({&world, st.pose, spec.goal, ctx, st.prev_action, steps}, nav_rng);
    for (std::size_t i = 0; i < r.actions.size(); ++i) {
      const Pose after = step(world, r.poses[i], r.actions[i]);
      ++st.actions;
      tr.visited.push_back(after);
      const double gp = gp_at(after);
      best_gp = std::max(best_gp, gp);
      tr.events.push_back({st.actions, EventKind::Act, std::string(action_name(r.actions[i])), after, gp});
    }
    st.pose = r.end;
    st.prev_action = r.last_action;
    const bool stopped = r.stopped;
    if (trace != nullptr) trace->bursts.push_back({ctx, std::move(r)});
    if (stopped) {
      tr.stopped = true;
      break;
    }
    if (st.actions >= config.max_actions) break;
  }
  tr.num_actions = st.actions;
  tr.final_gp = gp_at(st.pose);
  return tr;
}

double oracle_stopping(const Transcript& t) {
  if (t.events.empty() && t.visited.empty()) throw PreconditionError("oracle_stopping: empty transcript");
  double best = 0.0;  // the start pose is visited with progress 0
  for (const auto& e : t.events) best = std::max(best, e.gp);
  return best;
}

std::string event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::Act: return "act";
    case EventKind::Question: return "q";
    case EventKind::Answer: return "a";
  }
  return "?";
}

std::string transcript_to_jsonl(const Transcript& t) {
  std::ostringstream out;
  nlohmann::ordered_json h;
  h["kind"] = "header";
  h["world_seed"] = t.world_seed;
  h["episode_seed"] = t.episode_seed;
  h["start"] = {t.start.node, t.start.heading};
  h["goal"] = t.goal;
  for (const auto& [k, v] : t.meta.items()) h[k] = v;
  out << h.dump() << "\n";
  for (const auto& e : t.events) {
    nlohmann::ordered_json j;
    j["t"] = e.t;
    j["kind"] = event_kind_name(e.kind);
    j["payload"] = e.payload;
    j["pose"] = {e.pose.node, e.pose.heading};
    j["gp"] = e.gp;
    out << j.dump() << "\n";
  }
  nlohmann::ordered_json f;
  f["kind"] = "end";
  f["stopped"] = t.stopped;
  f["num_actions"] = t.num_actions;
  f["final_gp"] = t.final_gp;
  out << f.dump() << "\n";
  return out.str();
}

Transcript transcript_from_jsonl(const std::string& text) {
  Transcript t;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  const auto& vocab = Vocabulary::standard();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::ordered_json::parse(line);
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "header") {
      header = true;
      t.world_seed = j.at("world_seed").get<std::uint64_t>();
      t.episode_seed = j.at("episode_seed").get<std::uint64_t>();
      t.start = {j.at("start").at(0).get<int>(), j.at("start").at(1).get<int>()};
      t.goal = j.at("goal").get<int>();
      t.visited.push_back(t.start);
      for (const auto& [k, v] : j.items()) {
        if (k != "kind" && k != "world_seed" && k != "episode_seed" && k != "start" && k != "goal") t.meta[k] = v;
      }
      continue;
    }
    if (kind == "end") {
      t.stopped = j.at("stopped").get<bool>();
      t.num_actions = j.at("num_actions").get<int>();
      t.final_gp = j.at("final_gp").get<double>();
      continue;
    }
    TranscriptEvent e;
    e.t = j.at("t").get<int>();
    e.payload = j.at("payload").get<std::string>();
    e.pose = {j.at("pose").at(0).get<int>(), j.at("pose").at(1).get<int>()};
    e.gp = j.at("gp").get<double>();
    if (kind == "act") {
      e.kind = EventKind::Act;
      t.visited.push_back(e.pose);
    } else if (kind == "q" || kind == "a") {
      e.kind = kind == "q" ? EventKind::Question : EventKind::Answer;
      Utterance u{kind == "q" ? Role::Question : Role::Answer, vocab.encode(e.payload)};
      u.tokens.push_back(Vocabulary::kEos);
      if (kind == "q") t.exchanges.push_back({u, {}});
      else if (!t.exchanges.empty()) t.exchanges.back().answer = u;
    } else {
      throw ConfigError("transcript: unknown event kind '" + kind + "'");
    }
    t.events.push_back(std::move(e));
  }
  if (!header) throw ConfigError("transcript: missing header line");
  return t;
}

}  // namespace rmmnav
