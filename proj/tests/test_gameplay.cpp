#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "rmmnav/gameplay.hpp"
#include "policies.hpp"
#include "protocol.hpp"
#include "rmmnav/rmm.hpp"

using namespace rmmnav;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.hidden = 16;
  c.word_embed = 8;
  c.action_embed = 4;
  c.d_img = 16;
  c.dropout = 0.0f;
  return c;
}

void check_protocol(const Transcript& t, const GameConfig& g) {
  const std::string v = protocol::violation(t, g);
  INFO(v);
  REQUIRE(v.empty());
}

}  // namespace

TEST_CASE("game config validation") {
  GameConfig g;
  g.validate();
  g.max_exchanges = 19;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = {};
  g.question_interval = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("Algorithm 1 conformance over 100 seeded episodes") {
  const auto m = init_models(small(), 1);
  const LearnedNavigator sampled(m, DecodeKind::Sample);
  const LearnedSpeaker speaker(m);
  const TeacherNavigator teacher;
  const testing_policies::Wanderer wanderer;
  const ScriptedSpeaker scripted;
  const GameConfig g;
  Rng rng(17);
  int stopped = 0, capped = 0;
  for (int ep = 0; ep < 100; ++ep) {
    const World w = generate_world(1000 + ep, WorldParams{});
    const Pose start = sample_start(w, rng);
    // Mostly the untrained sampling navigator; some teacher and wandering episodes.
    const NavigatorPolicy* nav = ep % 5 == 0 ? static_cast<const NavigatorPolicy*>(&teacher)
                                 : ep % 5 == 1 ? static_cast<const NavigatorPolicy*>(&wanderer)
                                               : &sampled;
    const SpeakerPolicy* spk = ep % 2 == 0 ? static_cast<const SpeakerPolicy*>(&speaker) : &scripted;
    const Players players{nav, spk, nullptr, small().d_img};
    const Transcript t = run_episode(players, {&w, start, w.goal_node(), derive_seed(5, ep)}, g);
    check_protocol(t, g);
    stopped += t.stopped;
    capped += t.num_actions == g.max_actions;
  }
  // Both endings are exercised.
  CHECK(stopped > 0);
  CHECK(capped > 0);
}

TEST_CASE("history stays within the cap with long dialogues") {
  const auto m = init_models(small(), 2);
  const LearnedNavigator nav(m, DecodeKind::Sample);
  const LearnedSpeaker speaker(m);
  GameConfig g;
  g.history_cap = 40;
  const World w = generate_world(3, WorldParams{});
  Rng rng(2);
  for (int ep = 0; ep < 10; ++ep) {
    const Transcript t = run_episode({&nav, &speaker, nullptr, small().d_img}, {&w, sample_start(w, rng), w.goal_node(), derive_seed(9, ep)}, g);
    check_protocol(t, g);
    for (int len : t.context_lengths) CHECK(len <= 40);
  }
}

TEST_CASE("stationary agent ends at once with zero progress") {
  const StationaryNavigator stay;
  const ScriptedSpeaker scripted;
  const World w = generate_world(4, WorldParams{});
  const Transcript t = run_episode({&stay, &scripted, nullptr}, {&w, Pose{1, 0}, w.goal_node(), 1}, GameConfig{});
  CHECK(t.stopped);
  CHECK(t.num_actions == 1);
  CHECK(t.exchanges.empty());
  CHECK(t.final_gp == 0.0);
  CHECK(oracle_stopping(t) == 0.0);
}

TEST_CASE("shortest-path agent's goal progress equals the initial distance") {
  const TeacherNavigator teacher;
  const ScriptedSpeaker scripted;
  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    const World w = generate_world(50 + i, WorldParams{});
    const Pose start = sample_start(w, rng);
    const Transcript t = run_episode({&teacher, &scripted, nullptr}, {&w, start, w.goal_node(), 7}, GameConfig{});
    CHECK(t.stopped);
    CHECK(t.final_gp == w.distance(start.node, w.goal_node()));
    CHECK(oracle_stopping(t) == t.final_gp);
  }
}

TEST_CASE("oracle stopping dominates final progress") {
  const auto m = init_models(small(), 3);
  const LearnedNavigator nav(m, DecodeKind::Sample);
  const LearnedSpeaker speaker(m);
  Rng rng(5);
  for (int ep = 0; ep < 20; ++ep) {
    const World w = generate_world(80 + ep, WorldParams{});
    const Transcript t = run_episode({&nav, &speaker, nullptr, small().d_img}, {&w, sample_start(w, rng), w.goal_node(), derive_seed(1, ep)}, GameConfig{});
    double best = 0.0;
    for (const auto& p : t.visited) best = std::max(best, goal_progress(w, t.start.node, p.node, t.goal));
    CHECK(oracle_stopping(t) == best);
    CHECK(oracle_stopping(t) >= t.final_gp);
  }
}

TEST_CASE("episodes are deterministic given the seed") {
  const auto m = init_models(small(), 4);
  const LearnedNavigator nav(m, DecodeKind::Sample);
  const LearnedSpeaker speaker(m);
  GameConfig g;
  g.language = DecodeKind::Sample;
  const World w = generate_world(6, WorldParams{});
  const EpisodeSpec spec{&w, Pose{2, 1}, w.goal_node(), 123};
  const auto a = transcript_to_jsonl(run_episode({&nav, &speaker, nullptr, small().d_img}, spec, g));
  const auto b = transcript_to_jsonl(run_episode({&nav, &speaker, nullptr, small().d_img}, spec, g));
  CHECK(a == b);
  const EpisodeSpec other{&w, Pose{2, 1}, w.goal_node(), 124};
  CHECK(a != transcript_to_jsonl(run_episode({&nav, &speaker, nullptr, small().d_img}, other, g)));
}

TEST_CASE("transcript JSONL round trip") {
  const TeacherNavigator teacher;
  const ScriptedSpeaker scripted;
  const World w = generate_world(8, WorldParams{});
  Transcript t = run_episode({&teacher, &scripted, nullptr}, {&w, Pose{w.num_nodes() - 1, 3}, w.goal_node(), 4}, GameConfig{});
  t.meta["method"] = "shortest-path";
  const std::string text = transcript_to_jsonl(t);
  const Transcript back = transcript_from_jsonl(text);
  CHECK(back.world_seed == t.world_seed);
  CHECK(back.start == t.start);
  CHECK(back.events.size() == t.events.size());
  CHECK(back.exchanges == t.exchanges);
  CHECK(back.visited == t.visited);
  CHECK(back.meta["method"] == "shortest-path");
  CHECK(transcript_to_jsonl(back) == text);
  // Every line is a standalone JSON object; the first is the header.
  CHECK(text.rfind("{\"kind\":\"header\"", 0) == 0);
  CHECK_THROWS_AS(transcript_from_jsonl("{\"t\":1,\"kind\":\"act\",\"payload\":\"stop\",\"pose\":[0,0],\"gp\":0}\n"), ConfigError);
}

TEST_CASE("guide view follows the shortest path") {
  const World w = generate_world(9, WorldParams{});
  const Pose p{w.num_nodes() - 1, 0};
  const auto path = shortest_path(w, p.node, w.goal_node(), 5);
  const auto view = guide_view(w, p, w.goal_node(), 16);
  REQUIRE(view.size() == path.size());
  NodeId prev = p.node;
  for (std::size_t i = 0; i < path.size(); ++i) {
    int heading = -1;
    for (const auto& nb : w.neighbors(prev)) {
      if (nb.node == path[i]) heading = nb.bucket;
    }
    CHECK(view[i] == observation(w, {path[i], heading}, 16));
    prev = path[i];
  }
  const auto at_goal = guide_view(w, {w.goal_node(), 2}, w.goal_node(), 16);
  REQUIRE(at_goal.size() == 1);
  CHECK(at_goal[0] == observation(w, {w.goal_node(), 2}, 16));
}

TEST_CASE("question-first variant asks before moving") {
  const TeacherNavigator teacher;
  const ScriptedSpeaker scripted;
  const World w = generate_world(10, WorldParams{});
  GameConfig g;
  g.question_first = true;
  const Transcript t = run_episode({&teacher, &scripted, nullptr}, {&w, Pose{w.num_nodes() - 1, 0}, w.goal_node(), 1}, g);
  REQUIRE_FALSE(t.events.empty());
  CHECK(t.events[0].kind == EventKind::Question);
  CHECK(t.events[0].t == 0);
  check_protocol(t, g);
}
