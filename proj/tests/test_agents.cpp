#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "rmmnav/agents.hpp"
#include "rmmnav/gameplay.hpp"
#include "rmmnav/training.hpp"

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

World test_world(std::uint64_t seed = 11) { return generate_world(seed, WorldParams{}); }

}  // namespace

TEST_CASE("model config: defaults, paper scale and strict JSON") {
  const auto p = ModelConfig::paper_scale();
  CHECK(p.hidden == 512);
  CHECK(p.word_embed == 256);
  CHECK(p.d_img == 512);
  const auto c = small();
  CHECK(model_config_from_json(model_config_to_json(c)) == c);
  auto j = model_config_to_json(c);
  j["hiden"] = 3;
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
  ModelConfig odd = c;
  odd.hidden = 15;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("init_models is deterministic and seeds differ") {
  const auto a = init_models(small(), 5);
  const auto b = init_models(small(), 5);
  const auto c = init_models(small(), 6);
  CHECK(a.params.identical(b.params));
  CHECK_FALSE(a.params.identical(c.params));
  CHECK(a.params.contains("nav/enc/w"));
  CHECK(a.params.contains("critic/l2/w"));
  CHECK(a.params.contains("spk/out/w"));
  CHECK(a.params.get("nav/out/w").cols() == kNumActions);
  CHECK(a.params.get("spk/out/w").cols() == 64);
}

TEST_CASE("save and load models round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "rmmnav_test_models";
  std::filesystem::remove_all(dir);
  const auto m = init_models(small(), 3);
  save_models(dir, m, {{"note", "x"}});
  nlohmann::json extra;
  const auto back = load_models(dir, &extra);
  CHECK(back.config == m.config);
  CHECK(back.params.identical(m.params));
  CHECK(extra["note"] == "x");
  std::filesystem::remove_all(dir);
}

TEST_CASE("decode_actions respects max_steps and follows the world") {
  const auto m = init_models(small(), 1);
  const auto w = test_world();
  const std::vector<TokenId> ctx_tokens{target_token(w)};
  const auto ctx = encode_context(m, ctx_tokens);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int max_steps = 1 + static_cast<int>(rng.below(10));
    const Pose start{static_cast<NodeId>(rng.below(w.num_nodes())), static_cast<int>(rng.below(4))};
    const auto r = decode_actions(m, ctx, w, start, kStartAction, {DecodeKind::Sample, &rng}, max_steps);
    REQUIRE(static_cast<int>(r.actions.size()) <= max_steps);
    REQUIRE(r.poses.size() == r.actions.size());
    REQUIRE(r.logits.size() == r.actions.size());
    Pose p = start;
    for (std::size_t i = 0; i < r.actions.size(); ++i) {
      CHECK(r.poses[i] == p);
      p = step(w, p, r.actions[i]);
    }
    CHECK(r.end == p);
    CHECK(r.stopped == (!r.actions.empty() && r.actions.back() == Action::Stop));
  }
}

TEST_CASE("replay_actions reproduces the log-probs of a decode") {
  const auto m = init_models(small(), 2);
  const auto w = test_world();
  const std::vector<TokenId> toks{target_token(w), Vocabulary::kNavTag, 20, 21};
  const auto ctx = encode_context(m, toks);
  Rng rng(9);
  const Pose start{0, 1};
  const auto r = decode_actions(m, ctx, w, start, kStartAction, {DecodeKind::Sample, &rng}, 8);
  const auto again = replay_actions(m, ctx, w, start, kStartAction, r.actions);
  REQUIRE(again.actions == r.actions);
  for (std::size_t i = 0; i < r.logprobs.size(); ++i) CHECK(again.logprobs[i] == doctest::Approx(r.logprobs[i]).epsilon(1e-6));
  CHECK(again.end == r.end);
}

TEST_CASE("speaker generation is deterministic and well formed") {
  const auto m = init_models(small(), 3);
  const auto w = test_world();
  const auto in = question_input(w, Pose{1, 0}, target_token(w), m.config.d_img);
  const auto a = generate_utterance(m, in, {});
  const auto b = generate_utterance(m, in, {});
  CHECK(a.utterance == b.utterance);
  CHECK(a.logprobs == b.logprobs);
  Rng r1(5), r2(5);
  CHECK(generate_utterance(m, in, {DecodeKind::Sample, 0.6, &r1}).utterance ==
        generate_utterance(m, in, {DecodeKind::Sample, 0.6, &r2}).utterance);
  Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    const auto g = generate_utterance(m, in, {DecodeKind::Sample, 1.0, &rng});
    const auto& t = g.utterance.tokens;
    CHECK(static_cast<int>(t.size()) <= m.config.l_gen);
    CHECK(g.logprobs.size() == t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      const bool eos = t[k] == Vocabulary::kEos;
      CHECK((!eos || k + 1 == t.size()));
      CHECK((eos || t[k] >= Vocabulary::kNumReserved));
    }
  }
}

TEST_CASE("score_utterance agrees with generation log-probs") {
  const auto m = init_models(small(), 4);
  const auto w = test_world();
  const auto in = question_input(w, Pose{2, 3}, target_token(w), m.config.d_img);
  const auto g = generate_utterance(m, in, {});
  const auto s = score_utterance(m, in, g.utterance.tokens);
  REQUIRE(s.cols() == static_cast<int>(g.logprobs.size()));
  for (std::size_t i = 0; i < g.logprobs.size(); ++i) CHECK(s.at(0, static_cast<int>(i)) == doctest::Approx(g.logprobs[i]).epsilon(1e-5));
}

TEST_CASE("scripted policies") {
  const auto w = test_world();
  TeacherNavigator teacher;
  StationaryNavigator stay;
  Rng rng(1);
  const std::vector<TokenId> none;
  const Pose start{w.num_nodes() - 1, 0};
  const auto goal = w.goal_node();
  Pose p = start;
  for (int burst = 0; burst < 40; ++burst) {
    const auto r = teacher.burst({&w, p, goal, none, kStartAction, 4}, rng);
    p = r.end;
    if (r.stopped) break;
  }
  CHECK(p.node == goal);
  const auto s = stay.burst({&w, start, goal, none, kStartAction, 4}, rng);
  CHECK(s.actions == std::vector<Action>{Action::Stop});
  CHECK(s.end == start);

  ScriptedSpeaker spk;
  const auto q = spk.ask(w, start, target_token(w), {});
  CHECK(q.utterance == script_question(w, start));
  const auto gi = make_guide_input(w, start, goal, kDefaultImageDim);
  CHECK(spk.answer(gi, target_token(w), q.utterance, {}).utterance == script_answer(w, start.node, gi.path5));
}

TEST_CASE("pretraining makes the speaker role-conditioned") {
  std::vector<World> worlds;
  for (int i = 0; i < 3; ++i) worlds.push_back(generate_world(200 + i, WorldParams{}));
  CorpusParams cp;
  cp.episodes_per_world = 2;
  const auto corpus = generate_corpus(worlds, cp);
  auto m = init_models(small(), 7);
  TrainConfig tc;
  tc.lr_nav = tc.lr_spk = 5e-3;
  tc.dropout = 0.0f;
  tc.iters_pretrain = 60;
  tc.batch_pretrain = 8;
  pretrain(m, corpus, worlds, tc);
  const auto& w = worlds[0];
  const Pose pose{3, 1};
  const auto qin = question_input(w, pose, target_token(w), m.config.d_img);
  const auto q = script_question(w, pose);
  const auto ain = answer_input(make_guide_input(w, pose, w.goal_node(), m.config.d_img), target_token(w), q);
  const auto pq = first_token_distribution(m, qin);
  const auto pa = first_token_distribution(m, ain);
  REQUIRE(pq.size() == pa.size());
  double tv = 0.0;
  for (std::size_t i = 0; i < pq.size(); ++i) tv += std::abs(pq[i] - pa[i]);
  tv *= 0.5;
  CHECK(tv > 0.01);
}
