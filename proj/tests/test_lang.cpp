#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "rmmnav/lang.hpp"

using namespace rmmnav;

namespace {

const Vocabulary& V() { return Vocabulary::standard(); }

Utterance utt(Role r, const std::string& text) {
  Utterance u{r, V().encode(text)};
  u.tokens.push_back(Vocabulary::kEos);
  return u;
}

}  // namespace

TEST_CASE("standard vocabulary") {
  CHECK(V().size() == 64);
  CHECK(V().word(Vocabulary::kNavTag) == "<nav>");
  CHECK(V().word(Vocabulary::kOraTag) == "<ora>");
  CHECK(V().id("kitchen") != Vocabulary::kUnk);
  CHECK(V().id("zebra") == Vocabulary::kUnk);
  for (int i = 0; i < V().size(); ++i) CHECK(V().id(V().word(i)) == i);
  CHECK(V().decode(V().encode("go east to the kitchen")) == "go east to the kitchen");
  CHECK_THROWS_AS(Vocabulary({"a", "b"}), ConfigError);
}

TEST_CASE("build_context modes") {
  DialogueHistory h{V().id("plant"), {}};
  for (auto mode : {ContextMode::TargetOnly, ContextMode::LastExchange, ContextMode::FullHistory})
    CHECK(build_context(h, mode) == std::vector<TokenId>{V().id("plant")});

  h.exchanges.push_back({utt(Role::Question, "should i go east ?"), utt(Role::Answer, "go east to the kitchen")});
  const auto last = build_context(h, ContextMode::LastExchange);
  CHECK(last == build_context(h, ContextMode::FullHistory));
  CHECK(last.front() == V().id("plant"));
  CHECK(last[1] == Vocabulary::kNavTag);
  CHECK(std::ranges::count(last, Vocabulary::kEos) == 0);
  CHECK(build_context(h, ContextMode::TargetOnly).size() == 1);

  h.exchanges.push_back({utt(Role::Question, "should i go north ?"), utt(Role::Answer, "go north to the office")});
  const auto full = build_context(h, ContextMode::FullHistory);
  const auto last2 = build_context(h, ContextMode::LastExchange);
  CHECK(full.size() == 1 + 2 * (1 + 5 + 1 + 5));
  CHECK(last2.size() == 1 + 1 + 5 + 1 + 5);
  CHECK(std::equal(last2.begin() + 1, last2.end(), full.end() - (last2.size() - 1)));
}

TEST_CASE("build_context truncates oldest first to the history cap") {
  // 30 exchanges whose utterances carry 8 tokens each.
  DialogueHistory h{V().id("lamp"), {}};
  for (int i = 0; i < 30; ++i) {
    const std::string dir = i % 2 ? "north" : "west";
    h.exchanges.push_back({utt(Role::Question, "should i go " + dir + " or east ? ."),
                           utt(Role::Answer, "go " + dir + " to the kitchen then south .")});
  }
  REQUIRE(h.exchanges[0].question.words().size() == 8);
  REQUIRE(h.exchanges[0].answer.words().size() == 8);
  const auto ctx = build_context(h, ContextMode::FullHistory);
  CHECK(ctx.size() == 160);
  CHECK(ctx.front() == V().id("lamp"));
  CHECK(ctx[1] == Vocabulary::kNavTag);  // partial unit keeps its tag
  // newest exchange is intact at the tail
  const auto& a = h.exchanges.back().answer.words();
  CHECK(std::equal(a.begin(), a.end(), ctx.end() - a.size()));
  CHECK(*(ctx.end() - a.size() - 1) == Vocabulary::kOraTag);
}

TEST_CASE("truncation keeps t_O and tags at every cap") {
  DialogueHistory h{V().id("sofa"), {}};
  for (int i = 0; i < 6; ++i)
    h.exchanges.push_back({utt(Role::Question, "should i go east or west ?"), utt(Role::Answer, "go east to the attic")});
  for (int cap = 1; cap <= 60; ++cap) {
    const auto ctx = build_context(h, ContextMode::FullHistory, cap);
    CHECK(static_cast<int>(ctx.size()) <= cap);
    CHECK(ctx.front() == V().id("sofa"));
    if (ctx.size() > 1) CHECK((ctx[1] == Vocabulary::kNavTag || ctx[1] == Vocabulary::kOraTag));
  }
}

TEST_CASE("bleu edge cases") {
  const auto ref = V().encode("go east to the kitchen then north");
  std::vector<std::vector<TokenId>> refs{ref};
  CHECK(bleu(ref, refs) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bleu(V().encode("you are in goal room"), refs) <= 1e-6);
  CHECK(bleu(std::vector<TokenId>{}, refs) == 0.0);
  CHECK_THROWS_AS(bleu(ref, std::span<const std::vector<TokenId>>{}), PreconditionError);
}

TEST_CASE("bleu matches the hand-tallied example") {
  // "a b c d e" vs "a b c d f": precisions 4/5, 3/4, 2/3, 1/2 and no brevity penalty.
  std::vector<std::vector<TokenId>> refs{{10, 11, 12, 13, 15}};
  const std::vector<TokenId> cand{10, 11, 12, 13, 14};
  const double expected = std::pow(4.0 / 5 * 3.0 / 4 * 2.0 / 3 * 1.0 / 2, 0.25);
  CHECK(std::abs(bleu(cand, refs) - expected) < 1e-12);
}

TEST_CASE("bleu agrees with the string oracle and is invariant under vocabulary permutation") {
  Rng rng(17);
  std::vector<TokenId> perm(V().size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = V().size() - 1; i > Vocabulary::kNumReserved; --i)
    std::swap(perm[i], perm[Vocabulary::kNumReserved + rng.below(i - Vocabulary::kNumReserved + 1)]);
  for (int trial = 0; trial < 200; ++trial) {
    auto sample = [&](int len) {
      std::vector<TokenId> s;
      for (int i = 0; i < len; ++i) s.push_back(Vocabulary::kNumReserved + static_cast<int>(rng.below(8)));
      return s;
    };
    const auto cand = sample(1 + static_cast<int>(rng.below(9)));
    std::vector<std::vector<TokenId>> refs{sample(1 + static_cast<int>(rng.below(9))), sample(1 + static_cast<int>(rng.below(9)))};
    auto words = [&](const std::vector<TokenId>& t) {
      std::vector<std::string> w;
      for (TokenId x : t) w.push_back(V().word(x));
      return w;
    };
    const double got = bleu(cand, refs);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
    CHECK(std::abs(got - oracle::bleu_reference(words(cand), {words(refs[0]), words(refs[1])})) < 1e-9);
    auto permute = [&](std::vector<TokenId> t) {
      for (auto& x : t) x = perm[x];
      return t;
    };
    std::vector<std::vector<TokenId>> prefs{permute(refs[0]), permute(refs[1])};
    CHECK(bleu(permute(cand), prefs) == got);
  }
}

TEST_CASE("bleu reaches 1.0 only on exact match with a single reference") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<TokenId> a, b;
    for (int i = 0; i < 1 + static_cast<int>(rng.below(6)); ++i) a.push_back(6 + static_cast<int>(rng.below(3)));
    for (int i = 0; i < 1 + static_cast<int>(rng.below(6)); ++i) b.push_back(6 + static_cast<int>(rng.below(3)));
    std::vector<std::vector<TokenId>> refs{b};
    const double s = bleu(a, refs);
    CHECK((s == doctest::Approx(1.0).epsilon(1e-12)) == (a == b));
  }
}

TEST_CASE("lexical_types") {
  std::vector<Utterance> none;
  CHECK(lexical_types(none).types == 0);
  std::vector<Utterance> one{utt(Role::Question, "should should i")};
  const auto stats = lexical_types(one);
  CHECK(stats.types == 2);
  CHECK(stats.frequency.at(V().id("should")) == 2);
}

TEST_CASE("scripted answers") {
  // Straight two-step path east from node 0.
  const World w(2, {{0, 0, 0, 0}, {1, 1, 0, 0}, {2, 2, 0, 1}, {3, 2, 1, 1}}, {{0, 1}, {1, 2}, {2, 3}},
                {{0, "hallway"}, {1, "kitchen"}}, "plant", 1, {});
  const auto path = shortest_path(w, 0, 2, 5);
  const auto a = script_answer(w, 0, path);
  CHECK(a.role == Role::Answer);
  CHECK(V().decode(a.tokens).starts_with("go east to the kitchen"));
  CHECK(V().decode(script_answer(w, 2, std::vector<NodeId>{}).tokens).find("goal room") != std::string::npos);
  CHECK(V().decode(script_answer(w, 2, std::vector<NodeId>{}).tokens) == "you are in the goal room");
  CHECK(script_answer(w, 0, path) == a);
  const auto turn = script_answer(w, 0, shortest_path(w, 0, 3, 5));
  CHECK(V().decode(turn.tokens) == "go east to the kitchen then north");
  const auto q = script_question(w, {1, 1});
  CHECK(q.role == Role::Question);
  CHECK(V().decode(q.tokens) == "should i go east or west ?");
  CHECK(V().decode(script_question(w, {2, 0}).tokens) == "i see a plant . should i go north or west ?");
}

TEST_CASE("generate_corpus") {
  std::vector<World> worlds;
  for (std::uint64_t s = 0; s < 10; ++s) worlds.push_back(generate_world(100 + s, {6, 4, 8}));
  CorpusParams clean;
  clean.episodes_per_world = 10;
  clean.noise = 0.0;
  clean.rng_seed = 4;
  const auto corpus = generate_corpus(worlds, clean);
  const auto episodes = group_episodes(corpus);
  CHECK(episodes.size() == 100);

  double questions = 0.0, predicted = 0.0;
  for (const auto& ep : episodes) {
    const auto& first = *ep.bursts.front();
    const World& w = *std::ranges::find_if(worlds, [&](const World& x) { return x.seed() == first.world_seed; });
    Pose p = first.burst_start;
    int moves = 0;
    for (const auto* b : ep.bursts) {
      CHECK(b->burst_start == p);
      CHECK(b->nav_actions == b->teacher_actions);
      for (Action a : b->nav_actions) {
        if (a != Action::Stop) ++moves;
        p = step(w, p, a);
      }
      for (TokenId t : b->context_tokens) CHECK(t < V().size());
      for (TokenId t : b->question_tokens) CHECK(t < V().size());
      for (TokenId t : b->answer_tokens) CHECK(t < V().size());
    }
    CHECK(p.node == w.goal_node());
    CHECK(goal_progress(w, first.burst_start.node, p.node, w.goal_node()) == w.distance(first.burst_start.node, w.goal_node()));
    const int asked = static_cast<int>(ep.bursts.size()) - 1;
    CHECK(asked == moves / 4);
    questions += asked;
    predicted += std::ceil(moves / 4.0);
  }
  CHECK(std::abs(questions - predicted) / episodes.size() <= 1.0);

  CorpusParams noisy = clean;
  noisy.noise = 0.3;
  const auto a = generate_corpus(worlds, noisy);
  const auto b = generate_corpus(worlds, noisy);
  std::string sa, sb;
  for (const auto& r : a) sa += corpus_record_to_json(r).dump() + "\n";
  for (const auto& r : b) sb += corpus_record_to_json(r).dump() + "\n";
  CHECK(sa == sb);
  CHECK(corpus_record_from_json(nlohmann::json::parse(corpus_record_to_json(a[3]).dump())) == a[3]);
  CorpusParams bad = clean;
  bad.noise = 1.5;
  CHECK_THROWS_AS(generate_corpus(worlds, bad), ConfigError);
}
