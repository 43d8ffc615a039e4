#include "rmmnav/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace rmmnav {

std::string_view split_name(Split s) { return s == Split::Seen ? "seen" : "unseen"; }

Split split_from_name(std::string_view name) {
  if (name == "seen") return Split::Seen;
  if (name == "unseen") return Split::Unseen;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::string_view eval_policy_name(EvalPolicy p) {
  switch (p) {
    case EvalPolicy::Learned: return "learned";
    case EvalPolicy::Rmm: return "rmm";
    case EvalPolicy::ShortestPath: return "shortest-path";
    case EvalPolicy::Stationary: return "stationary";
  }
  return "?";
}

void EvalConfig::validate() const {
  if (episodes_per_world < 1) throw ConfigError("eval.episodes_per_world must be >= 1");
  if (modes.empty()) throw ConfigError("eval.modes must not be empty");
}

const ModeReport& EvalReport::mode(ContextMode m) const {
  for (const auto& r : modes) {
    if (r.mode == m) return r;
  }
  throw PreconditionError("report has no mode '" + std::string(context_mode_name(m)) + "'");
}

nlohmann::ordered_json eval_report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["split"] = split_name(r.split);
  j["seed"] = r.seed;
  j["world_seeds"] = r.world_seeds;
  j["modes"] = nlohmann::ordered_json::object();
  for (const auto& m : r.modes) {
    nlohmann::ordered_json o;
    o["episodes"] = m.episodes;
    o["goal_progress"] = m.goal_progress;
    o["goal_progress_se"] = m.goal_progress_se;
    o["oracle_stopping"] = m.oracle_stopping;
    o["initial_distance"] = m.initial_distance;
    o["bleu_mean"] = m.bleu_mean;
    o["bleu_corpus"] = m.bleu_corpus;
    o["utterances"] = m.utterances;
    o["lexical_types"] = m.lexical_types;
    o["curve"] = m.curve;
    j["modes"][std::string(context_mode_name(m.mode))] = std::move(o);
  }
  return j;
}

namespace {

const World& world_of(std::span<const World> worlds, std::uint64_t seed) {
  for (const auto& w : worlds) {
    if (w.seed() == seed) return w;
  }
  throw MissingArtifact("no world with seed " + std::to_string(seed));
}

// Progress at each question event, in order.
std::vector<double> question_progress(const Transcript& t) {
  std::vector<double> out;
  for (const auto& e : t.events) {
    if (e.kind == EventKind::Question) out.push_back(e.gp);
  }
  return out;
}

}  // namespace

std::vector<double> progress_curve(std::span<const Transcript> transcripts, std::span<const World> worlds,
                                   int max_exchanges) {
  std::vector<double> curve(std::max(0, max_exchanges), 0.0);
  int counted = 0;
  for (const auto& t : transcripts) {
    const World& w = world_of(worlds, t.world_seed);
    const double d0 = w.distance(t.start.node, t.goal);
    if (!(d0 > 0.0)) continue;  // started at the goal: nothing to normalize
    ++counted;
    const auto qp = question_progress(t);
    for (int k = 0; k < max_exchanges; ++k) {
      const double gp = k < static_cast<int>(qp.size()) ? qp[k] : t.final_gp;
      curve[k] += gp / d0;
    }
  }
  if (counted > 0) {
    for (auto& v : curve) v /= counted;
  }
  return curve;
}

std::vector<Exchange> scripted_references(const World& world, const Transcript& t) {
  std::vector<Exchange> out;
  for (const auto& e : t.events) {
    if (e.kind != EventKind::Question) continue;
    const auto path5 = shortest_path(world, e.pose.node, t.goal, 5);
    out.push_back({script_question(world, e.pose), script_answer(world, e.pose.node, path5)});
  }
  return out;
}

ModeReport aggregate(std::span<const Transcript> transcripts, std::span<const World> worlds, ContextMode mode,
                     int max_exchanges) {
  if (transcripts.empty()) throw PreconditionError("aggregate: no transcripts");
  ModeReport r;
  r.mode = mode;
  r.episodes = static_cast<int>(transcripts.size());
  const double n = static_cast<double>(r.episodes);
  std::vector<Utterance> generated;
  std::vector<TokenId> cand_all, ref_all;
  double bleu_sum = 0.0;
  for (const auto& t : transcripts) {
    const World& w = world_of(worlds, t.world_seed);
    r.goal_progress += t.final_gp;
    r.oracle_stopping += oracle_stopping(t);
    r.initial_distance += w.distance(t.start.node, t.goal);
    const auto refs = scripted_references(w, t);
    for (std::size_t i = 0; i < t.exchanges.size() && i < refs.size(); ++i) {
      const std::pair<const Utterance*, const Utterance*> pairs[] = {{&t.exchanges[i].question, &refs[i].question},
                                                                     {&t.exchanges[i].answer, &refs[i].answer}};
      for (const auto& [cand, ref] : pairs) {
        const std::vector<std::vector<TokenId>> one{ref->tokens};
        bleu_sum += bleu(cand->tokens, one);
        const auto cw = cand->words();
        const auto rw = ref->words();
        cand_all.insert(cand_all.end(), cw.begin(), cw.end());
        ref_all.insert(ref_all.end(), rw.begin(), rw.end());
        generated.push_back(*cand);
        ++r.utterances;
      }
    }
  }
  r.goal_progress /= n;
  r.oracle_stopping /= n;
  r.initial_distance /= n;
  if (r.episodes > 1) {
    double ss = 0.0;
    for (const auto& t : transcripts) ss += (t.final_gp - r.goal_progress) * (t.final_gp - r.goal_progress);
    r.goal_progress_se = std::sqrt(ss / (n - 1.0) / n);
  }
  if (r.utterances > 0) {
    r.bleu_mean = bleu_sum / r.utterances;
    const std::vector<std::vector<TokenId>> one{ref_all};
    r.bleu_corpus = bleu(cand_all, one);
  }
  r.lexical_types = lexical_types(generated).types;
  r.curve = progress_curve(transcripts, worlds, max_exchanges);
  return r;
}

Transcript eval_episode(const EvalAgents& agents, const World& world, ContextMode mode, const GameConfig& game,
                        std::uint64_t episode_seed, const Pose& start) {
  const bool learned = agents.policy == EvalPolicy::Learned || agents.policy == EvalPolicy::Rmm;
  if (learned && agents.models == nullptr) throw PreconditionError("evaluate: learned policy needs models");
  TeacherNavigator teacher;
  StationaryNavigator stationary;
  ScriptedSpeaker scripted;
  std::unique_ptr<LearnedNavigator> nav;
  std::unique_ptr<LearnedSpeaker> spk;
  Players players;
  if (learned) {
    nav = std::make_unique<LearnedNavigator>(*agents.models, DecodeKind::Argmax);
    spk = std::make_unique<LearnedSpeaker>(*agents.models);
    players = {nav.get(), spk.get(), nav.get(), agents.models->config.d_img};
  } else if (agents.policy == EvalPolicy::ShortestPath) {
    players = {&teacher, &scripted, nullptr, kDefaultImageDim};
  } else {
    players = {&stationary, &scripted, nullptr, kDefaultImageDim};
  }
  RmmConfig rmm = agents.rmm;
  rmm.mode = RmmMode::InferConfidence;
  const Selection selection = agents.policy == EvalPolicy::Rmm ? Selection::Rmm : Selection::Plain;
  GameConfig g = game;
  g.context = mode;
  NoGradScope no_grad;
  return run_episode(players, {&world, start, world.goal_node(), episode_seed}, g, selection, &rmm);
}

EvalRun evaluate(const EvalAgents& agents, std::span<const World> worlds, Split split,
                 std::span<const std::uint64_t> training_seeds, const EvalConfig& config, const GameConfig& game,
                 std::uint64_t seed) {
  config.validate();
  game.validate();
  if (worlds.empty()) throw PreconditionError("evaluate: empty split");
  const std::set<std::uint64_t> train(training_seeds.begin(), training_seeds.end());
  if (split == Split::Unseen) {
    for (const auto& w : worlds) {
      if (train.count(w.seed())) throw ConfigError("unseen split shares world seed " + std::to_string(w.seed()) +
                                                   " with the training set");
    }
  }
  EvalRun run;
  run.report.method = agents.name.empty() ? std::string(eval_policy_name(agents.policy)) : agents.name;
  run.report.split = split;
  run.report.seed = seed;
  for (const auto& w : worlds) run.report.world_seeds.push_back(w.seed());

  for (ContextMode mode : config.modes) {
    std::vector<Transcript> ts;
    for (const auto& w : worlds) {
      for (int e = 0; e < config.episodes_per_world; ++e) {
        const std::uint64_t ep_seed = derive_seed(seed, w.seed(), e);
        Rng start_rng(derive_seed(ep_seed, 0));
        Transcript t = eval_episode(agents, w, mode, game, ep_seed, sample_start(w, start_rng));
        t.meta["method"] = run.report.method;
        t.meta["split"] = split_name(split);
        t.meta["mode"] = context_mode_name(mode);
        t.meta["episode"] = e;
        ts.push_back(std::move(t));
      }
    }
    run.report.modes.push_back(aggregate(ts, worlds, mode, game.max_exchanges));
    run.transcripts.push_back(std::move(ts));
  }
  return run;
}

}  // namespace rmmnav
