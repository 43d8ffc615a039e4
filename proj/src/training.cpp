#include "rmmnav/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace rmmnav {

void TrainConfig::validate() const {
  if (!(lr_nav > 0.0) || !(lr_spk > 0.0)) throw ConfigError("train learning rates must be > 0");
  if (wd_nav < 0.0) throw ConfigError("train.wd_nav must be >= 0");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("train.dropout must be in [0,1)");
  if (batch_pretrain < 1 || batch_selfplay < 1) throw ConfigError("train batch sizes must be >= 1");
  if (iters_pretrain < 0 || iters_selfplay < 0) throw ConfigError("train iteration counts must be >= 0");
  if (td_k < 1) throw ConfigError("train.k must be >= 1");
  if (lr_selfplay < 0.0) throw ConfigError("train.lr_selfplay must be >= 0");
  if (!(lambda_da >= 0.0 && lambda_da <= 1.0)) throw ConfigError("train.lambda_da must be in [0,1]");
  if (ce_weight < 0.0 || rl_weight < 0.0) throw ConfigError("train loss weights must be >= 0");
}

double step_reward(const World& world, const Pose& from, const Pose& to, NodeId goal) {
  return world.distance(from.node, goal) - world.distance(to.node, goal);
}

RolloutRecord make_record(const World& world, NodeId goal, std::span<const Rollout> bursts, bool with_teacher) {
  RolloutRecord r;
  for (const auto& b : bursts) {
    for (std::size_t i = 0; i < b.actions.size(); ++i) {
      StepRecord s;
      if (i < b.logits.size()) s.logits = b.logits[i];
      if (i < b.values.size()) s.value = b.values[i];
      s.action = b.actions[i];
      s.reward = step_reward(world, b.poses[i], step(world, b.poses[i], b.actions[i]), goal);
      if (with_teacher) s.teacher = teacher_action(world, b.poses[i], goal);
      r.goal_progress += s.reward;
      r.steps.push_back(std::move(s));
    }
  }
  return r;
}

Tensor ce_loss(const RolloutRecord& r) {
  if (r.steps.empty()) throw PreconditionError("ce_loss: empty record");
  std::vector<Tensor> terms;
  for (const auto& s : r.steps) {
    if (!s.teacher) throw PreconditionError("ce_loss: missing teacher target");
    terms.push_back(cross_entropy(s.logits, static_cast<int>(*s.teacher)));
  }
  return sum(concat(std::span<const Tensor>(terms)));
}

A2CTerms a2c_loss(const RolloutRecord& r, int k) {
  if (k < 1) throw PreconditionError("a2c_loss: k must be >= 1");
  const int T = static_cast<int>(r.steps.size());
  if (T == 0) throw PreconditionError("a2c_loss: empty record");
  for (const auto& s : r.steps) {
    if (!s.value.defined() || !s.logits.defined()) throw PreconditionError("a2c_loss: values and logits required");
  }
  std::vector<Tensor> actor, critic;
  for (int t = 0; t < T; ++t) {
    double target = 0.0;
    for (int i = t; i < std::min(T, t + k); ++i) target += r.steps[i].reward;
    target += t + k < T ? static_cast<double>(r.steps[t + k].value.item()) : r.bootstrap;
    const Tensor adv = add_scalar(scale(r.steps[t].value, -1.0f), static_cast<float>(target));
    const int a = static_cast<int>(r.steps[t].action);
    actor.push_back(scale(pick(log_softmax(r.steps[t].logits), a), -adv.item()));
    critic.push_back(scale(mul(adv, adv), 0.5f));
  }
  A2CTerms out;
  out.actor = sum(concat(std::span<const Tensor>(actor)));
  out.critic = sum(concat(std::span<const Tensor>(critic)));
  out.total = add(out.actor, out.critic);
  return out;
}

Tensor navigator_loss(std::span<const RolloutRecord> records, const TrainConfig& cfg, bool rl, NavLossBreakdown* out) {
  if (records.empty()) throw PreconditionError("navigator_loss: no records");
  NavLossBreakdown bd;
  std::vector<Tensor> terms;
  for (const auto& r : records) bd.weight_sum += r.weight;
  if (!(bd.weight_sum > 0.0)) throw PreconditionError("navigator_loss: weights sum to zero");
  for (const auto& r : records) {
    if (r.steps.empty()) continue;
    const double w = r.weight / bd.weight_sum;
    const bool has_teacher = std::ranges::all_of(r.steps, [](const StepRecord& s) { return s.teacher.has_value(); });
    if (has_teacher && cfg.ce_weight > 0.0) {
      const Tensor ce = ce_loss(r);
      bd.ce += w * ce.item();
      terms.push_back(scale(ce, static_cast<float>(w * cfg.ce_weight)));
    }
    if (rl && cfg.rl_weight > 0.0) {
      const auto a2c = a2c_loss(r, cfg.td_k);
      bd.actor += w * a2c.actor.item();
      bd.critic += w * a2c.critic.item();
      terms.push_back(scale(a2c.total, static_cast<float>(w * cfg.rl_weight)));
    }
  }
  if (terms.empty()) throw PreconditionError("navigator_loss: nothing to optimize");
  Tensor loss = sum(concat(std::span<const Tensor>(terms)));
  bd.total = loss.item();
  if (out != nullptr) *out = bd;
  return loss;
}

NavLossBreakdown navigator_update(Models& models, Tape& tape, std::span<const RolloutRecord> records,
                                  const TrainConfig& cfg, bool rl, const Tensor* extra) {
  NavLossBreakdown bd;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = navigator_loss(records, cfg, rl, &bd);
    if (extra != nullptr) loss = add(loss, *extra);
  }
  bd.total = loss.item();
  tape.backward(loss);
  static const std::vector<std::string> kPrefixes{"nav/", "critic/"};
  adam_step(models.params, {cfg.lr_nav, cfg.wd_nav}, kPrefixes);
  models.params.zero_grad();
  return bd;
}

Tensor speaker_loss(std::span<const SpeakerItem> items, bool rl, SpkLossBreakdown* out) {
  SpkLossBreakdown bd;
  double wsum = 0.0;
  for (const auto& it : items) {
    if (it.is_target || rl) wsum += it.weight;
  }
  if (items.empty() || !(wsum > 0.0)) throw PreconditionError("speaker_loss: no items");
  std::vector<Tensor> terms;
  for (const auto& it : items) {
    const double w = it.weight / wsum;
    if (it.is_target) {
      bd.ce += -w * it.logprob.item();
      terms.push_back(scale(it.logprob, static_cast<float>(-w)));
    } else if (rl) {
      bd.rl += -w * it.advantage * it.logprob.item();
      terms.push_back(scale(it.logprob, static_cast<float>(-w * it.advantage)));
    }
  }
  Tensor loss = sum(concat(std::span<const Tensor>(terms)));
  bd.total = loss.item();
  if (out != nullptr) *out = bd;
  return loss;
}

SpkLossBreakdown speaker_update(Models& models, Tape& tape, std::span<const SpeakerItem> items, const TrainConfig& cfg) {
  SpkLossBreakdown bd;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = speaker_loss(items, cfg.speaker_rl, &bd);
  }
  tape.backward(loss);
  static const std::vector<std::string> kPrefixes{"spk/"};
  rmsprop_step(models.params, {cfg.lr_spk, 0.99, 1e-8}, kPrefixes);
  models.params.zero_grad();
  return bd;
}

nlohmann::ordered_json iter_log_json(const IterLog& l) {
  nlohmann::ordered_json j;
  j["iter"] = l.iter;
  j["loss_ce"] = l.loss_ce;
  j["loss_actor"] = l.loss_actor;
  j["loss_critic"] = l.loss_critic;
  j["loss_spk"] = l.loss_spk;
  j["mean_goal_progress"] = l.mean_goal_progress;
  return j;
}

WorldSet::WorldSet(std::span<const World> worlds) : worlds_(worlds) {}

const World& WorldSet::at(std::uint64_t seed) const {
  for (const auto& w : worlds_) {
    if (w.seed() == seed) return w;
  }
  throw MissingArtifact("no world with seed " + std::to_string(seed));
}

namespace {

// Previous-action input for each corpus record (last action of the burst before it).
std::vector<int> corpus_prev_actions(std::span<const CorpusRecord> corpus) {
  std::vector<int> prev(corpus.size(), kStartAction);
  for (const auto& ep : group_episodes(corpus)) {
    for (std::size_t i = 1; i < ep.bursts.size(); ++i) {
      const auto& before = ep.bursts[i - 1]->nav_actions;
      if (!before.empty()) prev[ep.bursts[i] - corpus.data()] = static_cast<int>(before.back());
    }
  }
  return prev;
}

// Student-sampled navigator record for one corpus burst.
RolloutRecord student_record(const Models& m, const World& world, const CorpusRecord& rec, int prev_action, Rng& rng,
                             const DropoutCtl& drop) {
  const NavContext ctx = encode_context(m, rec.context_tokens, drop);
  const int steps = std::max<int>(1, static_cast<int>(rec.nav_actions.size()));
  const Rollout r = decode_actions(m, ctx, world, rec.burst_start, prev_action, {DecodeKind::Sample, &rng}, steps, drop);
  const std::vector<Rollout> one{r};
  return make_record(world, rec.goal, one);
}

// CE items on the scripted exchange asked before a corpus burst.
void scripted_speaker_items(const Models& m, const World& world, const Pose& pose, NodeId goal, const Utterance& q,
                            const Utterance& a, double weight, const DropoutCtl& drop, std::vector<SpeakerItem>& out) {
  const TokenId target = target_token(world);
  const auto qin = question_input(world, pose, target, m.config.d_img);
  out.push_back({sum(score_utterance(m, qin, q.tokens, drop)), true, 0.0, weight});
  const auto ain = answer_input(make_guide_input(world, pose, goal, m.config.d_img), target, q);
  out.push_back({sum(score_utterance(m, ain, a.tokens, drop)), true, 0.0, weight});
}

Utterance as_utterance(Role role, const std::vector<TokenId>& tokens) { return {role, tokens}; }

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

void pretrain(Models& models, std::span<const CorpusRecord> corpus, std::span<const World> worlds,
              const TrainConfig& cfg, const LogSink& log) {
  cfg.validate();
  if (corpus.empty()) throw PreconditionError("pretrain: empty corpus");
  const WorldSet ws(worlds);
  const auto prev = corpus_prev_actions(corpus);
  Rng rng(derive_seed(cfg.seed, 11));
  Rng drop_rng(derive_seed(cfg.seed, 12));
  const DropoutCtl drop{static_cast<float>(cfg.dropout), &drop_rng, true};
  for (int it = 0; it < cfg.iters_pretrain; ++it) {
    Tape tape;
    std::vector<RolloutRecord> records;
    std::vector<SpeakerItem> items;
    std::vector<double> gps;
    {
      TapeScope scope(tape);
      for (int b = 0; b < cfg.batch_pretrain; ++b) {
        const std::size_t idx = rng.below(corpus.size());
        const CorpusRecord& rec = corpus[idx];
        const World& world = ws.at(rec.world_seed);
        records.push_back(student_record(models, world, rec, prev[idx], rng, drop));
        gps.push_back(records.back().goal_progress);
        if (rec.exchange_index > 0) {
          scripted_speaker_items(models, world, rec.burst_start, rec.goal, as_utterance(Role::Question, rec.question_tokens),
                                 as_utterance(Role::Answer, rec.answer_tokens), 1.0, drop, items);
        }
      }
    }
    IterLog l;
    l.iter = it;
    const auto nav = navigator_update(models, tape, records, cfg, false);
    l.loss_ce = nav.ce;
    if (!items.empty()) l.loss_spk = speaker_update(models, tape, items, cfg).total;
    l.mean_goal_progress = mean_of(gps);
    if (log) log(l);
  }
}

std::string_view method_name(SelfPlayMethod m) {
  switch (m) {
    case SelfPlayMethod::Baseline: return "baseline";
    case SelfPlayMethod::DataAugmentation: return "da";
    case SelfPlayMethod::Rmm: return "rmm";
  }
  return "?";
}

SelfPlayMethod method_from_name(std::string_view name) {
  if (name == "baseline") return SelfPlayMethod::Baseline;
  if (name == "da") return SelfPlayMethod::DataAugmentation;
  if (name == "rmm") return SelfPlayMethod::Rmm;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

SelfPlayStats self_play(Models& models, std::span<const World> worlds, std::span<const CorpusRecord> corpus,
                        const TrainConfig& train_cfg, const SelfPlayOptions& opts, const LogSink& log) {
  train_cfg.validate();
  opts.game.validate();
  if (worlds.empty()) throw PreconditionError("self_play: no training worlds");
  TrainConfig cfg = train_cfg;
  if (cfg.lr_selfplay > 0.0) cfg.lr_nav = cfg.lr_spk = cfg.lr_selfplay;
  SelfPlayStats stats;
  std::vector<Utterance> spoken;
  std::vector<double> all_gp;
  if (opts.method == SelfPlayMethod::DataAugmentation) {
    const DaStats da = data_augmentation_round(models, worlds, corpus, cfg, opts.game);
    spoken = da.instructions;
  }

  RmmConfig rmm = opts.rmm;
  rmm.mode = RmmMode::TrainDistance;
  const bool use_rmm = opts.method == SelfPlayMethod::Rmm;
  if (use_rmm) rmm.validate();
  Rng rng(derive_seed(cfg.seed, 21));
  Rng drop_rng(derive_seed(cfg.seed, 22));
  const DropoutCtl drop{static_cast<float>(cfg.dropout), &drop_rng, true};
  const ScriptedSpeaker scripted;

  for (int it = 0; it < cfg.iters_selfplay; ++it) {
    // Frozen copy plays the speaker and the mental navigator for this batch.
    Models snapshot{models.config, models.params.clone()};
    const LearnedSpeaker speaker(snapshot);
    const LearnedNavigator mental(snapshot, DecodeKind::Argmax);
    const LearnedNavigator navigator(models, DecodeKind::Sample, drop);
    const Players players{&navigator, &speaker, &mental, models.config.d_img};

    Tape tape;
    std::vector<RolloutRecord> records;
    std::vector<SpeakerItem> items;
    std::vector<Tensor> branch_terms;
    std::vector<double> gps;
    {
      TapeScope scope(tape);
      for (int b = 0; b < cfg.batch_selfplay; ++b) {
        const World& world = worlds[rng.below(worlds.size())];
        const Pose start = sample_start(world, rng);
        const EpisodeSpec spec{&world, start, world.goal_node(), derive_seed(cfg.seed, 23, it * 1000 + b)};
        EpisodeTrace trace;
        const Transcript tr =
            run_episode(players, spec, opts.game, use_rmm ? Selection::Rmm : Selection::Plain, &rmm, &trace);
        gps.push_back(tr.final_gp);
        all_gp.push_back(tr.final_gp);
        if (opts.method != SelfPlayMethod::DataAugmentation) {
          for (const auto& ex : tr.exchanges) {
            spoken.push_back(ex.question);
            spoken.push_back(ex.answer);
          }
        }
        std::vector<Rollout> bursts;
        for (auto& bt : trace.bursts) bursts.push_back(std::move(bt.rollout));
        records.push_back(make_record(world, spec.goal, bursts));
        if (!use_rmm) continue;
        for (const auto& asked : trace.asked) {
          const auto bl = best_branch_losses(models, world, spec.goal, asked.rmm->branches, cfg.td_k);
          branch_terms.push_back(add(bl.ce, add(bl.actor, bl.critic)));
          items.push_back({bl.question_logprob, false, bl.advantage, 1.0});
          items.push_back({bl.answer_logprob, false, bl.advantage, 1.0});
          const Utterance q = script_question(world, asked.pose);
          scripted_speaker_items(models, world, asked.pose, spec.goal, q, script_answer(world, asked.pose.node, asked.path5),
                                 1.0, {}, items);
        }
      }
    }
    IterLog l;
    l.iter = it;
    Tensor extra;
    if (!branch_terms.empty()) {
      TapeScope scope(tape);
      extra = scale(sum(concat(std::span<const Tensor>(branch_terms))), 1.0f / static_cast<float>(branch_terms.size()));
    }
    const auto nav = navigator_update(models, tape, records, cfg, true, extra.defined() ? &extra : nullptr);
    l.loss_ce = nav.ce;
    l.loss_actor = nav.actor;
    l.loss_critic = nav.critic;
    if (!items.empty()) l.loss_spk = speaker_update(models, tape, items, cfg).total;
    l.mean_goal_progress = mean_of(gps);
    if (log) log(l);
  }
  stats.generated_utterances = static_cast<int>(spoken.size());
  stats.generated_lexical_types = lexical_types(spoken).types;
  stats.mean_goal_progress = mean_of(all_gp);
  return stats;
}

DaStats data_augmentation_round(Models& models, std::span<const World> worlds, std::span<const CorpusRecord> corpus,
                                const TrainConfig& cfg, const GameConfig& game, const LogSink& log) {
  cfg.validate();
  if (corpus.empty()) throw PreconditionError("data_augmentation_round: empty corpus");
  const WorldSet ws(worlds);
  const auto episodes = group_episodes(corpus);
  const auto prev = corpus_prev_actions(corpus);
  const double lambda = cfg.lambda_da;
  Rng rng(derive_seed(cfg.seed, 31));

  struct Augmented {
    const World* world;
    Pose start;
    NodeId goal;
    std::vector<TokenId> context;
    std::vector<Action> actions;
    SpeakerInput spk_input;
    Utterance instruction;
  };
  std::vector<Augmented> aug;
  DaStats stats;
  {
    NoGradScope no_grad;
    for (const auto& ep : episodes) {
      const CorpusRecord& first = *ep.bursts.front();
      const World& world = ws.at(first.world_seed);
      const TokenId target = target_token(world);
      const std::vector<TokenId> t0{target};
      const NavContext ctx = encode_context(models, t0);
      ++stats.conversations;
      Rollout best;
      double best_gp = -1e300;
      for (int k = 0; k < 3; ++k) {
        const NavDecode mode = k < 2 ? NavDecode{DecodeKind::Sample, &rng} : NavDecode{DecodeKind::Argmax, nullptr};
        Rollout r = decode_actions(models, ctx, world, first.burst_start, kStartAction, mode, game.max_actions);
        ++stats.rollouts;
        const double gp = goal_progress(world, first.burst_start.node, r.end.node, first.goal);
        if (gp > best_gp) {
          best_gp = gp;
          best = std::move(r);
        }
      }
      ++stats.retained;
      SpeakerInput in{Role::Question, {}, t0};
      for (std::size_t i = 0; i < best.poses.size() && i < 5; ++i)
        in.images.push_back(observation(world, best.poses[i], models.config.d_img));
      const Utterance instr = generate_utterance(models, in, {}).utterance;
      std::vector<TokenId> context{target, Vocabulary::kNavTag};
      for (TokenId t : instr.words()) context.push_back(t);
      stats.instructions.push_back(instr);
      aug.push_back({&world, first.burst_start, first.goal, context, best.actions, in, instr});
    }
  }

  Rng drop_rng(derive_seed(cfg.seed, 32));
  const DropoutCtl drop{static_cast<float>(cfg.dropout), &drop_rng, true};
  const int B = cfg.batch_pretrain;
  for (std::size_t begin = 0, it = 0; begin < aug.size(); begin += B, ++it) {
    const std::size_t end = std::min(aug.size(), begin + B);
    const double n_aug = static_cast<double>(end - begin);
    Tape tape;
    std::vector<RolloutRecord> records;
    std::vector<SpeakerItem> items;
    {
      TapeScope scope(tape);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& a = aug[i];
        const NavContext ctx = encode_context(models, a.context, drop);
        const Rollout r = replay_actions(models, ctx, *a.world, a.start, kStartAction, a.actions, drop);
        const std::vector<Rollout> one{r};
        RolloutRecord rec = make_record(*a.world, a.goal, one, false);
        for (std::size_t s = 0; s < rec.steps.size(); ++s) rec.steps[s].teacher = a.actions[s];
        rec.weight = lambda / n_aug;
        records.push_back(std::move(rec));
        if (cfg.da_speaker)
          items.push_back({sum(score_utterance(models, a.spk_input, a.instruction.tokens, drop)), true, 0.0, lambda / n_aug});
      }
      for (int b = 0; b < B; ++b) {
        const std::size_t idx = rng.below(corpus.size());
        const CorpusRecord& rec = corpus[idx];
        const World& world = ws.at(rec.world_seed);
        RolloutRecord human = student_record(models, world, rec, prev[idx], rng, drop);
        human.weight = (1.0 - lambda) / B;
        records.push_back(std::move(human));
        if (cfg.da_speaker && rec.exchange_index > 0)
          scripted_speaker_items(models, world, rec.burst_start, rec.goal, as_utterance(Role::Question, rec.question_tokens),
                                 as_utterance(Role::Answer, rec.answer_tokens), (1.0 - lambda) / B / 2.0, drop, items);
      }
    }
    if (it == 0) {
      double wa = 0.0, wh = 0.0, la = 0.0, lh = 0.0;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].steps.empty()) continue;
        const double loss = ce_loss(records[i]).item();
        if (i < end - begin) {
          wa += records[i].weight;
          la += loss / n_aug;
        } else {
          wh += records[i].weight;
          lh += loss / B;
        }
      }
      stats.aug_weight = wa / (wa + wh);
      stats.human_weight = wh / (wa + wh);
      stats.aug_loss = la;
      stats.human_loss = lh;
    }
    IterLog l;
    l.iter = static_cast<int>(it);
    // Records that are all weight zero (lambda = 0 or 1) drop out of the loss entirely.
    std::vector<RolloutRecord> kept;
    for (auto& r : records) {
      if (r.weight > 0.0 && !r.steps.empty()) kept.push_back(std::move(r));
    }
    if (cfg.da_navigator && !kept.empty()) l.loss_ce = navigator_update(models, tape, kept, cfg, false).ce;
    std::vector<SpeakerItem> kept_items;
    for (auto& item : items) {
      if (item.weight > 0.0) kept_items.push_back(std::move(item));
    }
    if (!kept_items.empty()) l.loss_spk = speaker_update(models, tape, kept_items, cfg).total;
    if (log) log(l);
  }
  return stats;
}

}  // namespace rmmnav
