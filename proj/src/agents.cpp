#include "rmmnav/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rmmnav {

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.hidden = 512;
  c.word_embed = 256;
  c.action_embed = 32;
  c.d_img = 512;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size < Vocabulary::kNumReserved + 1) throw ConfigError("model.vocab_size too small");
  if (hidden < 2 || hidden % 2 != 0) throw ConfigError("model.hidden must be a positive even number");
  if (word_embed < 1 || action_embed < 1 || d_img < 1) throw ConfigError("model dimensions must be positive");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("model.dropout must be in [0,1)");
  if (l_gen < 1) throw ConfigError("model.l_gen must be >= 1");
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["word_embed"] = c.word_embed;
  j["action_embed"] = c.action_embed;
  j["d_img"] = c.d_img;
  j["dropout"] = c.dropout;
  j["l_gen"] = c.l_gen;
  return nlohmann::json::parse(j.dump());
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<int>();
    else if (key == "hidden") c.hidden = value.get<int>();
    else if (key == "word_embed") c.word_embed = value.get<int>();
    else if (key == "action_embed") c.action_embed = value.get<int>();
    else if (key == "d_img") c.d_img = value.get<int>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else if (key == "l_gen") c.l_gen = value.get<int>();
    else throw ConfigError("unknown model key '" + key + "'");
  }
  c.validate();
  return c;
}

namespace {

void add_linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng) {
  s.add_uniform(name + "/w", in, out, 1.0f / std::sqrt(static_cast<float>(in)), rng);
  s.add_zeros(name + "/b", 1, out);
}

}  // namespace

Models init_models(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Models m{c, {}};
  auto& s = m.params;
  const int H = c.hidden, E = c.word_embed;
  Rng nav(derive_seed(seed, 1)), critic(derive_seed(seed, 2)), spk(derive_seed(seed, 3));

  s.add_uniform("nav/word_emb", c.vocab_size, E, 0.1f, nav);
  LstmWeights::init(s, "nav/enc", E, H, nav);
  s.add_uniform("nav/act_emb", kNumActions + 1, c.action_embed, 0.1f, nav);
  LstmWeights::init(s, "nav/dec", c.action_embed + c.d_img, H, nav);
  s.add_uniform("nav/att_q", H, H, 1.0f / std::sqrt(static_cast<float>(H)), nav);
  add_linear(s, "nav/att_c", 2 * H, H, nav);
  add_linear(s, "nav/out", H, kNumActions, nav);

  add_linear(s, "critic/l1", H, H, critic);
  add_linear(s, "critic/l2", H, 1, critic);

  s.add_uniform("spk/word_emb", c.vocab_size, E, 0.1f, spk);
  LstmWeights::init(s, "spk/enc_f", c.d_img, H / 2, spk);
  LstmWeights::init(s, "spk/enc_b", c.d_img, H / 2, spk);
  add_linear(s, "spk/init", H, H, spk);
  LstmWeights::init(s, "spk/dec", E, H, spk);
  s.add_uniform("spk/att_q", H, H, 1.0f / std::sqrt(static_cast<float>(H)), spk);
  add_linear(s, "spk/att_c", 2 * H, H, spk);
  add_linear(s, "spk/out", H, c.vocab_size, spk);
  return m;
}

void save_models(const std::filesystem::path& dir, const Models& models, const nlohmann::json& extra) {
  nlohmann::json e = extra.is_null() ? nlohmann::json::object() : extra;
  e["model"] = model_config_to_json(models.config);
  save_checkpoint(dir, models.params, e);
}

Models load_models(const std::filesystem::path& dir, nlohmann::json* extra) {
  nlohmann::json e;
  Models m;
  m.params = load_checkpoint(dir, &e);
  if (!e.contains("model")) throw MissingArtifact("checkpoint in " + dir.string() + " has no model config");
  m.config = model_config_from_json(e["model"]);
  if (extra != nullptr) *extra = e;
  return m;
}

Tensor DropoutCtl::apply(const Tensor& x) const {
  if (!train || rng == nullptr || p == 0.0f) return x;
  return dropout(x, p, *rng, true);
}

// ---------------------------------------------------------------------------
// Navigator

namespace {

struct NavWeights {
  Tensor word_emb, act_emb, att_q, att_c_w, att_c_b, out_w, out_b, c1_w, c1_b, c2_w, c2_b;
  LstmWeights enc, dec;

  explicit NavWeights(const ParamStore& s)
      : word_emb(s.get("nav/word_emb")),
        act_emb(s.get("nav/act_emb")),
        att_q(s.get("nav/att_q")),
        att_c_w(s.get("nav/att_c/w")),
        att_c_b(s.get("nav/att_c/b")),
        out_w(s.get("nav/out/w")),
        out_b(s.get("nav/out/b")),
        c1_w(s.get("critic/l1/w")),
        c1_b(s.get("critic/l1/b")),
        c2_w(s.get("critic/l2/w")),
        c2_b(s.get("critic/l2/b")),
        enc(LstmWeights::from_store(s, "nav/enc")),
        dec(LstmWeights::from_store(s, "nav/dec")) {}
};

NavStepOutput nav_step(const NavWeights& w, const LstmState& state, int prev_action, std::span<const float> obs,
                       const NavContext& ctx, const DropoutCtl& drop) {
  if (prev_action < 0 || prev_action > kStartAction)
    throw PreconditionError("nav_policy_step: bad previous action " + std::to_string(prev_action));
  const Tensor o = Tensor::row({obs.begin(), obs.end()});
  const Tensor x = concat({drop.apply(embed(w.act_emb, prev_action)), o});
  LstmState s = lstm_cell(x, state, w.dec);
  const auto att = attention(matmul(s.h, w.att_q), ctx.u);
  const Tensor ht = tanh(linear(concat({s.h, att.context}), w.att_c_w, w.att_c_b));
  Tensor logits = linear(drop.apply(ht), w.out_w, w.out_b);
  Tensor value = linear(drop.apply(relu(linear(s.h, w.c1_w, w.c1_b))), w.c2_w, w.c2_b);
  return {std::move(logits), std::move(s), std::move(value)};
}

std::vector<double> log_probs(const Tensor& logits, double temperature = 1.0) {
  const auto d = logits.data();
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : d) mx = std::max(mx, static_cast<double>(v) / temperature);
  double z = 0.0;
  for (float v : d) z += std::exp(static_cast<double>(v) / temperature - mx);
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<double>(d[i]) / temperature - mx - std::log(z);
  return out;
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());  // first maximum
}

}  // namespace

NavContext encode_context(const Models& m, std::span<const TokenId> tokens, const DropoutCtl& drop) {
  if (tokens.empty()) throw PreconditionError("encode_context: empty context");
  const Tensor& emb = m.params.get("nav/word_emb");
  const auto enc = LstmWeights::from_store(m.params, "nav/enc");
  std::vector<Tensor> xs;
  xs.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || t >= m.config.vocab_size) throw PreconditionError("encode_context: token out of range");
    xs.push_back(drop.apply(embed(emb, t)));
  }
  LstmState st = zero_state(m.config.hidden);
  const auto steps = lstm_encode(xs, enc, st);
  return {stack_rows(steps), st};
}

NavStepOutput nav_policy_step(const Models& m, const LstmState& state, int prev_action, std::span<const float> obs,
                              const NavContext& ctx, const DropoutCtl& drop) {
  if (static_cast<int>(obs.size()) != m.config.d_img)
    throw DimensionError("nav_policy_step: observation size " + std::to_string(obs.size()) + " vs d_img " +
                         std::to_string(m.config.d_img));
  return nav_step(NavWeights(m.params), state, prev_action, obs, ctx, drop);
}

Rollout decode_actions(const Models& m, const NavContext& ctx, const World& world, const Pose& start, int prev_action,
                       const NavDecode& mode, int max_steps, const DropoutCtl& drop) {
  if (max_steps < 1) throw PreconditionError("decode_actions: max_steps must be >= 1");
  if (mode.kind == DecodeKind::Sample && mode.rng == nullptr) throw PreconditionError("decode_actions: Sample needs an rng");
  const NavWeights w(m.params);
  Rollout r;
  LstmState state = ctx.final;
  Pose pose = start;
  int prev = prev_action;
  for (int t = 0; t < max_steps; ++t) {
    const auto obs = observation(world, pose, m.config.d_img);
    auto out = nav_step(w, state, prev, obs, ctx, drop);
    const auto lp = log_probs(out.logits);
    int a = 0;
    if (mode.kind == DecodeKind::Argmax) {
      a = argmax(lp);
    } else {
      std::vector<double> p(lp.size());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(lp[i]);
      a = static_cast<int>(mode.rng->categorical(p));
    }
    r.actions.push_back(static_cast<Action>(a));
    r.poses.push_back(pose);
    r.logits.push_back(out.logits);
    r.values.push_back(out.value);
    r.logprobs.push_back(lp[a]);
    state = out.state;
    prev = a;
    pose = step(world, pose, static_cast<Action>(a));
    if (static_cast<Action>(a) == Action::Stop) {
      r.stopped = true;
      break;
    }
  }
  r.end = pose;
  r.last_action = prev;
  return r;
}

Rollout replay_actions(const Models& m, const NavContext& ctx, const World& world, const Pose& start, int prev_action,
                       std::span<const Action> actions, const DropoutCtl& drop) {
  const NavWeights w(m.params);
  Rollout r;
  LstmState state = ctx.final;
  Pose pose = start;
  int prev = prev_action;
  for (Action act : actions) {
    const auto obs = observation(world, pose, m.config.d_img);
    auto out = nav_step(w, state, prev, obs, ctx, drop);
    const int a = static_cast<int>(act);
    r.actions.push_back(act);
    r.poses.push_back(pose);
    r.logprobs.push_back(log_probs(out.logits)[a]);
    r.logits.push_back(out.logits);
    r.values.push_back(out.value);
    state = out.state;
    prev = a;
    pose = step(world, pose, act);
    if (act == Action::Stop) {
      r.stopped = true;
      break;
    }
  }
  r.end = pose;
  r.last_action = prev;
  return r;
}

// ---------------------------------------------------------------------------
// Speaker

namespace {

struct SpkWeights {
  Tensor word_emb, init_w, init_b, att_q, att_c_w, att_c_b, out_w, out_b;
  LstmWeights enc_f, enc_b, dec;

  explicit SpkWeights(const ParamStore& s)
      : word_emb(s.get("spk/word_emb")),
        init_w(s.get("spk/init/w")),
        init_b(s.get("spk/init/b")),
        att_q(s.get("spk/att_q")),
        att_c_w(s.get("spk/att_c/w")),
        att_c_b(s.get("spk/att_c/b")),
        out_w(s.get("spk/out/w")),
        out_b(s.get("spk/out/b")),
        enc_f(LstmWeights::from_store(s, "spk/enc_f")),
        enc_b(LstmWeights::from_store(s, "spk/enc_b")),
        dec(LstmWeights::from_store(s, "spk/dec")) {}
};

// Tokens the speaker may never emit.
bool masked(TokenId t) {
  return t == Vocabulary::kPad || t == Vocabulary::kBos || t == Vocabulary::kUnk || t == Vocabulary::kNavTag ||
         t == Vocabulary::kOraTag;
}

Tensor mask_row(int vocab) {
  std::vector<Scalar> v(vocab, 0.0f);
  for (int t = 0; t < vocab; ++t) {
    if (masked(t)) v[t] = -1e4f;
  }
  return Tensor::row(std::move(v));
}

/// Decoder positioned right after the prefix; logits() predicts the next token.
class SpeakerDecoder {
 public:
  SpeakerDecoder(const Models& m, const SpeakerInput& in, const DropoutCtl& drop)
      : w_(m.params), drop_(drop), mask_(mask_row(m.config.vocab_size)), vocab_(m.config.vocab_size) {
    if (in.images.empty()) throw PreconditionError("speaker: image sequence must not be empty");
    std::vector<Tensor> imgs;
    for (const auto& img : in.images) {
      if (static_cast<int>(img.size()) != m.config.d_img) throw DimensionError("speaker: image size vs d_img");
      imgs.push_back(Tensor::row({img.begin(), img.end()}));
    }
    const auto enc = bilstm_encode(imgs, w_.enc_f, w_.enc_b);
    keys_ = stack_rows(enc.steps);
    state_ = {tanh(linear(concat({enc.forward_final.h, enc.backward_final.h}), w_.init_w, w_.init_b)),
              Tensor::zeros(1, m.config.hidden)};
    feed(role_tag(in.role));
    for (TokenId t : in.condition) feed(t);
    feed(Vocabulary::kBos);
  }

  void feed(TokenId t) {
    if (t < 0 || t >= vocab_) throw PreconditionError("speaker: token out of range");
    state_ = lstm_cell(drop_.apply(embed(w_.word_emb, t)), state_, w_.dec);
  }

  /// Masked log-softmax over the vocabulary, [1, V].
  Tensor log_probs() const {
    const auto att = attention(matmul(state_.h, w_.att_q), keys_);
    const Tensor ht = tanh(linear(concat({state_.h, att.context}), w_.att_c_w, w_.att_c_b));
    return log_softmax(add(linear(drop_.apply(ht), w_.out_w, w_.out_b), mask_));
  }

 private:
  SpkWeights w_;
  DropoutCtl drop_;
  Tensor mask_;
  int vocab_;
  Tensor keys_;
  LstmState state_;
};

}  // namespace

Generated generate_utterance(const Models& m, const SpeakerInput& in, const LangDecode& mode) {
  if (mode.kind == DecodeKind::Sample && (mode.rng == nullptr || !(mode.temperature > 0.0)))
    throw PreconditionError("generate_utterance: Sample needs an rng and temperature > 0");
  NoGradScope no_grad;
  SpeakerDecoder dec(m, in, {});
  Generated g;
  g.utterance.role = in.role;
  for (int i = 0; i < m.config.l_gen; ++i) {
    const Tensor lp = dec.log_probs();
    const auto d = lp.data();
    TokenId tok = 0;
    if (mode.kind == DecodeKind::Argmax) {
      tok = static_cast<TokenId>(std::max_element(d.begin(), d.end()) - d.begin());
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < d.size(); ++t)
        if (!masked(static_cast<TokenId>(t))) mx = std::max(mx, static_cast<double>(d[t]) / mode.temperature);
      std::vector<double> p(d.size(), 0.0);
      for (std::size_t t = 0; t < d.size(); ++t)
        if (!masked(static_cast<TokenId>(t))) p[t] = std::exp(static_cast<double>(d[t]) / mode.temperature - mx);
      tok = static_cast<TokenId>(mode.rng->categorical(p));
    }
    g.utterance.tokens.push_back(tok);
    g.logprobs.push_back(d[tok]);
    if (tok == Vocabulary::kEos) break;
    dec.feed(tok);
  }
  return g;
}

Tensor score_utterance(const Models& m, const SpeakerInput& in, std::span<const TokenId> tokens,
                       const DropoutCtl& drop) {
  std::vector<TokenId> seq(tokens.begin(), tokens.end());
  if (seq.empty() || (seq.back() != Vocabulary::kEos && static_cast<int>(seq.size()) < m.config.l_gen))
    seq.push_back(Vocabulary::kEos);
  SpeakerDecoder dec(m, in, drop);
  std::vector<Tensor> picks;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    picks.push_back(pick(dec.log_probs(), seq[i]));
    if (i + 1 < seq.size()) dec.feed(seq[i]);
  }
  return concat(std::span<const Tensor>(picks));
}

std::vector<double> first_token_distribution(const Models& m, const SpeakerInput& in) {
  NoGradScope no_grad;
  SpeakerDecoder dec(m, in, {});
  const Tensor lp = dec.log_probs();  // keep alive while iterating its data
  std::vector<double> p;
  for (double v : lp.data()) p.push_back(std::exp(v));
  return p;
}

// ---------------------------------------------------------------------------
// Policies

Rollout LearnedNavigator::burst(const BurstRequest& req, Rng& rng) const {
  const NavContext ctx = encode_context(m_, req.context, drop_);
  return decode_actions(m_, ctx, *req.world, req.start, req.prev_action, {kind_, &rng}, req.max_steps, drop_);
}

Rollout TeacherNavigator::burst(const BurstRequest& req, Rng&) const {
  Rollout r;
  Pose pose = req.start;
  int prev = req.prev_action;
  for (int t = 0; t < req.max_steps; ++t) {
    const Action a = teacher_action(*req.world, pose, req.goal);
    r.actions.push_back(a);
    r.poses.push_back(pose);
    r.logprobs.push_back(0.0);
    prev = static_cast<int>(a);
    pose = step(*req.world, pose, a);
    if (a == Action::Stop) {
      r.stopped = true;
      break;
    }
  }
  r.end = pose;
  r.last_action = prev;
  return r;
}

Rollout StationaryNavigator::burst(const BurstRequest& req, Rng&) const {
  Rollout r;
  r.actions = {Action::Stop};
  r.poses = {req.start};
  r.logprobs = {0.0};
  r.end = req.start;
  r.last_action = static_cast<int>(Action::Stop);
  r.stopped = true;
  return r;
}

SpeakerInput question_input(const World& world, const Pose& pose, TokenId target, int d_img) {
  return {Role::Question, {observation(world, pose, d_img)}, {target}};
}

SpeakerInput answer_input(const GuideInput& in, TokenId target, const Utterance& question) {
  SpeakerInput s{Role::Answer, in.images, {target}};
  for (TokenId t : question.words()) s.condition.push_back(t);
  return s;
}

Generated LearnedSpeaker::ask(const World& world, const Pose& pose, TokenId target, const LangDecode& mode) const {
  return generate_utterance(m_, question_input(world, pose, target, m_.config.d_img), mode);
}

Generated LearnedSpeaker::answer(const GuideInput& in, TokenId target, const Utterance& question,
                                 const LangDecode& mode) const {
  return generate_utterance(m_, answer_input(in, target, question), mode);
}

Generated ScriptedSpeaker::ask(const World& world, const Pose& pose, TokenId, const LangDecode&) const {
  Generated g{script_question(world, pose), {}};
  g.logprobs.assign(g.utterance.tokens.size(), 0.0);
  return g;
}

Generated ScriptedSpeaker::answer(const GuideInput& in, TokenId, const Utterance&, const LangDecode&) const {
  Generated g{script_answer(*in.world, in.pose.node, in.path5), {}};
  g.logprobs.assign(g.utterance.tokens.size(), 0.0);
  return g;
}

}  // namespace rmmnav
