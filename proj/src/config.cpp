#include "rmmnav/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>

namespace rmmnav {

namespace {

using Json = nlohmann::json;

// Reads `section` strictly: every key must have a handler.
void read_section(const Json& j, const std::string& name,
                  const std::map<std::string, std::function<void(const Json&)>>& handlers) {
  if (!j.is_object()) throw ConfigError("section '" + name + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = handlers.find(key);
    if (it == handlers.end()) throw ConfigError("unknown key '" + name + "." + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + name + "." + key + "': " + e.what());
    }
  }
}

template <class T>
std::function<void(const Json&)> into(T& field) {
  return [&field](const Json& v) { field = v.get<T>(); };
}

std::string decode_kind_name(DecodeKind k) { return k == DecodeKind::Argmax ? "argmax" : "sample"; }

DecodeKind decode_kind_from_name(const std::string& s) {
  if (s == "argmax") return DecodeKind::Argmax;
  if (s == "sample") return DecodeKind::Sample;
  throw ConfigError("unknown decode kind '" + s + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (world.params.num_rooms < 2 || world.params.nodes_per_room < 1)
    throw ConfigError("world needs >= 2 rooms and >= 1 node per room");
  if (world.params.object_vocab < 1 || world.params.object_vocab > static_cast<int>(kObjectWords.size()))
    throw ConfigError("world.object_vocab out of range");
  if (world.train_worlds < 1 || world.unseen_worlds < 1) throw ConfigError("world counts must be >= 1");
  const auto tr = train_world_seeds();
  const std::set<std::uint64_t> train_set(tr.begin(), tr.end());
  for (auto s : unseen_world_seeds()) {
    if (train_set.count(s)) throw ConfigError("unseen world seed " + std::to_string(s) + " collides with a training seed");
  }
  model.validate();
  train.validate();
  if (corpus.episodes_per_world < 1) throw ConfigError("train.corpus_episodes_per_world must be >= 1");
  if (!(corpus.noise >= 0.0 && corpus.noise <= 1.0)) throw ConfigError("train.corpus_noise must be in [0,1]");
  game.validate();
  rmm.validate();
  eval.validate();
}

std::vector<std::uint64_t> ExperimentConfig::train_world_seeds() const {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < world.train_worlds; ++i) out.push_back(world.train_seed_base + i);
  return out;
}

std::vector<std::uint64_t> ExperimentConfig::unseen_world_seeds() const {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < world.unseen_worlds; ++i) out.push_back(world.unseen_seed_base + i);
  return out;
}

nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["world"] = {{"num_rooms", c.world.params.num_rooms},
                {"nodes_per_room", c.world.params.nodes_per_room},
                {"object_vocab", c.world.params.object_vocab},
                {"train_worlds", c.world.train_worlds},
                {"unseen_worlds", c.world.unseen_worlds},
                {"train_seed_base", c.world.train_seed_base},
                {"unseen_seed_base", c.world.unseen_seed_base}};
  const auto m = model_config_to_json(c.model);
  j["model"] = nlohmann::ordered_json::object();
  for (const char* k : {"vocab_size", "hidden", "word_embed", "action_embed", "d_img", "dropout", "l_gen"})
    j["model"][k] = m.at(k);
  const auto& t = c.train;
  j["train"] = {{"lr_nav", t.lr_nav},
                {"wd_nav", t.wd_nav},
                {"lr_spk", t.lr_spk},
                {"lr_selfplay", t.lr_selfplay},
                {"dropout", t.dropout},
                {"batch_pretrain", t.batch_pretrain},
                {"iters_pretrain", t.iters_pretrain},
                {"batch_selfplay", t.batch_selfplay},
                {"iters_selfplay", t.iters_selfplay},
                {"k", t.td_k},
                {"lambda_da", t.lambda_da},
                {"ce_weight", t.ce_weight},
                {"rl_weight", t.rl_weight},
                {"speaker_rl", t.speaker_rl},
                {"da_navigator", t.da_navigator},
                {"da_speaker", t.da_speaker},
                {"corpus_episodes_per_world", c.corpus.episodes_per_world},
                {"corpus_noise", c.corpus.noise}};
  j["game"] = {{"question_interval", c.game.question_interval},
               {"max_actions", c.game.max_actions},
               {"max_exchanges", c.game.max_exchanges},
               {"history_cap", c.game.history_cap},
               {"context", context_mode_name(c.game.context)},
               {"question_first", c.game.question_first},
               {"language", decode_kind_name(c.game.language)},
               {"temperature", c.game.temperature}};
  j["rmm"] = {{"n", c.rmm.n}, {"horizon", c.rmm.horizon}, {"budget", c.rmm.budget}, {"temperature", c.rmm.temperature}};
  std::vector<std::string> modes;
  for (auto mode : c.eval.modes) modes.emplace_back(context_mode_name(mode));
  j["eval"] = {{"episodes_per_world", c.eval.episodes_per_world}, {"modes", modes}};
  return j;
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  Json world = Json::object(), model = Json::object(), train = Json::object(), game = Json::object(),
       rmm = Json::object(), eval = Json::object();
  read_section(j, "config",
               {{"preset", into(c.preset)},
                {"seed", into(c.seed)},
                {"output_dir", into(c.output_dir)},
                {"world", into(world)},
                {"model", into(model)},
                {"train", into(train)},
                {"game", into(game)},
                {"rmm", into(rmm)},
                {"eval", into(eval)}});
  auto& w = c.world;
  read_section(world, "world",
               {{"num_rooms", into(w.params.num_rooms)},
                {"nodes_per_room", into(w.params.nodes_per_room)},
                {"object_vocab", into(w.params.object_vocab)},
                {"train_worlds", into(w.train_worlds)},
                {"unseen_worlds", into(w.unseen_worlds)},
                {"train_seed_base", into(w.train_seed_base)},
                {"unseen_seed_base", into(w.unseen_seed_base)}});
  if (!model.is_object()) throw ConfigError("section 'model' must be an object");
  c.model = model_config_from_json(model);
  auto& t = c.train;
  read_section(train, "train",
               {{"lr_nav", into(t.lr_nav)},
                {"wd_nav", into(t.wd_nav)},
                {"lr_spk", into(t.lr_spk)},
                {"lr_selfplay", into(t.lr_selfplay)},
                {"dropout", into(t.dropout)},
                {"batch_pretrain", into(t.batch_pretrain)},
                {"iters_pretrain", into(t.iters_pretrain)},
                {"batch_selfplay", into(t.batch_selfplay)},
                {"iters_selfplay", into(t.iters_selfplay)},
                {"k", into(t.td_k)},
                {"lambda_da", into(t.lambda_da)},
                {"ce_weight", into(t.ce_weight)},
                {"rl_weight", into(t.rl_weight)},
                {"speaker_rl", into(t.speaker_rl)},
                {"da_navigator", into(t.da_navigator)},
                {"da_speaker", into(t.da_speaker)},
                {"corpus_episodes_per_world", into(c.corpus.episodes_per_world)},
                {"corpus_noise", into(c.corpus.noise)}});
  auto& g = c.game;
  read_section(game, "game",
               {{"question_interval", into(g.question_interval)},
                {"max_actions", into(g.max_actions)},
                {"max_exchanges", into(g.max_exchanges)},
                {"history_cap", into(g.history_cap)},
                {"context", [&g](const Json& v) { g.context = context_mode_from_name(v.get<std::string>()); }},
                {"question_first", into(g.question_first)},
                {"language", [&g](const Json& v) { g.language = decode_kind_from_name(v.get<std::string>()); }},
                {"temperature", into(g.temperature)}});
  read_section(rmm, "rmm",
               {{"n", into(c.rmm.n)},
                {"horizon", into(c.rmm.horizon)},
                {"budget", into(c.rmm.budget)},
                {"temperature", into(c.rmm.temperature)}});
  read_section(eval, "eval",
               {{"episodes_per_world", into(c.eval.episodes_per_world)},
                {"modes", [&c](const Json& v) {
                   c.eval.modes.clear();
                   for (const auto& m : v) c.eval.modes.push_back(context_mode_from_name(m.get<std::string>()));
                 }}});
  c.train.seed = c.seed;
  c.corpus.rng_seed = derive_seed(c.seed, 7);
  c.corpus.question_interval = g.question_interval;
  c.corpus.max_actions = g.max_actions;
  c.corpus.max_exchanges = g.max_exchanges;
  c.validate();
  return c;
}

nlohmann::ordered_json preset_json(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  if (name == "tiny") {
    c.output_dir = "runs/tiny";
    c.model.dropout = 0.1;
    c.train.lr_nav = 3e-3;
    c.train.lr_spk = 3e-3;
    c.train.lr_selfplay = 1e-3;
    c.train.dropout = 0.1;
    c.train.iters_pretrain = 500;
    c.train.iters_selfplay = 30;
  } else if (name == "paper-scale") {
    c.output_dir = "runs/paper-scale";
    c.model = ModelConfig::paper_scale();
    c.world.params = {12, 6, 12};
    c.world.train_worlds = 200;
    c.world.unseen_worlds = 50;
    c.world.unseen_seed_base = 100000;
    c.train.iters_pretrain = 20000;
    c.train.batch_pretrain = 100;
    c.train.iters_selfplay = 2000;
    c.train.batch_selfplay = 10;
    c.corpus.episodes_per_world = 8;
  } else {
    throw ConfigError("unknown preset '" + name + "' (tiny | paper-scale)");
  }
  return config_to_json(c);
}

ExperimentConfig resolve_config(const Json& overrides) {
  if (!overrides.is_object()) throw ConfigError("config must be a JSON object");
  const std::string name = overrides.value("preset", std::string("tiny"));
  Json full = preset_json(name);
  full.merge_patch(overrides);
  // merge_patch drops null members; keep the preset when the file sets it to null
  full["preset"] = name;
  return config_from_json(full);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return resolve_config(j);
}

std::filesystem::path output_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return c.output_dir;
}

}  // namespace rmmnav
