// rmmnav: command-line driver for world generation, training, evaluation and replay.

#include <fcntl.h>
#include <unistd.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "rmmnav/config.hpp"

namespace fs = std::filesystem;
using namespace rmmnav;

namespace {

volatile std::sig_atomic_t g_interrupted = 0;
void on_sigint(int) { g_interrupted = 1; }

struct Interrupted : std::runtime_error {
  Interrupted() : std::runtime_error("interrupted") {}
};

void check_interrupt() {
  if (g_interrupted) throw Interrupted();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifact("missing file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Whole-file write through a temporary, so readers never see half a file.
void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, p);
}

// Appends complete lines with one write(2) each; an interrupted run leaves
// only whole lines behind.
class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& p) {
    fs::create_directories(p.parent_path());
    fd_ = ::open(p.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open " + p.string());
  }
  ~JsonlWriter() {
    if (fd_ >= 0) ::close(fd_);
  }
  JsonlWriter(const JsonlWriter&) = delete;
  JsonlWriter& operator=(const JsonlWriter&) = delete;

  void line(const std::string& text) {
    const std::string l = text + "\n";
    std::size_t done = 0;
    while (done < l.size()) {
      const ssize_t n = ::write(fd_, l.data() + done, l.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw std::runtime_error("write failed");
      }
      done += static_cast<std::size_t>(n);
    }
  }

 private:
  int fd_ = -1;
};

struct Context {
  ExperimentConfig cfg;
  fs::path root;

  // Resolved config and version next to every artifact directory.
  void stamp(const fs::path& dir) const {
    nlohmann::ordered_json j;
    j["version"] = kVersion;
    j["config"] = config_to_json(cfg);
    write_file(dir / "resolved_config.json", j.dump(2) + "\n");
  }
};

std::vector<World> make_worlds(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds) {
  std::vector<World> out;
  for (auto s : seeds) out.push_back(generate_world(s, c.world.params));
  return out;
}

std::vector<World> load_worlds(const Context& ctx, const std::string& split) {
  const fs::path p = ctx.root / "worlds" / (split + ".jsonl");
  if (!fs::exists(p)) throw MissingArtifact("missing " + p.string() + " (run gen-worlds first)");
  std::istringstream in(read_file(p));
  std::vector<World> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(world_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

std::vector<CorpusRecord> load_corpus(const Context& ctx) {
  const fs::path p = ctx.root / "corpus" / "corpus.jsonl";
  if (!fs::exists(p)) throw MissingArtifact("missing " + p.string() + " (run gen-corpus first)");
  std::istringstream in(read_file(p));
  std::vector<CorpusRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(corpus_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

Models load_ckpt(const Context& ctx, const std::string& name) {
  const fs::path dir = ctx.root / "ckpt" / name;
  if (!fs::exists(dir)) throw MissingArtifact("missing checkpoint " + dir.string());
  return load_models(dir);
}

std::string selfplay_label(const std::string& method, int n) {
  return method == "rmm" ? "rmm_n" + std::to_string(n) : method;
}

LogSink jsonl_sink(JsonlWriter& w) {
  return [&w](const IterLog& l) {
    w.line(iter_log_json(l).dump());
    check_interrupt();
  };
}

// ---------------------------------------------------------------------------

void cmd_gen_worlds(const Context& ctx) {
  const fs::path dir = ctx.root / "worlds";
  for (const auto& [split, seeds] :
       {std::pair{"train", ctx.cfg.train_world_seeds()}, std::pair{"unseen", ctx.cfg.unseen_world_seeds()}}) {
    std::string text;
    for (const auto& w : make_worlds(ctx.cfg, seeds)) text += world_to_json(w).dump() + "\n";
    write_file(dir / (std::string(split) + ".jsonl"), text);
  }
  ctx.stamp(dir);
  std::cout << "worlds: " << ctx.cfg.world.train_worlds << " train, " << ctx.cfg.world.unseen_worlds << " unseen\n";
}

void cmd_gen_corpus(const Context& ctx) {
  const auto worlds = load_worlds(ctx, "train");
  const auto corpus = generate_corpus(worlds, ctx.cfg.corpus);
  std::string text;
  for (const auto& r : corpus) text += corpus_record_to_json(r).dump() + "\n";
  const fs::path dir = ctx.root / "corpus";
  write_file(dir / "corpus.jsonl", text);
  ctx.stamp(dir);
  std::cout << "corpus: " << corpus.size() << " bursts\n";
}

void cmd_pretrain(const Context& ctx) {
  const auto worlds = load_worlds(ctx, "train");
  const auto corpus = load_corpus(ctx);
  Models m = init_models(ctx.cfg.model, derive_seed(ctx.cfg.seed, 3));
  const fs::path dir = ctx.root / "ckpt" / "pretrained";
  {
    JsonlWriter log(ctx.root / "ckpt" / "pretrained.log.jsonl");
    pretrain(m, corpus, worlds, ctx.cfg.train, jsonl_sink(log));
  }
  save_models(dir, m, {{"stage", "pretrain"}});
  ctx.stamp(dir);
  std::cout << "pretrained checkpoint: " << dir.string() << "\n";
}

void cmd_selfplay(const Context& ctx, const std::string& method, int n) {
  const auto worlds = load_worlds(ctx, "train");
  const auto corpus = load_corpus(ctx);
  Models m = load_ckpt(ctx, "pretrained");
  SelfPlayOptions opts;
  opts.method = method_from_name(method);
  opts.game = ctx.cfg.game;
  opts.rmm = ctx.cfg.rmm;
  opts.rmm.n = n;
  opts.rmm.validate();
  const std::string label = selfplay_label(method, n);
  SelfPlayStats stats;
  {
    JsonlWriter log(ctx.root / "ckpt" / (label + ".log.jsonl"));
    stats = self_play(m, worlds, corpus, ctx.cfg.train, opts, jsonl_sink(log));
  }
  const fs::path dir = ctx.root / "ckpt" / label;
  save_models(dir, m, {{"stage", "selfplay"}, {"method", method}, {"n", n}});
  nlohmann::ordered_json s;
  s["method"] = label;
  s["generated_utterances"] = stats.generated_utterances;
  s["generated_lexical_types"] = stats.generated_lexical_types;
  s["mean_goal_progress"] = stats.mean_goal_progress;
  write_file(dir / "selfplay_summary.json", s.dump(2) + "\n");
  ctx.stamp(dir);
  std::cout << label << ": generated " << stats.generated_lexical_types << " lexical types, checkpoint "
            << dir.string() << "\n";
}

struct EvalTarget {
  std::string label;
  EvalPolicy policy = EvalPolicy::Learned;
  std::string ckpt;  // empty for scripted policies
  int n = 1;
};

EvalTarget eval_target(const std::string& method, int n) {
  if (method == "shortest-path") return {method, EvalPolicy::ShortestPath, "", n};
  if (method == "stationary") return {method, EvalPolicy::Stationary, "", n};
  if (method == "pretrained") return {method, EvalPolicy::Learned, "pretrained", n};
  if (method == "baseline" || method == "da") return {method, EvalPolicy::Learned, method, n};
  if (method == "rmm") return {selfplay_label(method, n), EvalPolicy::Rmm, selfplay_label(method, n), n};
  throw ConfigError("unknown eval method '" + method + "'");
}

EvalAgents make_agents(const EvalTarget& t, const Models* models, const RmmConfig& rmm_cfg) {
  EvalAgents a;
  a.models = models;
  a.policy = t.policy;
  a.name = t.label;
  a.rmm = rmm_cfg;
  a.rmm.n = t.n;
  return a;
}

std::string curves_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "method,split,mode,k,progress\n";
  for (const auto& m : r.modes) {
    for (std::size_t k = 0; k < m.curve.size(); ++k)
      out << r.method << "," << split_name(r.split) << "," << context_mode_name(m.mode) << "," << k + 1 << ","
          << nlohmann::json(m.curve[k]).dump() << "\n";
  }
  return out.str();
}

void cmd_eval(const Context& ctx, const std::string& method, const std::string& split_str, const std::string& mode,
              int n) {
  const Split split = split_from_name(split_str);
  const EvalTarget target = eval_target(method, n);
  const auto train_worlds = load_worlds(ctx, "train");
  const auto worlds = split == Split::Seen ? train_worlds : load_worlds(ctx, "unseen");
  std::vector<std::uint64_t> train_seeds;
  for (const auto& w : train_worlds) train_seeds.push_back(w.seed());
  std::optional<Models> models;
  if (!target.ckpt.empty()) models = load_ckpt(ctx, target.ckpt);
  EvalConfig ec = ctx.cfg.eval;
  if (!mode.empty()) ec.modes = {context_mode_from_name(mode)};
  const EvalAgents agents = make_agents(target, models ? &*models : nullptr, ctx.cfg.rmm);
  EvalRun run = evaluate(agents, worlds, split, train_seeds, ec, ctx.cfg.game, derive_seed(ctx.cfg.seed, 9));

  // Invariants a report must satisfy regardless of the policy.
  for (const auto& m : run.report.modes) {
    if (m.oracle_stopping + 1e-12 < m.goal_progress)
      throw InvariantViolation("oracle stopping below final progress for mode " + std::string(context_mode_name(m.mode)));
    if (static_cast<int>(m.curve.size()) > ctx.cfg.game.max_exchanges)
      throw InvariantViolation("progress curve longer than max_exchanges");
  }

  const std::string stem = target.label + "_" + split_str + (mode.empty() ? "" : "_" + mode);
  const fs::path tdir = ctx.root / "transcripts";
  for (std::size_t i = 0; i < ec.modes.size(); ++i) {
    JsonlWriter w(tdir / (target.label + "_" + split_str + "_" + std::string(context_mode_name(ec.modes[i])) + ".jsonl"));
    for (auto& t : run.transcripts[i]) {
      t.meta["policy"] = eval_policy_name(target.policy);
      t.meta["ckpt"] = target.ckpt;
      t.meta["n"] = target.n;
      std::istringstream lines(transcript_to_jsonl(t));
      std::string line;
      while (std::getline(lines, line)) w.line(line);
      check_interrupt();
    }
  }
  ctx.stamp(tdir);
  const fs::path rdir = ctx.root / "reports";
  write_file(rdir / (stem + ".json"), eval_report_to_json(run.report).dump(2) + "\n");
  write_file(rdir / (stem + "_curves.csv"), curves_csv(run.report));
  ctx.stamp(rdir);
  for (const auto& m : run.report.modes) {
    std::cout << target.label << " " << split_str << " " << context_mode_name(m.mode) << ": goal progress "
              << m.goal_progress << " (oracle stopping " << m.oracle_stopping << "), BLEU " << m.bleu_mean
              << ", lexical types " << m.lexical_types << "\n";
  }
}

void cmd_analyze(const Context& ctx) {
  const fs::path rdir = ctx.root / "reports";
  if (!fs::exists(rdir)) throw MissingArtifact("no reports under " + rdir.string() + " (run eval first)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(rdir)) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".json" && name != "summary.json" && name != "resolved_config.json")
      files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  std::ostringstream csv;
  csv << "method,split,mode,episodes,goal_progress,oracle_stopping,bleu_mean,bleu_corpus,lexical_types\n";
  for (const auto& f : files) {
    const auto j = nlohmann::ordered_json::parse(read_file(f));
    if (!j.contains("modes")) continue;
    for (const auto& [mode, m] : j["modes"].items()) {
      nlohmann::ordered_json row;
      row["method"] = j["method"];
      row["split"] = j["split"];
      row["mode"] = mode;
      for (const char* k : {"episodes", "goal_progress", "oracle_stopping", "bleu_mean", "bleu_corpus", "lexical_types"})
        row[k] = m[k];
      csv << row["method"].get<std::string>() << "," << row["split"].get<std::string>() << "," << mode;
      for (const char* k : {"episodes", "goal_progress", "oracle_stopping", "bleu_mean", "bleu_corpus", "lexical_types"})
        csv << "," << m[k].dump();
      csv << "\n";
      rows.push_back(std::move(row));
    }
  }
  nlohmann::ordered_json generated = nlohmann::ordered_json::object();
  const fs::path cdir = ctx.root / "ckpt";
  if (fs::exists(cdir)) {
    std::vector<fs::path> sums;
    for (const auto& e : fs::directory_iterator(cdir)) {
      if (fs::exists(e.path() / "selfplay_summary.json")) sums.push_back(e.path() / "selfplay_summary.json");
    }
    std::sort(sums.begin(), sums.end());
    for (const auto& s : sums) {
      const auto j = nlohmann::ordered_json::parse(read_file(s));
      generated[j["method"].get<std::string>()] = j;
    }
  }
  nlohmann::ordered_json out;
  out["rows"] = rows;
  out["selfplay_language"] = generated;
  write_file(rdir / "summary.json", out.dump(2) + "\n");
  write_file(rdir / "summary.csv", csv.str());
  std::cout << csv.str();
}

// Splits a multi-episode transcript file into per-episode texts.
std::vector<std::string> split_episodes(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("{\"kind\":\"header\"", 0) == 0) out.emplace_back();
    if (out.empty()) throw ConfigError("transcript does not start with a header line");
    out.back() += line + "\n";
  }
  return out;
}

void cmd_replay(const Context& ctx, const fs::path& path) {
  const auto episodes = split_episodes(read_file(path));
  if (episodes.empty()) throw ConfigError("empty transcript " + path.string());
  std::vector<World> worlds = load_worlds(ctx, "train");
  for (auto& w : load_worlds(ctx, "unseen")) worlds.push_back(std::move(w));
  std::map<std::string, Models> models;
  int index = 0;
  for (const auto& text : episodes) {
    const Transcript t = transcript_from_jsonl(text);
    const auto& meta = t.meta;
    for (const char* k : {"policy", "ckpt", "n", "mode"}) {
      if (!meta.contains(k)) throw ConfigError(std::string("transcript header lacks '") + k + "'");
    }
    const std::string ckpt = meta["ckpt"].get<std::string>();
    const Models* mp = nullptr;
    if (!ckpt.empty()) {
      if (!models.count(ckpt)) models.emplace(ckpt, load_ckpt(ctx, ckpt));
      mp = &models.at(ckpt);
    }
    const std::string policy = meta["policy"].get<std::string>();
    EvalAgents agents;
    agents.models = mp;
    agents.policy = policy == "rmm"             ? EvalPolicy::Rmm
                    : policy == "shortest-path" ? EvalPolicy::ShortestPath
                    : policy == "stationary"    ? EvalPolicy::Stationary
                                                : EvalPolicy::Learned;
    agents.rmm = ctx.cfg.rmm;
    agents.rmm.n = meta["n"].get<int>();
    const World* world = nullptr;
    for (const auto& w : worlds) {
      if (w.seed() == t.world_seed) world = &w;
    }
    if (world == nullptr) throw MissingArtifact("transcript world " + std::to_string(t.world_seed) + " not found");
    Transcript again = eval_episode(agents, *world, context_mode_from_name(meta["mode"].get<std::string>()),
                                    ctx.cfg.game, t.episode_seed, t.start);
    again.meta = t.meta;
    const std::string regenerated = transcript_to_jsonl(again);
    if (regenerated != text) {
      throw InvariantViolation("replay of episode " + std::to_string(index) + " in " + path.string() +
                               " diverged from the stored event stream");
    }
    ++index;
    check_interrupt();
  }
  std::cout << "replay: " << index << " episode(s) reproduced identically\n";
}

void cmd_pipeline(const Context& ctx) {
  cmd_gen_worlds(ctx);
  cmd_gen_corpus(ctx);
  cmd_pretrain(ctx);
  for (const char* m : {"baseline", "da", "rmm"}) cmd_selfplay(ctx, m, ctx.cfg.rmm.n);
  for (const char* m : {"shortest-path", "baseline", "da", "rmm"}) cmd_eval(ctx, m, "unseen", "", ctx.cfg.rmm.n);
  cmd_analyze(ctx);
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_sigint);
  CLI::App app{"Recursive mental-model navigation dialogue experiments"};
  app.require_subcommand(1);
  std::string config_path, preset = "tiny";
  app.add_option("-c,--config", config_path, "JSON config file (overrides a preset)");
  app.add_option("-p,--preset", preset, "preset used when no config file is given (tiny | paper-scale)");
  app.set_version_flag("--version", kVersion);

  auto* gen_worlds = app.add_subcommand("gen-worlds", "generate train and unseen worlds");
  auto* gen_corpus = app.add_subcommand("gen-corpus", "generate the scripted dialogue corpus");
  auto* pre = app.add_subcommand("pretrain", "supervised pretraining on the corpus");
  auto* sp = app.add_subcommand("selfplay", "dialogue self-play fine-tuning");
  std::string sp_method = "rmm";
  int sp_n = 0;
  sp->add_option("--method", sp_method, "baseline | da | rmm")->check(CLI::IsMember({"baseline", "da", "rmm"}));
  sp->add_option("--N", sp_n, "RMM candidates per role (default: config rmm.n)");
  auto* ev = app.add_subcommand("eval", "evaluate a method and write transcripts and a report");
  std::string ev_method = "rmm", ev_split = "unseen", ev_mode;
  int ev_n = 0;
  ev->add_option("--method", ev_method, "baseline | da | rmm | pretrained | shortest-path | stationary")
      ->check(CLI::IsMember({"baseline", "da", "rmm", "pretrained", "shortest-path", "stationary"}));
  ev->add_option("--split", ev_split, "seen | unseen")->check(CLI::IsMember({"seen", "unseen"}));
  ev->add_option("--mode", ev_mode, "t0 | qa1 | full (default: config eval.modes)")
      ->check(CLI::IsMember({"t0", "qa1", "full"}));
  ev->add_option("--N", ev_n, "RMM candidates per role (default: config rmm.n)");
  auto* an = app.add_subcommand("analyze", "summarize all reports");
  auto* rp = app.add_subcommand("replay", "re-run a stored transcript and check it is reproduced exactly");
  std::string rp_path;
  rp->add_option("transcript", rp_path, "transcript JSONL")->required();
  auto* pipe = app.add_subcommand("pipeline", "gen-worlds through analyze in one go");
  auto* show = app.add_subcommand("show-config", "print the resolved config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.cfg = config_path.empty() ? resolve_config({{"preset", preset}}) : load_config(config_path);
    ctx.root = output_root(ctx.cfg);
    const int n_sp = sp_n > 0 ? sp_n : ctx.cfg.rmm.n;
    const int n_ev = ev_n > 0 ? ev_n : ctx.cfg.rmm.n;
    if (*gen_worlds) cmd_gen_worlds(ctx);
    else if (*gen_corpus) cmd_gen_corpus(ctx);
    else if (*pre) cmd_pretrain(ctx);
    else if (*sp) cmd_selfplay(ctx, sp_method, n_sp);
    else if (*ev) cmd_eval(ctx, ev_method, ev_split, ev_mode, n_ev);
    else if (*an) cmd_analyze(ctx);
    else if (*rp) cmd_replay(ctx, rp_path);
    else if (*pipe) cmd_pipeline(ctx);
    else if (*show) std::cout << config_to_json(ctx.cfg).dump(2) << "\n";
    return 0;
  } catch (const Interrupted&) {
    std::cerr << "rmmnav: interrupted; partial logs end on a complete line\n";
    return 130;
  } catch (const ConfigError& e) {
    std::cerr << "rmmnav: config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "rmmnav: missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const InvariantViolation& e) {
    std::cerr << "rmmnav: invariant violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "rmmnav: error: " << e.what() << "\n";
    return 1;
  }
}
