#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmmnav/agents.hpp"
#include "rmmnav/eval.hpp"
#include "rmmnav/gameplay.hpp"
#include "rmmnav/lang.hpp"
#include "rmmnav/rmm.hpp"
#include "rmmnav/training.hpp"
#include "rmmnav/world.hpp"

namespace rmmnav {

inline constexpr const char* kVersion = RMMNAV_VERSION;
inline constexpr const char* kOutputRootEnv = "RMMNAV_OUTPUT_ROOT";

struct WorldSection {
  WorldParams params;
  int train_worlds = 20;
  int unseen_worlds = 20;
  std::uint64_t train_seed_base = 1000;
  std::uint64_t unseen_seed_base = 5000;
};

struct ExperimentConfig {
  std::string preset = "tiny";
  std::uint64_t seed = 1;
  std::string output_dir = "runs/tiny";
  WorldSection world;
  ModelConfig model;
  TrainConfig train;     ///< train.seed mirrors the global seed
  CorpusParams corpus;   ///< lives in the train section as corpus_* keys
  GameConfig game;
  RmmConfig rmm;
  EvalConfig eval;

  void validate() const;
  std::vector<std::uint64_t> train_world_seeds() const;
  std::vector<std::uint64_t> unseen_world_seeds() const;
};

/// Fully-resolved JSON for a named preset ("tiny" or "paper-scale").
nlohmann::ordered_json preset_json(const std::string& name);

/// Strict parse of a complete document; unknown keys are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const ExperimentConfig& c);

/// A config file names an optional "preset" (default tiny) and overrides any
/// subset of its fields.
ExperimentConfig resolve_config(const nlohmann::json& overrides);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Output root: $RMMNAV_OUTPUT_ROOT when set, else output_dir.
std::filesystem::path output_root(const ExperimentConfig& c);

}  // namespace rmmnav
