#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "aapp/evalharness.hpp"

namespace aapp {

// The full, validated description of one run. Every output artifact embeds
// the resolved form for provenance, and a run is reproducible from that
// embedded config alone. All randomness flows from `seed` through labeled
// substreams (see rng.hpp).
struct RunConfig {
  uint64_t seed = 1;
  Method method = Method::AAPP;
  int batch_size = 20;

  ModelConfig model;  // seed field is derived from `seed`, not configured
  ProbeConfig probe;
  GateConfig gate;
  PruneConfig prune;
  RefreshPolicy refresh;
  SyntheticWorldConfig world;  // seed derived from `seed`

  int gen_len = 16;
  int refusal_window = 8;
  int context_len = 420;
  bool include_attn_scores = false;

  std::string toxicity_scorer = "mock";  // "mock" | "remote"
  RemoteScorerConfig remote;

  // optional user-supplied tokenized evaluation corpus; empty = synthetic
  std::string corpus_path;
};

RunConfig default_run_config();

// Strict parse: unknown keys anywhere are hard errors (a silent typo would
// corrupt a sweep). Missing keys keep their defaults.
RunConfig parse_run_config(const nlohmann::json& j);

// Reads the file (when non-empty), applies `key.path=value` overrides, then
// parses and validates.
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides);

nlohmann::json run_config_to_json(const RunConfig& cfg);

void validate_run_config(const RunConfig& cfg);

// Derived pieces ------------------------------------------------------------

// World config with its seed and generation knobs resolved from the run.
SyntheticWorldConfig resolved_world_config(const RunConfig& cfg);

ExperimentSettings to_experiment_settings(const RunConfig& cfg);

// Binds a history bank to the (model, seed, world) that produced it.
uint64_t bank_binding_hash(const RunConfig& cfg);

}  // namespace aapp
