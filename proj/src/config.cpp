#include "aapp/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "aapp/rng.hpp"

namespace aapp {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) {
    throw std::invalid_argument("config: '" + where + "' must be an object");
  }
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) {
      throw std::invalid_argument("config: unknown key '" + where + k + "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

}  // namespace

RunConfig default_run_config() {
  // desk scale: every circuit gain in SyntheticWorldConfig is tuned for
  // this depth/width; deeper models need retuned gains
  RunConfig cfg;
  cfg.model.num_layers = 8;
  cfg.model.num_heads = 4;
  cfg.model.d_model = 64;
  cfg.model.d_ff = 256;
  cfg.model.vocab_size = 256;
  return cfg;
}

RunConfig parse_run_config(const json& j) {
  RunConfig cfg = default_run_config();
  check_keys(j, {"format_version", "seed", "method", "batch_size", "model", "probe", "gate",
                 "prune", "history", "world", "run", "toxicity", "corpus_path"},
             "");
  if (auto it = j.find("format_version"); it != j.end() && it->get<int>() != 1) {
    throw std::invalid_argument("config: unsupported format_version");
  }
  read(j, "seed", cfg.seed);
  if (auto it = j.find("method"); it != j.end()) {
    const auto name = it->get<std::string>();
    const auto m = method_from_name(name);
    if (!m) throw std::invalid_argument("config: unknown method '" + name + "'");
    cfg.method = *m;
  }
  read(j, "batch_size", cfg.batch_size);
  read(j, "corpus_path", cfg.corpus_path);

  if (auto it = j.find("model"); it != j.end()) {
    const json& m = *it;
    check_keys(m, {"num_layers", "num_heads", "d_model", "d_ff", "vocab_size"}, "model.");
    read(m, "num_layers", cfg.model.num_layers);
    read(m, "num_heads", cfg.model.num_heads);
    read(m, "d_model", cfg.model.d_model);
    read(m, "d_ff", cfg.model.d_ff);
    read(m, "vocab_size", cfg.model.vocab_size);
  }
  if (auto it = j.find("probe"); it != j.end()) {
    const json& p = *it;
    check_keys(p, {"token_keep_fraction", "probe_depth", "start_layer"}, "probe.");
    read(p, "token_keep_fraction", cfg.probe.token_keep_fraction);
    read(p, "probe_depth", cfg.probe.probe_depth);
    read(p, "start_layer", cfg.probe.start_layer);
  }
  if (auto it = j.find("gate"); it != j.end()) {
    const json& g = *it;
    check_keys(g, {"tau_margin", "epsilon", "sign_convention"}, "gate.");
    read(g, "tau_margin", cfg.gate.tau_margin);
    read(g, "epsilon", cfg.gate.epsilon);
    if (auto s = g.find("sign_convention"); s != g.end()) {
      const auto name = s->get<std::string>();
      if (name == "closer_to_harmful") {
        cfg.gate.sign = SignConvention::CloserToHarmful;
      } else if (name == "harm_minus_safe") {
        cfg.gate.sign = SignConvention::HarmMinusSafe;
      } else {
        throw std::invalid_argument("config: unknown sign_convention '" + name + "'");
      }
    }
  }
  if (auto it = j.find("prune"); it != j.end()) {
    const json& p = *it;
    check_keys(p,
               {"prune_ratio", "align_frac", "blend_lambda", "blend_stage",
                "excluded_head_layers", "excluded_tail_layers"},
               "prune.");
    read(p, "prune_ratio", cfg.prune.prune_ratio);
    read(p, "align_frac", cfg.prune.align_frac);
    read(p, "blend_lambda", cfg.prune.blend_lambda);
    if (auto s = p.find("blend_stage"); s != p.end()) {
      const auto name = s->get<std::string>();
      if (name == "scores") {
        cfg.prune.blend_stage = BlendStage::Scores;
      } else if (name == "energies") {
        cfg.prune.blend_stage = BlendStage::Energies;
      } else {
        throw std::invalid_argument("config: unknown blend_stage '" + name + "'");
      }
    }
    read(p, "excluded_head_layers", cfg.prune.excluded_head_layers);
    read(p, "excluded_tail_layers", cfg.prune.excluded_tail_layers);
  }
  if (auto it = j.find("history"); it != j.end()) {
    const json& h = *it;
    check_keys(h, {"refresh_window", "ema_alpha"}, "history.");
    read(h, "refresh_window", cfg.refresh.window);
    read(h, "ema_alpha", cfg.refresh.ema_alpha);
  }
  if (auto it = j.find("world"); it != j.end()) {
    const json& w = *it;
    check_keys(w,
               {"harm_feature_dim", "refusal_dim", "relay_dim", "target_layer", "refusal_channels",
                "n_refusal_channels", "refusal_token", "n_harm_markers", "n_toxic_tokens",
                "n_benign", "n_harmful", "prompt_len", "harm_tokens_min", "harm_tokens_max",
                "validation_prompts", "calibration_prompts", "max_build_attempts",
                "harm_feature_scale", "transport_gain", "attn_flatten", "read_gain",
                "relay_write_gain", "write_gain", "head_gain", "toxic_head_gain"},
               "world.");
    read(w, "harm_feature_dim", cfg.world.harm_feature_dim);
    read(w, "refusal_dim", cfg.world.refusal_dim);
    read(w, "relay_dim", cfg.world.relay_dim);
    read(w, "target_layer", cfg.world.target_layer);
    read(w, "refusal_channels", cfg.world.refusal_channels);
    read(w, "n_refusal_channels", cfg.world.n_refusal_channels);
    read(w, "refusal_token", cfg.world.refusal_token);
    read(w, "n_harm_markers", cfg.world.n_harm_markers);
    read(w, "n_toxic_tokens", cfg.world.n_toxic_tokens);
    read(w, "n_benign", cfg.world.n_benign);
    read(w, "n_harmful", cfg.world.n_harmful);
    read(w, "prompt_len", cfg.world.prompt_len);
    read(w, "harm_tokens_min", cfg.world.harm_tokens_min);
    read(w, "harm_tokens_max", cfg.world.harm_tokens_max);
    read(w, "validation_prompts", cfg.world.validation_prompts);
    read(w, "calibration_prompts", cfg.world.calibration_prompts);
    read(w, "max_build_attempts", cfg.world.max_build_attempts);
    read(w, "harm_feature_scale", cfg.world.harm_feature_scale);
    read(w, "transport_gain", cfg.world.transport_gain);
    read(w, "attn_flatten", cfg.world.attn_flatten);
    read(w, "read_gain", cfg.world.read_gain);
    read(w, "relay_write_gain", cfg.world.relay_write_gain);
    read(w, "write_gain", cfg.world.write_gain);
    read(w, "head_gain", cfg.world.head_gain);
    read(w, "toxic_head_gain", cfg.world.toxic_head_gain);
  }
  if (auto it = j.find("run"); it != j.end()) {
    const json& r = *it;
    check_keys(r, {"gen_len", "refusal_window", "context_len", "include_attn_scores"},
               "run.");
    read(r, "gen_len", cfg.gen_len);
    read(r, "refusal_window", cfg.refusal_window);
    read(r, "context_len", cfg.context_len);
    read(r, "include_attn_scores", cfg.include_attn_scores);
  }
  if (auto it = j.find("toxicity"); it != j.end()) {
    const json& t = *it;
    check_keys(t, {"scorer", "url", "api_key_env", "timeout_ms", "retries"}, "toxicity.");
    read(t, "scorer", cfg.toxicity_scorer);
    read(t, "url", cfg.remote.url);
    read(t, "api_key_env", cfg.remote.api_key_env);
    read(t, "timeout_ms", cfg.remote.timeout_ms);
    read(t, "retries", cfg.remote.retries);
  }
  validate_run_config(cfg);
  return cfg;
}

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw std::runtime_error("config: " + path + ": " + e.what());
    }
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("override must be key.path=value: " + ov);
    }
    const std::string key = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;  // bare strings are fine
    }
    std::string pointer = "/";
    for (char ch : key) pointer += ch == '.' ? '/' : ch;
    j[json::json_pointer(pointer)] = parsed;
  }
  return parse_run_config(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json w = {
      {"harm_feature_dim", cfg.world.harm_feature_dim},
      {"refusal_dim", cfg.world.refusal_dim},
      {"relay_dim", cfg.world.relay_dim},
      {"target_layer", cfg.world.target_layer},
      {"refusal_channels", cfg.world.refusal_channels},
      {"n_refusal_channels", cfg.world.n_refusal_channels},
      {"refusal_token", cfg.world.refusal_token},
      {"n_harm_markers", cfg.world.n_harm_markers},
      {"n_toxic_tokens", cfg.world.n_toxic_tokens},
      {"n_benign", cfg.world.n_benign},
      {"n_harmful", cfg.world.n_harmful},
      {"prompt_len", cfg.world.prompt_len},
      {"harm_tokens_min", cfg.world.harm_tokens_min},
      {"harm_tokens_max", cfg.world.harm_tokens_max},
      {"validation_prompts", cfg.world.validation_prompts},
      {"calibration_prompts", cfg.world.calibration_prompts},
      {"max_build_attempts", cfg.world.max_build_attempts},
      {"harm_feature_scale", cfg.world.harm_feature_scale},
      {"transport_gain", cfg.world.transport_gain},
      {"attn_flatten", cfg.world.attn_flatten},
      {"read_gain", cfg.world.read_gain},
      {"relay_write_gain", cfg.world.relay_write_gain},
      {"write_gain", cfg.world.write_gain},
      {"head_gain", cfg.world.head_gain},
      {"toxic_head_gain", cfg.world.toxic_head_gain},
  };
  return json{
      {"format_version", 1},
      {"seed", cfg.seed},
      {"method", method_name(cfg.method)},
      {"batch_size", cfg.batch_size},
      {"model",
       {{"num_layers", cfg.model.num_layers},
        {"num_heads", cfg.model.num_heads},
        {"d_model", cfg.model.d_model},
        {"d_ff", cfg.model.d_ff},
        {"vocab_size", cfg.model.vocab_size}}},
      {"probe",
       {{"token_keep_fraction", cfg.probe.token_keep_fraction},
        {"probe_depth", cfg.probe.probe_depth},
        {"start_layer", cfg.probe.start_layer}}},
      {"gate",
       {{"tau_margin", cfg.gate.tau_margin},
        {"epsilon", cfg.gate.epsilon},
        {"sign_convention", cfg.gate.sign == SignConvention::CloserToHarmful
                                ? "closer_to_harmful"
                                : "harm_minus_safe"}}},
      {"prune",
       {{"prune_ratio", cfg.prune.prune_ratio},
        {"align_frac", cfg.prune.align_frac},
        {"blend_lambda", cfg.prune.blend_lambda},
        {"blend_stage", cfg.prune.blend_stage == BlendStage::Scores ? "scores" : "energies"},
        {"excluded_head_layers", cfg.prune.excluded_head_layers},
        {"excluded_tail_layers", cfg.prune.excluded_tail_layers}}},
      {"history", {{"refresh_window", cfg.refresh.window}, {"ema_alpha", cfg.refresh.ema_alpha}}},
      {"world", w},
      {"run",
       {{"gen_len", cfg.gen_len},
        {"refusal_window", cfg.refusal_window},
        {"context_len", cfg.context_len},
        {"include_attn_scores", cfg.include_attn_scores}}},
      {"toxicity",
       {{"scorer", cfg.toxicity_scorer},
        {"url", cfg.remote.url},
        {"api_key_env", cfg.remote.api_key_env},
        {"timeout_ms", cfg.remote.timeout_ms},
        {"retries", cfg.remote.retries}}},
      {"corpus_path", cfg.corpus_path},
  };
}

void validate_run_config(const RunConfig& cfg) {
  const ModelConfig model = cfg.model.resolved();  // throws on bad dims
  if (cfg.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");

  if (cfg.probe.token_keep_fraction <= 0.0 || cfg.probe.token_keep_fraction > 1.0) {
    throw std::invalid_argument("config: probe.token_keep_fraction out of (0,1]");
  }
  if (cfg.probe.probe_depth < 1) throw std::invalid_argument("config: probe_depth < 1");

  const LayerRange range = prunable_layer_range(cfg.prune, model.num_layers);
  const int start = cfg.probe.start_layer >= 0 ? cfg.probe.start_layer : range.begin;
  if (start + cfg.probe.probe_depth > model.num_layers) {
    throw std::invalid_argument("config: probe window exceeds model depth");
  }
  if (start > range.begin) {
    throw std::invalid_argument(
        "config: probe.start_layer must not exceed the first prunable layer");
  }

  if (!(cfg.gate.epsilon > 0.0)) throw std::invalid_argument("config: gate.epsilon must be > 0");
  if (cfg.gate.tau_margin < 0.0) throw std::invalid_argument("config: gate.tau_margin < 0");

  if (cfg.prune.prune_ratio < 0.0 || cfg.prune.prune_ratio >= 1.0) {
    throw std::invalid_argument("config: prune_ratio out of [0,1)");
  }
  if (cfg.prune.align_frac < 0.0 || cfg.prune.align_frac > 1.0) {
    throw std::invalid_argument("config: align_frac out of [0,1]");
  }
  if (cfg.prune.blend_lambda < 0.0 || cfg.prune.blend_lambda > 1.0) {
    throw std::invalid_argument("config: blend_lambda out of [0,1]");
  }

  if (cfg.refresh.window < 1) throw std::invalid_argument("config: refresh_window < 1");
  if (cfg.refresh.ema_alpha <= 0.0 || cfg.refresh.ema_alpha > 1.0) {
    throw std::invalid_argument("config: ema_alpha out of (0,1]");
  }

  if (cfg.gen_len < 1) throw std::invalid_argument("config: gen_len < 1");
  if (cfg.refusal_window < 1) throw std::invalid_argument("config: refusal_window < 1");
  if (cfg.context_len < 1) throw std::invalid_argument("config: context_len < 1");

  if (cfg.world.n_benign < 1 || cfg.world.n_harmful < 1) {
    throw std::invalid_argument("config: need at least one benign and one harmful prompt");
  }
  if (cfg.world.prompt_len < 1) throw std::invalid_argument("config: prompt_len < 1");
  if (cfg.world.harm_tokens_min < 1 || cfg.world.harm_tokens_max < cfg.world.harm_tokens_min) {
    throw std::invalid_argument("config: bad harm token counts");
  }
  if (cfg.world.calibration_prompts < 1) {
    throw std::invalid_argument("config: calibration_prompts < 1");
  }
  if (cfg.world.validation_prompts < 1) {
    throw std::invalid_argument("config: validation_prompts < 1");
  }

  if (cfg.toxicity_scorer != "mock" && cfg.toxicity_scorer != "remote") {
    throw std::invalid_argument("config: toxicity.scorer must be 'mock' or 'remote'");
  }
  if (cfg.toxicity_scorer == "remote" && cfg.remote.url.empty()) {
    throw std::invalid_argument("config: remote toxicity scorer requires a url");
  }
}

SyntheticWorldConfig resolved_world_config(const RunConfig& cfg) {
  SyntheticWorldConfig w = cfg.world;
  w.seed = Rng(cfg.seed).derive("world").seed();
  w.gen_len = cfg.gen_len;
  w.refusal_window = cfg.refusal_window;
  return w;
}

ExperimentSettings to_experiment_settings(const RunConfig& cfg) {
  ExperimentSettings s;
  s.method = cfg.method;
  s.batch_size = cfg.batch_size;
  s.probe = cfg.probe;
  s.gate = cfg.gate;
  s.prune = cfg.prune;
  s.refresh = cfg.refresh;
  s.context_len = cfg.context_len;
  s.include_attn_scores = cfg.include_attn_scores;
  s.gen_len = cfg.gen_len;
  s.refusal_window = cfg.refusal_window;
  return s;
}

uint64_t bank_binding_hash(const RunConfig& cfg) {
  ModelConfig model = cfg.model.resolved();
  model.seed = Rng(cfg.seed).derive("weights").seed();
  uint64_t h = model.hash();
  const json w = run_config_to_json(cfg)["world"];
  h = Rng::fnv1a(w.dump(), h);
  h = Rng::fnv1a(std::to_string(cfg.seed), h);
  return h;
}

}  // namespace aapp
