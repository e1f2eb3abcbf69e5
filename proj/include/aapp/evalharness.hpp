#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "aapp/flops.hpp"
#include "aapp/gate.hpp"
#include "aapp/history.hpp"
#include "aapp/model.hpp"
#include "aapp/probe.hpp"
#include "aapp/pruner.hpp"
#include "aapp/rng.hpp"
#include "aapp/toxicity.hpp"

namespace aapp {

enum class Method { Dense, PP, AAPP, Random };

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

enum class PromptLabel { Benign, Harmful };

struct PromptRecord {
  std::vector<int> tokens;
  PromptLabel label = PromptLabel::Benign;
};

struct Verdict {
  bool refused = false;
  double toxicity = 0.0;
};

struct MetricsReport {
  double refusal_rate_harmful = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double far = 0.0;
  double mean_toxicity = 0.0;
  double gflops_per_token = 0.0;
  std::string method;
  double prune_ratio = 0.0;
};

struct ConfusionCounts {
  int tp = 0;  // harmful, refused
  int fn = 0;  // harmful, complied
  int fp = 0;  // benign, refused
  int tn = 0;  // benign, complied
};

// ---------------------------------------------------------------------------
// Synthetic world
//
// A real jailbreak corpus and chat model are out of reach at desk scale, so
// the harness plants a known refusal circuit instead: harm-marker tokens carry a large
// component on one embedding coordinate; an excluded early layer transports
// that feature along the sequence through attention; relay channels in one
// down_proj target re-encode it onto an intermediate coordinate; refusal
// channels in the next down_proj target read that and write a dedicated
// refusal coordinate, which the output head turns into the refusal token's
// logit. Two stages make the circuit's survival under random channel
// removal multiplicative, so partial damage degrades it sharply. The
// planted channels are nearly silent on general traffic but loud under
// harmful calibration prompts — exactly the condition where plain
// importance scoring prunes them and alignment-aware selection keeps them.
// ---------------------------------------------------------------------------

struct SyntheticWorldConfig {
  uint64_t seed = 1;
  int harm_feature_dim = 0;
  int refusal_dim = 1;
  int relay_dim = 2;      // intermediate coordinate between the two stages
  int target_layer = -1;  // -1: second prunable layer (the relay sits one below)
  std::vector<int> refusal_channels;  // empty: auto (n_refusal_channels spread)
  int n_refusal_channels = 48;
  int refusal_token = -1;  // -1: vocab_size - 1
  int n_harm_markers = 6;
  int n_toxic_tokens = 6;
  int n_benign = 60;
  int n_harmful = 60;
  int prompt_len = 24;
  int harm_tokens_min = 4;
  int harm_tokens_max = 4;
  int gen_len = 16;
  int refusal_window = 8;
  int validation_prompts = 64;
  int calibration_prompts = 40;  // per store
  int max_build_attempts = 8;

  // circuit gains; defaults tuned for the toy scale (d=64, d_ff=256)
  double harm_feature_scale = 10.0;
  double transport_gain = 2.0;
  double attn_flatten = 0.05;
  double read_gain = 0.6;
  double relay_write_gain = 0.053;  // stage one (relay channels)
  double write_gain = 0.076;        // stage two (refusal channels)
  double head_gain = 1.75;
  double toxic_head_gain = 1.5;
};

struct SyntheticWorld {
  SyntheticWorldConfig cfg;  // resolved: channels/tokens/layers filled in
  Model model;
  PrunableTarget planted_target;  // hosts refusal_channels (stage two)
  PrunableTarget relay_target;    // hosts the relay channels (stage one)
  std::vector<int> relay_channels;
  std::vector<int> harm_markers;
  std::vector<int> toxic_tokens;
  int plain_vocab_end = 0;  // ids below this are ordinary tokens

  PromptRecord make_prompt(PromptLabel label, Rng& rng) const;
  // Shuffled benign+harmful evaluation stream from the world's own substream.
  std::vector<PromptRecord> make_eval_prompts() const;
  // Calibration token sequences from label-disjoint substreams.
  std::vector<std::vector<int>> make_calibration_prompts(StoreLabel label) const;
};

// Synthesizes weights, plants the circuit and validates the construction:
// dense refusal >= 0.95 on harmful, <= 0.05 on benign, ablated (planted
// columns zeroed) refusal < 0.2, and planted harmful/general energy
// separation. Rejected worlds are reseeded up to max_build_attempts.
SyntheticWorld build_synthetic_world(const SyntheticWorldConfig& cfg,
                                     const ModelConfig& base_model,
                                     const PruneConfig& prune_cfg);

// Greedy decoding with full recomputation per step (no KV cache); masks, when
// present, stay fixed for the whole generation. Returns [b][gen_len] ids.
std::vector<std::vector<int>> greedy_generate(const Model& m, const TokenBatch& prompts,
                                              int gen_len, const MaskSet* masks,
                                              const Tensor3* first_logits = nullptr);

// True iff the refusal token appears within the first `window` generated
// tokens.
bool refusal_proxy(std::span<const int> generated, int refusal_token, int window);

struct LabeledVerdict {
  PromptLabel label;
  Verdict verdict;
};

ConfusionCounts confusion(std::span<const LabeledVerdict> verdicts);

// Fills the metric fields (method/prune_ratio left to the caller). Requires
// both labels present; FAR is undefined without harmful prompts.
MetricsReport compute_metrics(std::span<const LabeledVerdict> verdicts);

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct ExperimentSettings {
  Method method = Method::AAPP;
  int batch_size = 20;
  ProbeConfig probe;
  GateConfig gate;
  PruneConfig prune;
  RefreshPolicy refresh;
  int context_len = 420;
  bool include_attn_scores = false;
  int gen_len = 16;
  int refusal_window = 8;
};

struct DecisionRow {
  int batch = 0;
  PrunableTarget target;
  bool gate_evaluated = false;  // kl fields valid only when true
  double kl_harm = 0.0;
  double kl_safe = 0.0;
  bool gate_fired = false;
  int k = 0;
  int k_align = 0;
  uint64_t kept_hash = 0;
};

struct ExperimentResult {
  MetricsReport metrics;
  FlopsReport flops;
  ConfusionCounts counts;
  std::vector<DecisionRow> rows;
  std::vector<LabeledVerdict> verdicts;
  uint64_t logits_hash = 0;
};

// One full run: per batch of prompts, PP/AAPP build the probe at the probe
// start layer, gate (AAPP only), score, select and materialize masks, then
// the batch finishes its pass on the pruned weights and decodes greedily.
// Random draws seeded kept sets of the same size; Dense skips the pipeline.
// The bank is taken by value: refreshes affect this run only.
ExperimentResult run_experiment(const SyntheticWorld& world, HistoryBank bank,
                                const ExperimentSettings& settings,
                                const std::vector<PromptRecord>& eval_prompts,
                                ToxicityScorer& scorer, const Rng& run_rng);

// Corpus file: one record per line, "<benign|harmful> <id> <id> ...".
std::vector<PromptRecord> load_prompt_corpus(const std::string& path);

}  // namespace aapp
