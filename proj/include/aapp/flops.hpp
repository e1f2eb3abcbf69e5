#pragma once

#include <map>

#include "aapp/model.hpp"

namespace aapp {

// Deterministic per-token compute accounting at 2 FLOPs/MAC.
//
// Per-token MACs, attention scores excluded:
//   L * (4*d^2 + 2*d*d_ff) + d*V
// with the optional attention term L * 2 * context_len * d (q·k logits plus
// attention-weighted value sums at a configured mean context length).
// Embedding lookup counts as zero MACs (table read).
//
// Pruning scales: o_proj and its value path by kept/d_model, down_proj and
// up_proj by kept/d_ff, per layer.

struct FlopsBreakdown {
  double attn_proj = 0.0;
  double attn_scores = 0.0;
  double mlp = 0.0;
  double head = 0.0;

  double total() const { return attn_proj + attn_scores + mlp + head; }
};

struct FlopsReport {
  double dense_flops_per_token = 0.0;
  double pruned_flops_per_token = 0.0;
  double probe_overhead_flops_per_token = 0.0;
  FlopsBreakdown dense;   // FLOPs per token, by component
  FlopsBreakdown pruned;  // equals dense when nothing is pruned
};

FlopsReport dense_flops(const ModelConfig& cfg, int context_len,
                        bool include_attn_scores);

// kept: PrunableTarget::key() -> kept channel count. Targets absent from the
// map are dense. Throws on unknown targets or kept counts outside [1, C].
FlopsReport pruned_flops(const ModelConfig& cfg, const std::map<int, int>& kept,
                         int context_len, bool include_attn_scores);

// Probe cost per original token: the dense per-layer formulas restricted to
// the probe window and the m-of-seq token subset (no output head).
double probe_overhead_flops_per_token(const ModelConfig& cfg, int probe_tokens,
                                      int seq_len, int probe_depth,
                                      bool include_attn_scores);

}  // namespace aapp
