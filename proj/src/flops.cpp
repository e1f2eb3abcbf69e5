#include "aapp/flops.hpp"

#include <stdexcept>

namespace aapp {

namespace {

void validate_kept(const ModelConfig& cfg, const std::map<int, int>& kept) {
  for (const auto& [key, count] : kept) {
    const PrunableTarget t = PrunableTarget::from_key(key);
    if (t.layer < 0 || t.layer >= cfg.num_layers) {
      throw std::invalid_argument("pruned_flops: mask for non-prunable layer");
    }
    const int c = t.kind == TargetKind::AttnOProj ? cfg.d_model : cfg.d_ff;
    if (count < 1 || count > c) {
      throw std::invalid_argument("pruned_flops: kept count out of [1, C]");
    }
  }
}

int kept_or(const std::map<int, int>& kept, PrunableTarget t, int dense) {
  auto it = kept.find(t.key());
  return it == kept.end() ? dense : it->second;
}

}  // namespace

FlopsReport pruned_flops(const ModelConfig& cfg, const std::map<int, int>& kept,
                         int context_len, bool include_attn_scores) {
  if (include_attn_scores && context_len < 1) {
    throw std::invalid_argument("flops: context_len must be >= 1");
  }
  validate_kept(cfg, kept);

  const double d = double(cfg.d_model);
  const double dff = double(cfg.d_ff);
  const double v = double(cfg.vocab_size);
  const double ctx = double(context_len);

  FlopsBreakdown dense_macs, pruned_macs;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const double ko = double(kept_or(kept, {l, TargetKind::AttnOProj}, cfg.d_model));
    const double kd = double(kept_or(kept, {l, TargetKind::MlpDownProj}, cfg.d_ff));

    dense_macs.attn_proj += 4.0 * d * d;
    pruned_macs.attn_proj += 2.0 * d * d + 2.0 * ko * d;
    dense_macs.mlp += 2.0 * d * dff;
    pruned_macs.mlp += 2.0 * kd * d;
    if (include_attn_scores) {
      dense_macs.attn_scores += 2.0 * ctx * d;
      pruned_macs.attn_scores += ctx * d + ctx * ko;
    }
  }
  dense_macs.head = d * v;
  pruned_macs.head = d * v;

  FlopsReport r;
  r.dense.attn_proj = 2.0 * dense_macs.attn_proj;
  r.dense.attn_scores = 2.0 * dense_macs.attn_scores;
  r.dense.mlp = 2.0 * dense_macs.mlp;
  r.dense.head = 2.0 * dense_macs.head;
  r.pruned.attn_proj = 2.0 * pruned_macs.attn_proj;
  r.pruned.attn_scores = 2.0 * pruned_macs.attn_scores;
  r.pruned.mlp = 2.0 * pruned_macs.mlp;
  r.pruned.head = 2.0 * pruned_macs.head;
  r.dense_flops_per_token = r.dense.total();
  r.pruned_flops_per_token = r.pruned.total();
  return r;
}

FlopsReport dense_flops(const ModelConfig& cfg, int context_len,
                        bool include_attn_scores) {
  return pruned_flops(cfg, {}, context_len, include_attn_scores);
}

double probe_overhead_flops_per_token(const ModelConfig& cfg, int probe_tokens,
                                      int seq_len, int probe_depth,
                                      bool include_attn_scores) {
  if (probe_tokens < 0 || seq_len < 1 || probe_depth < 0) {
    throw std::invalid_argument("probe_overhead: bad arguments");
  }
  const double d = double(cfg.d_model);
  const double dff = double(cfg.d_ff);
  const double m = double(probe_tokens);
  const double depth = double(probe_depth);

  // projections over m probe tokens, probe_depth layers, no output head
  double macs_per_row = m * depth * (4.0 * d * d + 2.0 * d * dff);
  if (include_attn_scores) {
    // exact causal cost within the probe: sum_t (t+1) = m(m+1)/2, twice
    macs_per_row += depth * d * m * (m + 1.0);
  }
  return 2.0 * macs_per_row / double(seq_len);
}

}  // namespace aapp
