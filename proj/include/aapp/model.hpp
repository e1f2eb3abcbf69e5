#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aapp/kernels.hpp"

namespace aapp {

// ---------------------------------------------------------------------------
// Minimal decoder-only transformer.
//
// Per layer:   h += o_proj( attn( ln1(h)·g1 ) )
//              h += down_proj( silu( up_proj( ln2(h)·g2 ) ) )
// Final:       logits = head( lnf(h)·gf )
//
// Attention is causal, single KV path. No biases, no positional embeddings
// (causality breaks the symmetry; positional fidelity is out of scope).
// Weights are fp32, all accumulation is fp64.
//
// The two structured-pruning targets are the input channels of o_proj
// (d_model of them) and of down_proj (d_ff of them). Pruning input channel j
// of down_proj also skips row j of up_proj; pruning input channel j of
// o_proj skips value-projection row j and its attention-weighted sum. That
// is what makes a mask a real MAC reduction instead of multiply-by-zero.
// ---------------------------------------------------------------------------

struct ModelConfig {
  int num_layers = 0;
  int num_heads = 0;
  int d_model = 0;
  int head_dim = 0;  // 0 = derive as d_model / num_heads
  int d_ff = 0;
  int vocab_size = 0;
  uint64_t seed = 0;

  // Fills head_dim when left 0; throws std::invalid_argument on violation
  // of num_heads * head_dim == d_model or any count < 1.
  ModelConfig resolved() const;
  uint64_t hash() const;
};

enum class TargetKind : int { AttnOProj = 0, MlpDownProj = 1 };

const char* target_kind_name(TargetKind k);

struct PrunableTarget {
  int layer = 0;
  TargetKind kind = TargetKind::AttnOProj;

  int key() const { return layer * 2 + int(kind); }
  static PrunableTarget from_key(int key) {
    return {key / 2, TargetKind(key % 2)};
  }
  auto operator<=>(const PrunableTarget&) const = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;   // all [d_model, d_model]
  Matrix w_up;             // [d_ff, d_model]
  Matrix w_down;           // [d_model, d_ff]
  std::vector<float> ln1_g, ln2_g;
};

struct Model {
  ModelConfig cfg;
  Matrix embed;  // [vocab, d_model]
  std::vector<LayerWeights> layers;
  std::vector<float> lnf_g;
  Matrix head;  // [vocab, d_model]

  std::vector<PrunableTarget> prunable_targets() const;
  int channel_count(PrunableTarget t) const;

  // W_final for a target: the learnable map consuming the prunable channels
  // (wo for AttnOProj, w_down for MlpDownProj).
  const Matrix& final_weight(PrunableTarget t) const;
  Matrix& final_weight(PrunableTarget t);

  // FNV-1a over all weight bytes; used by determinism tests.
  uint64_t weight_fingerprint() const;
};

// Deterministic weight synthesis: every tensor gets its own PRNG stream
// keyed by (seed, layer, tensor name), scaled-uniform initialized.
Model synthesize_model(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

struct CompiledMask {
  PrunableTarget target;
  std::vector<int> kept;  // sorted ascending, nonempty
  bool gate_fired = false;
};

// A compiled mask plus the compacted weights the masked forward consumes:
// w_final_compact  = kept columns of W_final          [C_out, k]
// w_upstream_compact = kept rows of the producing map [k, in_dim]
struct MaterializedTarget {
  CompiledMask mask;
  Matrix w_final_compact;
  Matrix w_upstream_compact;
};

struct MaskSet {
  std::vector<MaterializedTarget> items;

  const MaterializedTarget* find(PrunableTarget t) const {
    for (const auto& m : items) {
      if (m.mask.target == t) return &m;
    }
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct TokenBatch {
  int b = 0;
  int s = 0;
  std::vector<int> ids;  // row-major [b, s]

  TokenBatch() = default;
  TokenBatch(int b_, int s_) : b(b_), s(s_), ids(size_t(b_) * size_t(s_), 0) {}
  int at(int bi, int si) const { return ids[size_t(bi) * size_t(s) + size_t(si)]; }
  int& at(int bi, int si) { return ids[size_t(bi) * size_t(s) + size_t(si)]; }
};

// trace=on captures, for every prunable target executed, the intermediate
// activation X_int as it is *before* masking (shape [b, s, C]), plus each
// layer's post-norm hidden state (ln1 output, [b, s, d_model]). When a
// masked target is traced its upstream runs dense so the full X_int exists;
// production passes trace only unmasked (calibration) flows.
struct ForwardTrace {
  std::map<int, Tensor3> x_int;      // PrunableTarget::key() -> [b, s, C]
  std::map<int, Tensor3> post_norm;  // layer -> [b, s, d_model]
};

struct ForwardOptions {
  const MaskSet* masks = nullptr;
  bool trace = false;
  MacCounter* macs = nullptr;
};

Tensor3 embed_tokens(const Model& m, const TokenBatch& tokens);

// Applies layers [layer_begin, layer_end) to h in place.
void run_layers(const Model& m, Tensor3& h, int layer_begin, int layer_end,
                const ForwardOptions& opts, ForwardTrace* trace);

// ln1(h)·g1 of the given layer, without running the layer. This is the
// "layer-normalized hidden state" the probe scores tokens on.
Tensor3 post_norm_at(const Model& m, const Tensor3& h, int layer);

// Final layer norm + output head.
Tensor3 output_logits(const Model& m, const Tensor3& h, MacCounter* macs = nullptr);

// Full pass: embed + all layers + head. Logits are [b, s, vocab].
Tensor3 forward(const Model& m, const TokenBatch& tokens,
                const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr);

}  // namespace aapp
