#pragma once

#include <vector>

#include "aapp/history.hpp"
#include "aapp/model.hpp"

namespace aapp {

// PP_sp importance per channel; low score marks a prune candidate.
using ScoreVector = std::vector<double>;

enum class BlendStage { Scores, Energies };

struct PruneConfig {
  double prune_ratio = 0.3;   // r in [0, 1)
  double align_frac = 0.3;    // fraction of C reserved when the gate fires
  double blend_lambda = 0.5;  // weight on the general-history side
  BlendStage blend_stage = BlendStage::Scores;
  int excluded_head_layers = 6;
  int excluded_tail_layers = 3;
};

// Layers [begin, end) are pruning targets. When the configured exclusions
// would swallow a shallow model they are rescaled proportionally to a
// 32-layer reference: floor(head * L / 32), floor(tail * L / 32).
struct LayerRange {
  int begin = 0;
  int end = 0;
  bool contains(int layer) const { return layer >= begin && layer < end; }
};

LayerRange prunable_layer_range(const PruneConfig& cfg, int num_layers);

// I_k = l2 norm over output rows i of W[i,k]^2 * E_k  (literal elementwise
// form, fp64).
ScoreVector ppsp_scores(const Matrix& w_final, const ChannelEnergy& energy);

// Sum-normalizes both inputs (epsilon-guarded) and returns their convex
// combination (1-lambda)*live + lambda*general; output sums to 1.
ScoreVector blend_scores(const ScoreVector& live, const ScoreVector& general,
                         double blend_lambda);

struct Budget {
  int k = 0;        // channels kept
  int k_align = 0;  // reserved for alignment when the gate fires
};

// k = ceil((1-r)*C), k_align = min(floor(align_frac*C), k).
Budget channel_budget(int channels, double prune_ratio, double align_frac);

// gate_fired=false: top-k by score. gate_fired=true: top-k_align by
// hist_jail, remainder filled by descending score. Ties break toward the
// lower channel index; result sorted ascending.
std::vector<int> select_channels(const ScoreVector& scores, const ChannelEnergy& hist_jail,
                                 int k, int k_align, bool gate_fired);

// Gathers kept columns of W_final and kept rows of the producing map into
// compact matrices so the masked matmul genuinely performs C_out * k MACs.
MaterializedTarget compile_and_materialize(const Model& m, PrunableTarget target,
                                           std::vector<int> kept, bool gate_fired);

}  // namespace aapp
