#pragma once

#include <map>
#include <vector>

#include "aapp/history.hpp"
#include "aapp/model.hpp"

namespace aapp {

struct ProbeConfig {
  double token_keep_fraction = 0.5;  // in (0, 1]
  int probe_depth = 4;               // layers to run ahead
  int start_layer = -1;              // -1 = first non-excluded layer
};

// Per-target channel energies measured on the probe's intermediate
// activations, for targets inside [layer_begin, layer_end).
struct ProbeStates {
  int layer_begin = 0;
  int layer_end = 0;
  std::map<int, ChannelEnergy> energy;  // PrunableTarget::key() -> energy

  const ChannelEnergy* find(PrunableTarget t) const {
    auto it = energy.find(t.key());
    return it == energy.end() ? nullptr : &it->second;
  }
};

// Residual importance: l2 norm of each position's layer-normalized hidden
// state. Returns [b, s] flattened row-major.
std::vector<double> token_importance(const Tensor3& post_norm_hidden);

// Keeps ceil(keep_fraction * seq) highest-scoring positions of one batch
// row, original order preserved, ties broken toward the lower index.
std::vector<int> select_probe_tokens_row(std::span<const double> scores,
                                         double keep_fraction);

std::vector<std::vector<int>> select_probe_tokens(const std::vector<double>& scores,
                                                  int batch, int seq,
                                                  double keep_fraction);

// Runs a dense forward over the selected tokens through layers
// [start_layer, start_layer + probe_depth) and records per-target channel
// energies. h_start is the full batch hidden state entering start_layer;
// selected holds per-row position indices into it.
ProbeStates run_probe(const Model& m, const Tensor3& h_start,
                      const std::vector<std::vector<int>>& selected,
                      int start_layer, int probe_depth, MacCounter* macs = nullptr);

}  // namespace aapp
