#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aapp/model.hpp"

namespace aapp {

// Nonnegative per-channel squared-l2 activation summary, summed over the
// batch and sequence dimensions. Raw sums (not means) so that energies are
// additive over batches; consumers normalize as needed.
using ChannelEnergy = std::vector<double>;

// E_k = sum_{b,s} X[b,s,k]^2
ChannelEnergy record_energy(const Tensor3& x_int);

enum class StoreLabel { General, Benign, Harmful };

const char* store_label_name(StoreLabel l);

struct RefreshPolicy {
  int window = 20;  // prompts per refresh
  double ema_alpha = 0.1;
};

struct TargetStores {
  ChannelEnergy general, benign, harmful;
  uint64_t n_general = 0, n_benign = 0, n_harmful = 0;

  const ChannelEnergy& store(StoreLabel l) const;
  ChannelEnergy& store(StoreLabel l);
  uint64_t& count(StoreLabel l);
  uint64_t count(StoreLabel l) const;
};

struct HistoryBank {
  uint64_t config_hash = 0;
  std::map<int, TargetStores> targets;  // PrunableTarget::key()

  TargetStores& at(PrunableTarget t);
  const TargetStores& at(PrunableTarget t) const;

  // All three stores calibrated (nonzero sample counts) for every listed
  // target — required before any gate/prune consultation.
  bool complete_for(const std::vector<PrunableTarget>& ts) const;
};

// Runs dense traced forwards over the prompts in batches of at most
// batch_size (consecutive prompts of equal length share a batch) and
// overwrites the labeled store of every prunable target with the mean
// per-batch energy. Sample counts are set to the number of prompts.
void calibrate(const Model& m, const std::vector<std::vector<int>>& prompts,
               StoreLabel label, int batch_size, HistoryBank& bank);

// EMA refresh of the general store only; benign/harmful are calibration
// ground truth and never auto-refreshed. The caller owns the
// every-`window`-prompts trigger and passes the mean live energy since the
// last refresh.
void refresh_general(TargetStores& stores, const ChannelEnergy& live_mean,
                     const RefreshPolicy& policy);

// Versioned binary serialization; round-trips value-exact and byte-stable.
void save_bank(const HistoryBank& bank, const std::string& path);
HistoryBank load_bank(const std::string& path);

}  // namespace aapp
