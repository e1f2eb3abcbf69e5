#pragma once

#include <span>
#include <vector>

#include "aapp/history.hpp"
#include "aapp/model.hpp"

namespace aapp {

// Which margin direction fires the gate. CloserToHarmful (default) fires
// when the probe distribution is nearer the harmful profile than the safe
// one (KL_safe - KL_harm >= tau). HarmMinusSafe keeps the opposite margin
// direction behind a switch.
enum class SignConvention { CloserToHarmful, HarmMinusSafe };

struct GateConfig {
  double tau_margin = 0.0;
  double epsilon = 1e-8;
  SignConvention sign = SignConvention::CloserToHarmful;
};

struct GateDecision {
  double kl_harm = 0.0;
  double kl_safe = 0.0;
  bool fired = false;
  PrunableTarget target;
};

// p_c = (v_c + epsilon) / sum_j (v_j + epsilon); strictly positive, sums to 1.
std::vector<double> normalize(const ChannelEnergy& v, double epsilon);

// sum_c p_c ln(p_c / q_c), natural log, fp64. Inputs must be strictly
// positive distributions of equal length.
double kl_divergence(std::span<const double> p, std::span<const double> q);

GateDecision gate_decision(const ChannelEnergy& probe, const ChannelEnergy& q_safe_raw,
                           const ChannelEnergy& q_jail_raw, const GateConfig& cfg,
                           PrunableTarget target = {});

}  // namespace aapp
