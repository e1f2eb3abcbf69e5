#include "aapp/gate.hpp"

#include <cmath>
#include <stdexcept>

namespace aapp {

std::vector<double> normalize(const ChannelEnergy& v, double epsilon) {
  if (v.empty()) throw std::invalid_argument("normalize: empty vector");
  if (!(epsilon > 0.0)) throw std::invalid_argument("normalize: epsilon must be > 0");
  double sum = 0.0;
  for (double x : v) {
    if (!(x >= 0.0)) throw std::invalid_argument("normalize: negative or NaN energy");
    sum += x + epsilon;
  }
  std::vector<double> p(v.size());
  for (size_t i = 0; i < v.size(); ++i) p[i] = (v[i] + epsilon) / sum;
  return p;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  if (p.empty()) throw std::invalid_argument("kl_divergence: empty distributions");
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0) || !(q[i] > 0.0)) {
      throw std::invalid_argument("kl_divergence: non-positive entry");
    }
    s += p[i] * std::log(p[i] / q[i]);
  }
  // rounding can leave a tiny negative residue for p ~ q
  return s < 0.0 ? 0.0 : s;
}

GateDecision gate_decision(const ChannelEnergy& probe, const ChannelEnergy& q_safe_raw,
                           const ChannelEnergy& q_jail_raw, const GateConfig& cfg,
                           PrunableTarget target) {
  if (q_safe_raw.empty() || q_jail_raw.empty()) {
    throw std::invalid_argument("gate_decision: uncalibrated store");
  }
  if (probe.size() != q_safe_raw.size() || probe.size() != q_jail_raw.size()) {
    throw std::invalid_argument("gate_decision: store length mismatch");
  }
  const auto p = normalize(probe, cfg.epsilon);
  const auto qs = normalize(q_safe_raw, cfg.epsilon);
  const auto qj = normalize(q_jail_raw, cfg.epsilon);

  GateDecision d;
  d.target = target;
  d.kl_harm = kl_divergence(p, qj);
  d.kl_safe = kl_divergence(p, qs);
  if (cfg.sign == SignConvention::CloserToHarmful) {
    d.fired = (d.kl_safe - d.kl_harm) >= cfg.tau_margin;
  } else {
    d.fired = (d.kl_harm - d.kl_safe) >= cfg.tau_margin;
  }
  return d;
}

}  // namespace aapp
