#include "aapp/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aapp {

std::vector<double> token_importance(const Tensor3& hidden) {
  if (hidden.s == 0 || hidden.b == 0) {
    throw std::invalid_argument("token_importance: empty sequence");
  }
  std::vector<double> scores(size_t(hidden.b) * size_t(hidden.s), 0.0);
  for (int b = 0; b < hidden.b; ++b) {
    for (int t = 0; t < hidden.s; ++t) {
      const float* r = hidden.row(b, t);
      double acc = 0.0;
      for (int j = 0; j < hidden.c; ++j) acc += double(r[j]) * double(r[j]);
      scores[size_t(b) * size_t(hidden.s) + size_t(t)] = std::sqrt(acc);
    }
  }
  return scores;
}

std::vector<int> select_probe_tokens_row(std::span<const double> scores,
                                         double keep_fraction) {
  if (keep_fraction <= 0.0 || keep_fraction > 1.0) {
    throw std::invalid_argument("select_probe_tokens: keep_fraction out of (0,1]");
  }
  const int seq = int(scores.size());
  if (seq == 0) throw std::invalid_argument("select_probe_tokens: empty sequence");
  const int keep = std::min(seq, int(std::ceil(keep_fraction * double(seq) - 1e-9)));
  const int m = std::max(1, keep);

  std::vector<int> order(static_cast<size_t>(seq));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[size_t(a)] != scores[size_t(b)]) return scores[size_t(a)] > scores[size_t(b)];
    return a < b;
  });
  order.resize(static_cast<size_t>(m));
  std::sort(order.begin(), order.end());  // original order preserved
  return order;
}

std::vector<std::vector<int>> select_probe_tokens(const std::vector<double>& scores,
                                                  int batch, int seq,
                                                  double keep_fraction) {
  if (int(scores.size()) != batch * seq) {
    throw std::invalid_argument("select_probe_tokens: score shape mismatch");
  }
  std::vector<std::vector<int>> out(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    out[size_t(b)] = select_probe_tokens_row(
        std::span(scores.data() + size_t(b) * size_t(seq), size_t(seq)), keep_fraction);
  }
  return out;
}

ProbeStates run_probe(const Model& m, const Tensor3& h_start,
                      const std::vector<std::vector<int>>& selected, int start_layer,
                      int probe_depth, MacCounter* macs) {
  if (start_layer < 0 || probe_depth < 1 ||
      start_layer + probe_depth > m.cfg.num_layers) {
    throw std::invalid_argument("run_probe: probe window exceeds model depth");
  }
  if (int(selected.size()) != h_start.b) {
    throw std::invalid_argument("run_probe: selection rows != batch");
  }
  const int mtok = selected.empty() ? 0 : int(selected[0].size());
  for (const auto& row : selected) {
    if (int(row.size()) != mtok || mtok == 0) {
      throw std::invalid_argument("run_probe: ragged or empty token selection");
    }
  }

  Tensor3 probe(h_start.b, mtok, h_start.c);
  for (int b = 0; b < h_start.b; ++b) {
    for (int i = 0; i < mtok; ++i) {
      const int t = selected[size_t(b)][size_t(i)];
      if (t < 0 || t >= h_start.s) {
        throw std::invalid_argument("run_probe: selected position out of range");
      }
      const float* src = h_start.row(b, t);
      float* dst = probe.row(b, i);
      for (int j = 0; j < h_start.c; ++j) dst[j] = src[j];
    }
  }

  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = true;
  opts.macs = macs;
  run_layers(m, probe, start_layer, start_layer + probe_depth, opts, &trace);

  ProbeStates states;
  states.layer_begin = start_layer;
  states.layer_end = start_layer + probe_depth;
  for (const auto& [key, x_int] : trace.x_int) {
    states.energy[key] = record_energy(x_int);
  }
  return states;
}

}  // namespace aapp
