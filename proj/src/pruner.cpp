#include "aapp/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aapp {

namespace {

constexpr double kScoreEps = 1e-8;

// argsort descending by value, ties toward the lower index
std::vector<int> order_desc(std::span<const double> v) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (v[size_t(a)] != v[size_t(b)]) return v[size_t(a)] > v[size_t(b)];
    return a < b;
  });
  return order;
}

}  // namespace

LayerRange prunable_layer_range(const PruneConfig& cfg, int num_layers) {
  if (num_layers < 1) throw std::invalid_argument("prunable_layer_range: no layers");
  if (cfg.excluded_head_layers < 0 || cfg.excluded_tail_layers < 0) {
    throw std::invalid_argument("prunable_layer_range: negative exclusion");
  }
  int head = cfg.excluded_head_layers;
  int tail = cfg.excluded_tail_layers;
  if (head + tail >= num_layers) {
    head = (cfg.excluded_head_layers * num_layers) / 32;
    tail = (cfg.excluded_tail_layers * num_layers) / 32;
  }
  if (head + tail >= num_layers) {
    throw std::invalid_argument("prunable_layer_range: exclusions cover whole model");
  }
  return {head, num_layers - tail};
}

ScoreVector ppsp_scores(const Matrix& w_final, const ChannelEnergy& energy) {
  if (int(energy.size()) != w_final.cols) {
    throw std::invalid_argument("ppsp_scores: energy length != channel count");
  }
  ScoreVector out(energy.size(), 0.0);
  for (int k = 0; k < w_final.cols; ++k) {
    const double ek = energy[size_t(k)];
    double acc = 0.0;
    for (int i = 0; i < w_final.rows; ++i) {
      const double w = double(w_final.at(i, k));
      const double term = w * w * ek;
      acc += term * term;
    }
    out[size_t(k)] = std::sqrt(acc);
  }
  return out;
}

ScoreVector blend_scores(const ScoreVector& live, const ScoreVector& general,
                         double blend_lambda) {
  if (live.size() != general.size()) {
    throw std::invalid_argument("blend_scores: length mismatch");
  }
  if (blend_lambda < 0.0 || blend_lambda > 1.0) {
    throw std::invalid_argument("blend_scores: lambda out of [0,1]");
  }
  auto norm = [](const ScoreVector& v) {
    double sum = 0.0;
    for (double x : v) sum += x + kScoreEps;
    ScoreVector p(v.size());
    for (size_t i = 0; i < v.size(); ++i) p[i] = (v[i] + kScoreEps) / sum;
    return p;
  };
  const ScoreVector ln = norm(live);
  const ScoreVector gn = norm(general);
  ScoreVector out(live.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 - blend_lambda) * ln[i] + blend_lambda * gn[i];
  }
  return out;
}

Budget channel_budget(int channels, double prune_ratio, double align_frac) {
  if (channels < 1) throw std::invalid_argument("channel_budget: channels < 1");
  if (prune_ratio < 0.0 || prune_ratio >= 1.0) {
    throw std::invalid_argument("channel_budget: prune_ratio out of [0,1)");
  }
  if (align_frac < 0.0 || align_frac > 1.0) {
    throw std::invalid_argument("channel_budget: align_frac out of [0,1]");
  }
  // 1e-9 snap keeps ceil/floor faithful to the exact rationals the doubles
  // stand for (0.3 * 10 must not ceil to 8)
  Budget b;
  b.k = int(std::ceil((1.0 - prune_ratio) * double(channels) - 1e-9));
  b.k = std::clamp(b.k, 1, channels);
  b.k_align = int(std::floor(align_frac * double(channels) + 1e-9));
  b.k_align = std::min(b.k_align, b.k);
  return b;
}

std::vector<int> select_channels(const ScoreVector& scores, const ChannelEnergy& hist_jail,
                                 int k, int k_align, bool gate_fired) {
  const int c = int(scores.size());
  if (int(hist_jail.size()) != c) {
    throw std::invalid_argument("select_channels: hist_jail length mismatch");
  }
  if (k < 1 || k > c) throw std::invalid_argument("select_channels: k out of range");
  if (k_align < 0 || k_align > k) {
    throw std::invalid_argument("select_channels: k_align out of range");
  }

  std::vector<int> kept;
  kept.reserve(static_cast<size_t>(k));
  if (!gate_fired || k_align == 0) {
    const auto by_score = order_desc(scores);
    kept.assign(by_score.begin(), by_score.begin() + k);
  } else {
    const auto by_jail = order_desc(hist_jail);
    std::vector<char> reserved(size_t(c), 0);
    for (int i = 0; i < k_align; ++i) {
      kept.push_back(by_jail[size_t(i)]);
      reserved[size_t(by_jail[size_t(i)])] = 1;
    }
    const auto by_score = order_desc(scores);
    for (int idx : by_score) {
      if (int(kept.size()) >= k) break;
      if (!reserved[size_t(idx)]) kept.push_back(idx);
    }
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

MaterializedTarget compile_and_materialize(const Model& m, PrunableTarget target,
                                           std::vector<int> kept, bool gate_fired) {
  const int c = m.channel_count(target);
  if (kept.empty()) throw std::invalid_argument("compile_and_materialize: empty kept set");
  if (!std::is_sorted(kept.begin(), kept.end()) ||
      std::adjacent_find(kept.begin(), kept.end()) != kept.end() || kept.front() < 0 ||
      kept.back() >= c) {
    throw std::invalid_argument("compile_and_materialize: invalid kept set");
  }

  const Matrix& w_final = m.final_weight(target);
  const LayerWeights& lw = m.layers[size_t(target.layer)];
  const Matrix& upstream =
      target.kind == TargetKind::AttnOProj ? lw.wv : lw.w_up;

  MaterializedTarget mt;
  mt.mask.target = target;
  mt.mask.gate_fired = gate_fired;
  const int k = int(kept.size());

  mt.w_final_compact = Matrix(w_final.rows, k);
  for (int i = 0; i < w_final.rows; ++i) {
    float* dst = mt.w_final_compact.row(i);
    const float* src = w_final.row(i);
    for (int j = 0; j < k; ++j) dst[j] = src[kept[size_t(j)]];
  }
  mt.w_upstream_compact = Matrix(k, upstream.cols);
  for (int j = 0; j < k; ++j) {
    const float* src = upstream.row(kept[size_t(j)]);
    float* dst = mt.w_upstream_compact.row(j);
    for (int i = 0; i < upstream.cols; ++i) dst[i] = src[i];
  }
  mt.mask.kept = std::move(kept);
  return mt;
}

}  // namespace aapp
