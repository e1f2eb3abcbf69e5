#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "aapp/model.hpp"
#include "aapp/pruner.hpp"
#include "aapp/rng.hpp"

using namespace aapp;

namespace {

ModelConfig tiny_config(uint64_t seed, int layers = 2, int heads = 2, int d = 8,
                        int dff = 16, int vocab = 32) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.d_model = d;
  c.d_ff = dff;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

TokenBatch random_tokens(Rng& rng, int b, int s, int vocab) {
  TokenBatch t(b, s);
  for (auto& id : t.ids) id = int(rng.below(uint64_t(vocab)));
  return t;
}

// oracle: dense forward of a model whose non-kept W_final columns are zeroed
Model zero_columns(const Model& m, PrunableTarget target, const std::vector<int>& kept) {
  Model copy = m;
  std::vector<char> keep(size_t(copy.channel_count(target)), 0);
  for (int c : kept) keep[size_t(c)] = 1;
  Matrix& w = copy.final_weight(target);
  for (int i = 0; i < w.rows; ++i) {
    for (int j = 0; j < w.cols; ++j) {
      if (!keep[size_t(j)]) w.at(i, j) = 0.0f;
    }
  }
  return copy;
}

double max_rel_err(const Tensor3& a, const Tensor3& b) {
  REQUIRE(a.v.size() == b.v.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double x = double(a.v[i]), y = double(b.v[i]);
    const double denom = std::max({std::abs(x), std::abs(y), 1e-3});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("synthesize_model: identical (config, seed) gives identical bytes") {
  const ModelConfig cfg = tiny_config(7, 1, 1, 4, 8, 16);
  const Model a = synthesize_model(cfg);
  const Model b = synthesize_model(cfg);
  CHECK(a.weight_fingerprint() == b.weight_fingerprint());
  CHECK(a.embed.a == b.embed.a);
  CHECK(a.layers[0].w_down.a == b.layers[0].w_down.a);

  ModelConfig other = cfg;
  other.seed = 8;
  CHECK(synthesize_model(other).weight_fingerprint() != a.weight_fingerprint());
}

TEST_CASE("synthesize_model: invalid configs rejected") {
  ModelConfig cfg = tiny_config(1);
  cfg.num_heads = 3;  // 8 not divisible by 3
  CHECK_THROWS_AS(synthesize_model(cfg), std::invalid_argument);

  ModelConfig zero = tiny_config(1);
  zero.d_ff = 0;
  CHECK_THROWS_AS(synthesize_model(zero), std::invalid_argument);
}

TEST_CASE("model exposes two prunable targets per layer") {
  const Model m = synthesize_model(tiny_config(3));
  const auto targets = m.prunable_targets();
  CHECK(targets.size() == 4);  // 2 layers x 2 kinds
  CHECK(m.channel_count({0, TargetKind::AttnOProj}) == 8);
  CHECK(m.channel_count({0, TargetKind::MlpDownProj}) == 16);
}

TEST_CASE("forward: all-channels-kept masks reproduce the dense pass bit-exactly") {
  const Model m = synthesize_model(tiny_config(21));
  Rng rng(99);
  const TokenBatch tokens = random_tokens(rng, 2, 5, m.cfg.vocab_size);

  const Tensor3 dense = forward(m, tokens);

  MaskSet masks;
  for (const auto& t : m.prunable_targets()) {
    std::vector<int> all(static_cast<size_t>(m.channel_count(t)));
    for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);
    masks.items.push_back(compile_and_materialize(m, t, all, false));
  }
  ForwardOptions opts;
  opts.masks = &masks;
  const Tensor3 masked = forward(m, tokens, opts);

  REQUIRE(dense.v.size() == masked.v.size());
  for (size_t i = 0; i < dense.v.size(); ++i) {
    CHECK(dense.v[i] == masked.v[i]);  // bit-identical
  }
}

TEST_CASE("forward: masked pass equals column-zeroed oracle within 1e-6") {
  Rng rng(123);
  for (int trial = 0; trial < 12; ++trial) {
    const ModelConfig cfg =
        tiny_config(1000 + uint64_t(trial), 1 + int(rng.below(3)), 2, 8, 12, 24);
    const Model m = synthesize_model(cfg);
    const TokenBatch tokens = random_tokens(rng, 2, 4, cfg.vocab_size);

    const auto targets = m.prunable_targets();
    const PrunableTarget target = targets[size_t(rng.below(targets.size()))];
    const int c = m.channel_count(target);
    const int k = 1 + int(rng.below(uint64_t(c)));
    const std::vector<int> kept = rng.sample_without_replacement(c, k);

    MaskSet masks;
    masks.items.push_back(compile_and_materialize(m, target, kept, false));
    ForwardOptions opts;
    opts.masks = &masks;
    const Tensor3 masked = forward(m, tokens, opts);

    const Model oracle_model = zero_columns(m, target, kept);
    const Tensor3 oracle = forward(oracle_model, tokens);

    CHECK(max_rel_err(masked, oracle) < 1e-6);
  }
}

TEST_CASE("forward: masked single-channel case matches the oracle") {
  const Model m = synthesize_model(tiny_config(5, 1, 1, 4, 3, 16));
  Rng rng(7);
  const TokenBatch tokens = random_tokens(rng, 1, 3, 16);
  const PrunableTarget target{0, TargetKind::MlpDownProj};

  MaskSet masks;
  masks.items.push_back(compile_and_materialize(m, target, {1}, false));
  ForwardOptions opts;
  opts.masks = &masks;
  const Tensor3 masked = forward(m, tokens, opts);
  const Tensor3 oracle = forward(zero_columns(m, target, {1}), tokens);
  CHECK(max_rel_err(masked, oracle) < 1e-6);
}

TEST_CASE("forward: logits are deterministic") {
  const Model m = synthesize_model(tiny_config(77));
  Rng rng(1);
  const TokenBatch tokens = random_tokens(rng, 3, 6, m.cfg.vocab_size);
  const Tensor3 a = forward(m, tokens);
  const Tensor3 b = forward(m, tokens);
  CHECK(a.v == b.v);
}

TEST_CASE("forward: trace covers exactly the executed prunable targets") {
  const Model m = synthesize_model(tiny_config(13));
  Rng rng(2);
  const TokenBatch tokens = random_tokens(rng, 2, 3, m.cfg.vocab_size);
  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = true;
  forward(m, tokens, opts, &trace);

  CHECK(trace.x_int.size() == 4);
  for (const auto& t : m.prunable_targets()) {
    REQUIRE(trace.x_int.count(t.key()) == 1);
    const Tensor3& x = trace.x_int.at(t.key());
    CHECK(x.b == 2);
    CHECK(x.s == 3);
    CHECK(x.c == m.channel_count(t));
  }
  CHECK(trace.post_norm.size() == 2);
  CHECK(trace.post_norm.at(0).c == m.cfg.d_model);

  // partial window traces only the layers it ran
  Tensor3 h = embed_tokens(m, tokens);
  ForwardTrace partial;
  run_layers(m, h, 0, 1, opts, &partial);
  CHECK(partial.x_int.size() == 2);
  CHECK(partial.x_int.count(PrunableTarget{0, TargetKind::MlpDownProj}.key()) == 1);
}

TEST_CASE("forward: bad mask and bad tokens rejected") {
  const Model m = synthesize_model(tiny_config(4));
  TokenBatch tokens(1, 2);
  tokens.at(0, 0) = m.cfg.vocab_size;  // out of range
  CHECK_THROWS_AS(forward(m, tokens), std::invalid_argument);

  CHECK_THROWS_AS(compile_and_materialize(m, {0, TargetKind::MlpDownProj},
                                          {m.cfg.d_ff}, false),
                  std::invalid_argument);
  CHECK_THROWS_AS(compile_and_materialize(m, {0, TargetKind::AttnOProj}, {}, false),
                  std::invalid_argument);
}
