#include <doctest.h>

#include <cmath>

#include "aapp/flops.hpp"
#include "aapp/probe.hpp"
#include "aapp/rng.hpp"

using namespace aapp;

namespace {

ModelConfig probe_config(uint64_t seed, int layers = 3) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 32;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("token_importance: direct norm oracle") {
  Tensor3 hidden(1, 2, 2);
  hidden.row(0, 0)[0] = 3.0f;
  hidden.row(0, 0)[1] = 4.0f;
  // row (0,1) stays zero
  const auto scores = token_importance(hidden);
  CHECK(scores[0] == doctest::Approx(5.0));
  CHECK(scores[1] == doctest::Approx(0.0));
}

TEST_CASE("token_importance: homogeneous in scale, empty rejected") {
  Rng rng(3);
  Tensor3 hidden(2, 4, 8);
  for (auto& f : hidden.v) f = float(rng.uniform(-2.0, 2.0));
  const auto base = token_importance(hidden);
  Tensor3 doubled = hidden;
  for (auto& f : doubled.v) f *= 2.0f;
  const auto scaled = token_importance(doubled);
  for (size_t i = 0; i < base.size(); ++i) {
    CHECK(scaled[i] == doctest::Approx(2.0 * base[i]));
  }

  Tensor3 empty(1, 0, 8);
  CHECK_THROWS_AS(token_importance(empty), std::invalid_argument);
}

TEST_CASE("select_probe_tokens: sort-and-take oracle with order preserved") {
  const std::vector<double> scores{5.0, 0.0, 3.0};
  // ceil(0.34 * 3) = ceil(1.02) = 2 -> the two top-scoring positions {0, 2}
  const auto kept = select_probe_tokens_row(scores, 0.34);
  CHECK(kept == std::vector<int>{0, 2});

  CHECK(select_probe_tokens_row(scores, 1.0) == std::vector<int>{0, 1, 2});

  const std::vector<double> equal{1.0, 1.0, 1.0};
  CHECK(select_probe_tokens_row(equal, 2.0 / 3.0) == std::vector<int>{0, 1});

  CHECK_THROWS_AS(select_probe_tokens_row(scores, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(select_probe_tokens_row(scores, 1.5), std::invalid_argument);
}

TEST_CASE("run_probe: degenerate probe equals the full trace") {
  const Model m = synthesize_model(probe_config(11));
  Rng rng(4);
  TokenBatch tokens(2, 5);
  for (auto& id : tokens.ids) id = int(rng.below(32));

  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = true;
  forward(m, tokens, opts, &trace);

  std::vector<std::vector<int>> all_rows(2, std::vector<int>{0, 1, 2, 3, 4});
  const Tensor3 h = embed_tokens(m, tokens);
  const ProbeStates states = run_probe(m, h, all_rows, 0, m.cfg.num_layers);

  CHECK(states.energy.size() == trace.x_int.size());
  for (const auto& [key, x_int] : trace.x_int) {
    const ChannelEnergy expected = record_energy(x_int);
    REQUIRE(states.energy.count(key) == 1);
    const ChannelEnergy& got = states.energy.at(key);
    REQUIRE(got.size() == expected.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == expected[i]);
  }
}

TEST_CASE("run_probe: single-token probe energy is the squared X_int") {
  const Model m = synthesize_model(probe_config(17, 1));
  Rng rng(9);
  TokenBatch tokens(1, 4);
  for (auto& id : tokens.ids) id = int(rng.below(32));

  const Tensor3 h = embed_tokens(m, tokens);
  const ProbeStates states = run_probe(m, h, {{2}}, 0, 1);

  // oracle: run the same single token through the layer and square X_int
  Tensor3 single(1, 1, m.cfg.d_model);
  for (int j = 0; j < m.cfg.d_model; ++j) single.row(0, 0)[j] = h.at(0, 2, j);
  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = true;
  Tensor3 walked = single;
  run_layers(m, walked, 0, 1, opts, &trace);

  for (const auto& [key, x_int] : trace.x_int) {
    const ChannelEnergy expected = record_energy(x_int);
    const ChannelEnergy& got = states.energy.at(key);
    REQUIRE(got.size() == expected.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]));
  }
}

TEST_CASE("run_probe: zero-embedding token yields zero first-target energy") {
  Model m = synthesize_model(probe_config(23, 1));
  const int zero_tok = 3;
  for (int j = 0; j < m.cfg.d_model; ++j) m.embed.at(zero_tok, j) = 0.0f;

  TokenBatch tokens(1, 3);
  tokens.at(0, 0) = 1;
  tokens.at(0, 1) = zero_tok;
  tokens.at(0, 2) = 2;
  const Tensor3 h = embed_tokens(m, tokens);
  const ProbeStates states = run_probe(m, h, {{1}}, 0, 1);

  const ChannelEnergy& attn = states.energy.at(PrunableTarget{0, TargetKind::AttnOProj}.key());
  for (double e : attn) CHECK(e == doctest::Approx(0.0));
}

TEST_CASE("run_probe: window validation") {
  const Model m = synthesize_model(probe_config(2));
  const Tensor3 h(1, 2, m.cfg.d_model);
  CHECK_THROWS_AS(run_probe(m, h, {{0}}, 2, 5), std::invalid_argument);
  CHECK_THROWS_AS(run_probe(m, h, {{0}, {1}}, 0, 1), std::invalid_argument);  // rows != batch
}

TEST_CASE("probe: channel permutation equivariance of energies") {
  // permuting the d_ff channels of one layer (up rows + down columns)
  // permutes the probe energies of that target identically
  const ModelConfig cfg = probe_config(31, 1);
  const Model m = synthesize_model(cfg);

  Model permuted = m;
  std::vector<int> perm(static_cast<size_t>(cfg.d_ff));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = int(perm.size() - 1 - i);
  for (int c = 0; c < cfg.d_ff; ++c) {
    for (int j = 0; j < cfg.d_model; ++j) {
      permuted.layers[0].w_up.at(perm[size_t(c)], j) = m.layers[0].w_up.at(c, j);
      permuted.layers[0].w_down.at(j, perm[size_t(c)]) = m.layers[0].w_down.at(j, c);
    }
  }

  Rng rng(6);
  TokenBatch tokens(1, 4);
  for (auto& id : tokens.ids) id = int(rng.below(32));
  const std::vector<std::vector<int>> sel{{0, 1, 2, 3}};

  const auto base = run_probe(m, embed_tokens(m, tokens), sel, 0, 1);
  const auto perm_states = run_probe(permuted, embed_tokens(permuted, tokens), sel, 0, 1);

  const int key = PrunableTarget{0, TargetKind::MlpDownProj}.key();
  const ChannelEnergy& e0 = base.energy.at(key);
  const ChannelEnergy& e1 = perm_states.energy.at(key);
  for (int c = 0; c < cfg.d_ff; ++c) {
    CHECK(e1[size_t(perm[size_t(c)])] == doctest::Approx(e0[size_t(c)]));
  }
}

TEST_CASE("probe defaults cost under 15% of a dense pass on deep models") {
  // depth 4 / fraction 0.5 against a 16-layer stack
  ModelConfig cfg;
  cfg.num_layers = 16;
  cfg.num_heads = 4;
  cfg.d_model = 64;
  cfg.d_ff = 256;
  cfg.vocab_size = 256;
  cfg.seed = 1;
  const double dense = dense_flops(cfg, 1, false).dense_flops_per_token;
  const double probe = probe_overhead_flops_per_token(cfg, 12, 24, 4, false);
  CHECK(probe / dense < 0.15);
}

TEST_CASE("probe FLOPs are below the full pass whenever the probe is partial") {
  ModelConfig cfg = probe_config(1, 4);
  const double full = dense_flops(cfg, 1, false).dense_flops_per_token;
  // half the tokens, half the layers
  CHECK(probe_overhead_flops_per_token(cfg, 4, 8, 2, false) < full);
  // all tokens, fewer layers
  CHECK(probe_overhead_flops_per_token(cfg, 8, 8, 3, false) < full);
  // one layer short, all tokens
  CHECK(probe_overhead_flops_per_token(cfg, 8, 8, 4, false) < full);  // no head in probe
}
