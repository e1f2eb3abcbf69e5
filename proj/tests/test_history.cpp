#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "aapp/history.hpp"
#include "aapp/rng.hpp"

using namespace aapp;

namespace {

ModelConfig small_config(uint64_t seed) {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 12;
  c.vocab_size = 24;
  c.seed = seed;
  return c;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("record_energy: square-and-sum oracle") {
  // B=1, S=2, channel 0 = [1,2], channel 1 = [3,0]
  Tensor3 x(1, 2, 2);
  x.row(0, 0)[0] = 1.0f;
  x.row(0, 1)[0] = 2.0f;
  x.row(0, 0)[1] = 3.0f;
  x.row(0, 1)[1] = 0.0f;
  const ChannelEnergy e = record_energy(x);
  CHECK(e[0] == doctest::Approx(5.0));
  CHECK(e[1] == doctest::Approx(9.0));

  Tensor3 zero(2, 3, 4);
  for (double v : record_energy(zero)) CHECK(v == 0.0);

  Tensor3 negated = x;
  for (auto& f : negated.v) f = -f;
  CHECK(record_energy(negated) == e);
}

TEST_CASE("record_energy: additive over the batch dimension") {
  Rng rng(8);
  Tensor3 a(2, 3, 5), b(3, 3, 5);
  for (auto& f : a.v) f = float(rng.uniform(-2.0, 2.0));
  for (auto& f : b.v) f = float(rng.uniform(-2.0, 2.0));
  Tensor3 cat(5, 3, 5);
  std::copy(a.v.begin(), a.v.end(), cat.v.begin());
  std::copy(b.v.begin(), b.v.end(), cat.v.begin() + std::ptrdiff_t(a.v.size()));

  const auto ea = record_energy(a), eb = record_energy(b), ec = record_energy(cat);
  for (size_t i = 0; i < ec.size(); ++i) {
    CHECK(ec[i] == doctest::Approx(ea[i] + eb[i]).epsilon(1e-12));
  }
}

TEST_CASE("calibrate: store equals the mean batch energy; duplicates collapse") {
  const Model m = synthesize_model(small_config(41));
  Rng rng(2);
  std::vector<int> prompt(6);
  for (auto& id : prompt) id = int(rng.below(24));

  HistoryBank one, two;
  calibrate(m, {prompt}, StoreLabel::Benign, 4, one);
  calibrate(m, {prompt, prompt}, StoreLabel::Benign, 1, two);  // two identical batches

  for (const auto& t : m.prunable_targets()) {
    const auto& sa = one.at(t).benign;
    const auto& sb = two.at(t).benign;
    REQUIRE(sa.size() == sb.size());
    for (size_t i = 0; i < sa.size(); ++i) CHECK(sb[i] == doctest::Approx(sa[i]));
  }
  CHECK(two.at(m.prunable_targets()[0]).n_benign == 2);
}

TEST_CASE("calibrate: store matches an independently recomputed trace energy") {
  const Model m = synthesize_model(small_config(43));
  Rng rng(3);
  std::vector<std::vector<int>> prompts;
  for (int p = 0; p < 3; ++p) {
    std::vector<int> prompt(5);
    for (auto& id : prompt) id = int(rng.below(24));
    prompts.push_back(prompt);
  }
  HistoryBank bank;
  calibrate(m, prompts, StoreLabel::Harmful, 3, bank);

  // oracle: one batch of all three prompts, traced by hand
  TokenBatch batch(3, 5);
  for (int b = 0; b < 3; ++b) {
    for (int t = 0; t < 5; ++t) batch.at(b, t) = prompts[size_t(b)][size_t(t)];
  }
  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = true;
  forward(m, batch, opts, &trace);
  for (const auto& [key, x_int] : trace.x_int) {
    const ChannelEnergy expected = record_energy(x_int);
    const ChannelEnergy& got = bank.targets.at(key).harmful;
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]));
  }
}

TEST_CASE("calibrate: all three labels satisfy the completeness invariant") {
  const Model m = synthesize_model(small_config(44));
  std::vector<std::vector<int>> prompts{{1, 2, 3}, {4, 5, 6}};
  HistoryBank bank;
  CHECK_FALSE(bank.complete_for(m.prunable_targets()));
  calibrate(m, prompts, StoreLabel::General, 2, bank);
  calibrate(m, prompts, StoreLabel::Benign, 2, bank);
  CHECK_FALSE(bank.complete_for(m.prunable_targets()));
  calibrate(m, prompts, StoreLabel::Harmful, 2, bank);
  CHECK(bank.complete_for(m.prunable_targets()));

  CHECK_THROWS_AS(calibrate(m, {}, StoreLabel::General, 2, bank), std::invalid_argument);
}

TEST_CASE("refresh_general: EMA arithmetic and degenerate cases") {
  TargetStores ts;
  ts.general = {4.0, 0.0};

  RefreshPolicy exact{1, 1.0};
  refresh_general(ts, {1.0, 2.0}, exact);
  CHECK(ts.general == ChannelEnergy{1.0, 2.0});  // alpha=1 tracks the live energy

  RefreshPolicy frozen{1, 0.0};
  refresh_general(ts, {9.0, 9.0}, frozen);
  CHECK(ts.general == ChannelEnergy{1.0, 2.0});  // alpha=0 never changes

  ts.general = {4.0, 0.0};
  RefreshPolicy half{20, 0.5};
  refresh_general(ts, {0.0, 4.0}, half);
  CHECK(ts.general[0] == doctest::Approx(2.0));
  CHECK(ts.general[1] == doctest::Approx(2.0));

  // benign/harmful untouched by refresh
  CHECK(ts.benign.empty());
  CHECK(ts.harmful.empty());

  CHECK_THROWS_AS(refresh_general(ts, {1.0}, half), std::invalid_argument);
}

TEST_CASE("stores stay nonnegative under calibrate/refresh sequences") {
  const Model m = synthesize_model(small_config(45));
  std::vector<std::vector<int>> prompts{{0, 1, 2, 3}, {5, 6, 7, 8}, {9, 10, 11, 12}};
  HistoryBank bank;
  calibrate(m, prompts, StoreLabel::General, 2, bank);
  RefreshPolicy pol{1, 0.3};
  Rng rng(12);
  for (int round = 0; round < 5; ++round) {
    for (auto& [key, ts] : bank.targets) {
      ChannelEnergy live(ts.general.size());
      for (auto& v : live) v = rng.uniform(0.0, 3.0);
      refresh_general(ts, live, pol);
      for (double v : ts.general) CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("bank serialization round-trips value-exact and byte-stable") {
  const Model m = synthesize_model(small_config(46));
  std::vector<std::vector<int>> prompts{{1, 2, 3, 4}, {5, 6, 7, 8}};
  HistoryBank bank;
  for (auto label : {StoreLabel::General, StoreLabel::Benign, StoreLabel::Harmful}) {
    calibrate(m, prompts, label, 2, bank);
  }
  bank.config_hash = 0xdeadbeefcafef00dull;

  const std::string p1 = temp_path("aapp_bank_a.bin");
  const std::string p2 = temp_path("aapp_bank_b.bin");
  save_bank(bank, p1);
  const HistoryBank loaded = load_bank(p1);

  CHECK(loaded.config_hash == bank.config_hash);
  REQUIRE(loaded.targets.size() == bank.targets.size());
  for (const auto& [key, ts] : bank.targets) {
    const TargetStores& lt = loaded.targets.at(key);
    CHECK(lt.general == ts.general);  // exact doubles
    CHECK(lt.benign == ts.benign);
    CHECK(lt.harmful == ts.harmful);
    CHECK(lt.n_general == ts.n_general);
    CHECK(lt.n_benign == ts.n_benign);
    CHECK(lt.n_harmful == ts.n_harmful);
  }

  save_bank(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  std::remove(p1.c_str());
  std::remove(p2.c_str());

  CHECK_THROWS_AS(load_bank(temp_path("aapp_missing.bin")), std::runtime_error);
}
