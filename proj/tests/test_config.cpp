#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "aapp/commands.hpp"
#include "aapp/config.hpp"

using namespace aapp;

namespace {

std::string temp_file(const char* name, const std::string& content) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream os(path);
  os << content;
  return path;
}

}  // namespace

TEST_CASE("config: defaults validate and round-trip through JSON") {
  const RunConfig cfg = default_run_config();
  validate_run_config(cfg);
  const nlohmann::json j = run_config_to_json(cfg);
  const RunConfig back = parse_run_config(j);
  CHECK(run_config_to_json(back) == j);
  CHECK(back.model.num_layers == cfg.model.num_layers);
  CHECK(back.prune.prune_ratio == cfg.prune.prune_ratio);
}

TEST_CASE("config: unknown keys are hard errors") {
  nlohmann::json j = run_config_to_json(default_run_config());
  j["typo_key"] = 1;
  CHECK_THROWS_WITH_AS(parse_run_config(j), doctest::Contains("unknown key 'typo_key'"),
                       std::invalid_argument);

  nlohmann::json nested = run_config_to_json(default_run_config());
  nested["prune"]["prune_ration"] = 0.5;
  CHECK_THROWS_WITH_AS(parse_run_config(nested),
                       doctest::Contains("unknown key 'prune.prune_ration'"),
                       std::invalid_argument);
}

TEST_CASE("config: validation rejects out-of-range values") {
  RunConfig cfg = default_run_config();
  cfg.prune.prune_ratio = 1.0;
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);

  cfg = default_run_config();
  cfg.probe.token_keep_fraction = 0.0;
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);

  cfg = default_run_config();
  cfg.model.num_heads = 3;  // 64 % 3 != 0
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);

  cfg = default_run_config();
  cfg.probe.probe_depth = 100;
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);

  cfg = default_run_config();
  cfg.probe.start_layer = 3;  // past the first prunable layer (1 at L=8)
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);

  cfg = default_run_config();
  cfg.toxicity_scorer = "remote";  // no url
  CHECK_THROWS_AS(validate_run_config(cfg), std::invalid_argument);
}

TEST_CASE("config: file loading with overrides") {
  const std::string path = temp_file("aapp_cfg.json", R"({
    "seed": 42,
    "model": {"num_layers": 8, "num_heads": 4, "d_model": 64, "d_ff": 256, "vocab_size": 256},
    "prune": {"prune_ratio": 0.15}
  })");
  const RunConfig cfg =
      load_run_config(path, {"prune.prune_ratio=0.45", "method=\"PP\"", "seed=7"});
  CHECK(cfg.seed == 7);
  CHECK(cfg.method == Method::PP);
  CHECK(cfg.prune.prune_ratio == 0.45);
  CHECK(cfg.model.num_layers == 8);
  std::filesystem::remove(path);

  CHECK_THROWS(load_run_config("/nonexistent/config.json", {}));
  CHECK_THROWS(load_run_config("", {"bad_override"}));
}

TEST_CASE("config: derivation tree gives distinct labeled sub-seeds") {
  const RunConfig cfg = default_run_config();
  const auto world = resolved_world_config(cfg);
  CHECK(world.seed != cfg.seed);
  CHECK(world.seed == Rng(cfg.seed).derive("world").seed());
  CHECK(Rng(cfg.seed).derive("weights").seed() != Rng(cfg.seed).derive("world").seed());

  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  CHECK(resolved_world_config(other).seed != world.seed);
  CHECK(bank_binding_hash(other) != bank_binding_hash(cfg));
}

TEST_CASE("csv headers are pinned") {
  CHECK(std::string(kDecisionsCsvHeader) ==
        "batch,layer,kind,gate_evaluated,kl_harm,kl_safe,gate_fired,k,k_align,kept_hash");
  CHECK(std::string(kSweepCsvHeader) ==
        "method,prune_ratio,seed,refusal_rate_harmful,f1,accuracy,far,mean_toxicity,"
        "gflops_per_token");
  CHECK(std::string(kReportCsvHeader) ==
        "method,prune_ratio,n,refusal_mean,refusal_stderr,f1_mean,f1_stderr,accuracy_mean,"
        "accuracy_stderr,far_mean,far_stderr,toxicity_mean,toxicity_stderr,gflops_mean,"
        "gflops_stderr");
}

TEST_CASE("cmd_report: aggregation oracle and malformed input errors") {
  const std::string sweep = temp_file("aapp_sweep.csv",
                                      std::string("# format_version=1\n") +
                                          kSweepCsvHeader +
                                          "\n"
                                          "PP,0.3,1,0.4,0.5,0.6,0.6,0.1,1.5\n"
                                          "PP,0.3,2,0.6,0.5,0.6,0.4,0.1,1.5\n"
                                          "AAPP,0.3,1,0.9,0.8,0.8,0.1,0.05,1.5\n");
  const auto out = (std::filesystem::temp_directory_path() / "aapp_report.csv").string();
  std::ostringstream log;
  cmd_report(sweep, out, log);

  std::ifstream is(out);
  std::string header, line1, line2;
  std::getline(is, header);  // format_version comment
  std::getline(is, header);
  std::getline(is, line1);
  std::getline(is, line2);
  CHECK(header == kReportCsvHeader);
  auto fields = [](const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) out.push_back(f);
    return out;
  };
  // two-seed PP cell: refusal mean 0.5, stderr = stddev(0.4,0.6)/sqrt(2) = 0.1
  const auto pp = fields(line2);
  REQUIRE(pp.size() == 15);
  CHECK(pp[0] == "PP");
  CHECK(pp[2] == "2");
  CHECK(std::stod(pp[3]) == doctest::Approx(0.5));
  CHECK(std::stod(pp[4]) == doctest::Approx(0.1));
  // single-seed AAPP cell: means equal inputs, stderr 0
  const auto aapp = fields(line1);
  CHECK(aapp[0] == "AAPP");
  CHECK(aapp[2] == "1");
  CHECK(std::stod(aapp[3]) == doctest::Approx(0.9));
  CHECK(std::stod(aapp[4]) == 0.0);

  const std::string bad = temp_file("aapp_sweep_bad.csv",
                                    std::string(kSweepCsvHeader) +
                                        "\nPP,0.3,1,not_a_number,0,0,0,0,0\n");
  CHECK_THROWS_WITH_AS(cmd_report(bad, out, log), doctest::Contains("line 2"),
                       std::runtime_error);

  const std::string empty = temp_file("aapp_sweep_empty.csv", "");
  CHECK_THROWS_AS(cmd_report(empty, out, log), std::runtime_error);

  std::filesystem::remove(sweep);
  std::filesystem::remove(bad);
  std::filesystem::remove(empty);
  std::filesystem::remove(out);
}
