#include "aapp/commands.hpp"

#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "aapp/rng.hpp"

namespace aapp {

const char* const kDecisionsCsvHeader =
    "batch,layer,kind,gate_evaluated,kl_harm,kl_safe,gate_fired,k,k_align,kept_hash";
const char* const kSweepCsvHeader =
    "method,prune_ratio,seed,refusal_rate_harmful,f1,accuracy,far,mean_toxicity,"
    "gflops_per_token";
const char* const kReportCsvHeader =
    "method,prune_ratio,n,refusal_mean,refusal_stderr,f1_mean,f1_stderr,accuracy_mean,"
    "accuracy_stderr,far_mean,far_stderr,toxicity_mean,toxicity_stderr,gflops_mean,"
    "gflops_stderr";

namespace {

// shortest round-trip decimal form; keeps CSV/JSON outputs byte-stable
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char b2[40];
      std::snprintf(b2, sizeof(b2), "%.*g", prec, v);
      std::sscanf(b2, "%lf", &back);
      if (back == v) return b2;
    }
  }
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::unique_ptr<ToxicityScorer> make_scorer(const RunConfig& cfg,
                                            const SyntheticWorld& world) {
  if (cfg.toxicity_scorer == "remote") {
    return std::make_unique<RemoteScorer>(cfg.remote);
  }
  return std::make_unique<LexiconScorer>(world.toxic_tokens);
}

std::vector<PromptRecord> eval_prompts_for(const RunConfig& cfg,
                                           const SyntheticWorld& world) {
  if (!cfg.corpus_path.empty()) return load_prompt_corpus(cfg.corpus_path);
  return world.make_eval_prompts();
}

HistoryBank calibrate_all(const RunConfig& cfg, const SyntheticWorld& world) {
  HistoryBank bank;
  for (StoreLabel label :
       {StoreLabel::General, StoreLabel::Benign, StoreLabel::Harmful}) {
    const auto prompts = world.make_calibration_prompts(label);
    if (prompts.empty()) {
      throw std::runtime_error(std::string("calibrate: missing ") +
                               store_label_name(label) + " prompt set");
    }
    calibrate(world.model, prompts, label, cfg.batch_size, bank);
  }
  bank.config_hash = bank_binding_hash(cfg);
  return bank;
}

ExperimentResult run_one(const RunConfig& cfg, const SyntheticWorld& world,
                         const HistoryBank& bank) {
  auto scorer = make_scorer(cfg, world);
  const auto prompts = eval_prompts_for(cfg, world);
  return run_experiment(world, bank, to_experiment_settings(cfg), prompts, *scorer,
                        Rng(cfg.seed).derive("run"));
}

void write_decisions_csv(const std::string& path, const nlohmann::json& cfg_json,
                         const std::vector<DecisionRow>& rows) {
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "# format_version=1\n";
  os << "# config=" << cfg_json.dump() << "\n";
  os << kDecisionsCsvHeader << "\n";
  for (const auto& r : rows) {
    os << r.batch << ',' << r.target.layer << ',' << target_kind_name(r.target.kind) << ','
       << (r.gate_evaluated ? 1 : 0) << ',';
    if (r.gate_evaluated) {
      os << fmt(r.kl_harm) << ',' << fmt(r.kl_safe);
    } else {
      os << ',';
    }
    os << ',' << (r.gate_fired ? 1 : 0) << ',' << r.k << ',' << r.k_align << ','
       << hex64(r.kept_hash) << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

nlohmann::json metrics_to_json(const MetricsReport& m) {
  return {
      {"refusal_rate_harmful", m.refusal_rate_harmful},
      {"f1", m.f1},
      {"accuracy", m.accuracy},
      {"far", m.far},
      {"mean_toxicity", m.mean_toxicity},
      {"gflops_per_token", m.gflops_per_token},
      {"method", m.method},
      {"prune_ratio", m.prune_ratio},
  };
}

nlohmann::json breakdown_to_json(const FlopsBreakdown& b) {
  return {
      {"attn_proj", b.attn_proj},
      {"attn_scores", b.attn_scores},
      {"mlp", b.mlp},
      {"head", b.head},
  };
}

}  // namespace

void cmd_calibrate(const RunConfig& cfg, const std::string& bank_path, std::ostream& log) {
  validate_run_config(cfg);
  const SyntheticWorld world =
      build_synthetic_world(resolved_world_config(cfg), cfg.model, cfg.prune);
  const HistoryBank bank = calibrate_all(cfg, world);
  ensure_parent_dir(bank_path);
  save_bank(bank, bank_path);

  log << "bank written to " << bank_path << " (binding hash " << hex64(bank.config_hash)
      << ")\n";
  for (const auto& [key, ts] : bank.targets) {
    const PrunableTarget t = PrunableTarget::from_key(key);
    log << "  layer " << t.layer << ' ' << target_kind_name(t.kind) << ": C="
        << ts.general.size() << " samples general/benign/harmful = " << ts.n_general << '/'
        << ts.n_benign << '/' << ts.n_harmful << "\n";
  }
}

void cmd_run(const RunConfig& cfg, const std::string& bank_path,
             const std::string& metrics_json_path, const std::string& decisions_csv_path,
             std::ostream& log) {
  validate_run_config(cfg);
  const SyntheticWorld world =
      build_synthetic_world(resolved_world_config(cfg), cfg.model, cfg.prune);

  HistoryBank bank;
  if (cfg.method == Method::PP || cfg.method == Method::AAPP) {
    bank = load_bank(bank_path);
    if (bank.config_hash != bank_binding_hash(cfg)) {
      throw std::runtime_error(
          "cmd_run: bank/config mismatch — the bank was calibrated for a different "
          "model/seed/world");
    }
  }

  const ExperimentResult res = run_one(cfg, world, bank);

  const LayerRange range = prunable_layer_range(cfg.prune, cfg.model.resolved().num_layers);
  nlohmann::json out = {
      {"format_version", 1},
      {"config", run_config_to_json(cfg)},
      {"metrics", metrics_to_json(res.metrics)},
      {"flops",
       {{"dense_gflops_per_token", res.flops.dense_flops_per_token / 1e9},
        {"pruned_gflops_per_token", res.flops.pruned_flops_per_token / 1e9},
        {"probe_overhead_gflops_per_token", res.flops.probe_overhead_flops_per_token / 1e9},
        {"dense_breakdown_flops", breakdown_to_json(res.flops.dense)},
        {"pruned_breakdown_flops", breakdown_to_json(res.flops.pruned)}}},
      {"counts",
       {{"tp", res.counts.tp}, {"fn", res.counts.fn}, {"fp", res.counts.fp},
        {"tn", res.counts.tn}}},
      {"resolved",
       {{"prunable_layer_begin", range.begin},
        {"prunable_layer_end", range.end},
        {"probe_start_layer",
         cfg.probe.start_layer >= 0 ? cfg.probe.start_layer : range.begin}}},
      {"logits_hash", hex64(res.logits_hash)},
  };

  ensure_parent_dir(metrics_json_path);
  std::ofstream os(metrics_json_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + metrics_json_path);
  os << out.dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + metrics_json_path);

  write_decisions_csv(decisions_csv_path, run_config_to_json(cfg), res.rows);

  log << "method=" << res.metrics.method << " r=" << res.metrics.prune_ratio
      << " refusal=" << res.metrics.refusal_rate_harmful << " f1=" << res.metrics.f1
      << " accuracy=" << res.metrics.accuracy << " far=" << res.metrics.far
      << " toxicity=" << res.metrics.mean_toxicity
      << " gflops/token=" << res.metrics.gflops_per_token << "\n";
}

void cmd_sweep(const RunConfig& base_cfg, const std::vector<double>& ratios,
               const std::vector<Method>& methods, const std::vector<uint64_t>& seeds,
               const std::string& csv_path, std::ostream& log) {
  if (ratios.empty() || methods.empty() || seeds.empty()) {
    throw std::invalid_argument("cmd_sweep: ratios, methods and seeds must be nonempty");
  }
  validate_run_config(base_cfg);

  ensure_parent_dir(csv_path);
  std::ofstream os(csv_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + csv_path);
  os << "# format_version=1\n";
  os << "# config=" << run_config_to_json(base_cfg).dump() << "\n";
  os << kSweepCsvHeader << "\n";

  try {
    for (uint64_t seed : seeds) {
      RunConfig seed_cfg = base_cfg;
      seed_cfg.seed = seed;
      const SyntheticWorld world =
          build_synthetic_world(resolved_world_config(seed_cfg), seed_cfg.model,
                                seed_cfg.prune);
      const HistoryBank bank = calibrate_all(seed_cfg, world);
      for (Method method : methods) {
        for (double r : ratios) {
          RunConfig cfg = seed_cfg;
          cfg.method = method;
          cfg.prune.prune_ratio = r;
          validate_run_config(cfg);
          const ExperimentResult res = run_one(cfg, world, bank);
          os << method_name(method) << ',' << fmt(r) << ',' << seed << ','
             << fmt(res.metrics.refusal_rate_harmful) << ',' << fmt(res.metrics.f1) << ','
             << fmt(res.metrics.accuracy) << ',' << fmt(res.metrics.far) << ','
             << fmt(res.metrics.mean_toxicity) << ','
             << fmt(res.metrics.gflops_per_token) << "\n";
          os.flush();
          log << "sweep cell done: method=" << method_name(method) << " r=" << r
              << " seed=" << seed << "\n";
        }
      }
    }
  } catch (...) {
    os << "# INCOMPLETE: sweep aborted before all cells finished\n";
    os.flush();
    throw;
  }
  if (!os) throw std::runtime_error("write failed: " + csv_path);
}

void cmd_report(const std::string& sweep_csv_path, const std::string& out_csv_path,
                std::ostream& log) {
  std::ifstream is(sweep_csv_path);
  if (!is) throw std::runtime_error("cmd_report: cannot open " + sweep_csv_path);

  struct Cell {
    std::vector<std::array<double, 6>> rows;  // refusal,f1,acc,far,tox,gflops
  };
  std::map<std::pair<std::string, double>, Cell> cells;

  std::string line;
  std::string config_comment;
  int line_no = 0;
  bool saw_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# INCOMPLETE", 0) == 0) {
        throw std::runtime_error("cmd_report: input sweep is marked incomplete");
      }
      if (line.rfind("# config=", 0) == 0) config_comment = line;
      continue;
    }
    if (!saw_header) {
      if (line != kSweepCsvHeader) {
        throw std::runtime_error("cmd_report: line " + std::to_string(line_no) +
                                 ": unexpected header");
      }
      saw_header = true;
      continue;
    }
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 9) {
      throw std::runtime_error("cmd_report: line " + std::to_string(line_no) +
                               ": expected 9 fields, got " + std::to_string(fields.size()));
    }
    try {
      const std::string& method = fields[0];
      if (!method_from_name(method)) throw std::invalid_argument("unknown method");
      const double ratio = std::stod(fields[1]);
      (void)std::stoull(fields[2]);
      std::array<double, 6> vals{};
      for (int i = 0; i < 6; ++i) vals[size_t(i)] = std::stod(fields[size_t(i + 3)]);
      cells[{method, ratio}].rows.push_back(vals);
    } catch (const std::exception&) {
      throw std::runtime_error("cmd_report: line " + std::to_string(line_no) +
                               ": malformed row");
    }
  }
  if (!saw_header || cells.empty()) {
    throw std::runtime_error("cmd_report: no data rows in " + sweep_csv_path);
  }

  ensure_parent_dir(out_csv_path);
  std::ofstream os(out_csv_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + out_csv_path);
  os << "# format_version=1\n";
  if (!config_comment.empty()) os << config_comment << "\n";
  os << kReportCsvHeader << "\n";
  for (const auto& [key, cell] : cells) {
    const size_t n = cell.rows.size();
    std::array<double, 6> mean{}, err{};
    for (const auto& row : cell.rows) {
      for (int i = 0; i < 6; ++i) mean[size_t(i)] += row[size_t(i)];
    }
    for (auto& v : mean) v /= double(n);
    if (n > 1) {
      for (const auto& row : cell.rows) {
        for (int i = 0; i < 6; ++i) {
          const double d = row[size_t(i)] - mean[size_t(i)];
          err[size_t(i)] += d * d;
        }
      }
      for (auto& v : err) v = std::sqrt(v / double(n - 1) / double(n));
    }
    os << key.first << ',' << fmt(key.second) << ',' << n;
    for (int i = 0; i < 6; ++i) {
      os << ',' << fmt(mean[size_t(i)]) << ',' << fmt(err[size_t(i)]);
    }
    os << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + out_csv_path);
  log << "report written to " << out_csv_path << " (" << cells.size() << " cells)\n";
}

}  // namespace aapp
