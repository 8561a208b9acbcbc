// Command-line front end: run experiments from JSON configs, materialize
// synthetic task shards, rebuild reports from traces, and validate configs.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "cflag/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cflag::ParseError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw cflag::ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  return j;
}

// --out default: $CFLAG_OUT_ROOT/<config-stem>-out, falling back to the
// current directory as the root.
std::string default_out_dir(const std::string& config_path) {
  const char* root = std::getenv("CFLAG_OUT_ROOT");
  fs::path base = root && *root ? fs::path(root) : fs::path(".");
  return (base / (fs::path(config_path).stem().string() + "-out")).string();
}

void emit_error(const std::string& type, const std::string& message) {
  json err;
  err["error"] = {{"type", type}, {"message", message}};
  std::cout << err.dump(2) << "\n";
}

int run_command(const std::string& config_path, std::string out_dir, bool seed_set,
                std::uint64_t seed, int threads) {
  json raw = load_json(config_path);
  cflag::ExperimentConfig cfg = cflag::parse_config(raw);
  if (seed_set) cfg.seed = seed;
  if (out_dir.empty()) out_dir = default_out_dir(config_path);
  cflag::RunResult result;
  try {
    // the trace streams to disk as rounds finish; the rest follows at the end
    fs::create_directories(out_dir);
    std::ofstream trace(fs::path(out_dir) / cflag::kTraceFile);
    if (!trace) throw cflag::DataError("cannot write trace.csv in " + out_dir);
    bool header_written = false;
    cflag::RoundSink sink = [&](const cflag::RoundRecord& rec) {
      if (!header_written) {
        trace << cflag::trace_header_line(static_cast<int>(rec.acc.size())) << "\n";
        header_written = true;
      }
      trace << cflag::trace_row_line(rec) << "\n";
      trace.flush();
    };
    result = cflag::run_experiment(cfg, threads, sink);
    trace.close();
    if (!trace) throw cflag::DataError("write failed for trace.csv");
    cflag::write_artifacts(result, out_dir, /*include_trace=*/false);
  } catch (...) {
    // no partial artifacts on failure
    for (const char* f : {cflag::kTraceFile, cflag::kSummaryFile, cflag::kSnapshotFile,
                          cflag::kMatrixFile}) {
      std::error_code ec;
      fs::remove(fs::path(out_dir) / f, ec);
    }
    throw;
  }
  json out = cflag::summary_json(result);
  out["out_dir"] = out_dir;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int gen_data_command(const std::string& config_path, std::string out_dir) {
  cflag::ExperimentConfig cfg = cflag::parse_config(load_json(config_path));
  cflag::validate_config(cfg);
  if (out_dir.empty()) out_dir = default_out_dir(config_path);
  cflag::PreparedData data = cflag::prepare_data(cfg);
  fs::create_directories(out_dir);
  int files = 0;
  for (std::size_t task = 0; task < data.shards.size(); ++task) {
    for (std::size_t client = 0; client < data.shards[task].size(); ++client) {
      fs::path p = fs::path(out_dir) / ("task" + std::to_string(task) + "_client" +
                                        std::to_string(client) + ".csv");
      cflag::write_csv(data.shards[task][client], p.string(), /*header=*/true);
      ++files;
    }
  }
  json out;
  out["out_dir"] = out_dir;
  out["files"] = files;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int report_command(const std::string& run_dir, std::string out_dir) {
  if (out_dir.empty()) out_dir = run_dir;
  json metrics = cflag::make_report(run_dir, out_dir);
  metrics["out_dir"] = out_dir;
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

int validate_command(const std::string& config_path) {
  cflag::ExperimentConfig cfg = cflag::parse_config(load_json(config_path));
  auto notes = cflag::validate_config(cfg);
  json out;
  out["valid"] = true;
  out["notes"] = notes;
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"C-FLAG continual federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir;
  std::uint64_t seed = 0;
  int threads = 1;

  auto* run = app.add_subcommand("run", "execute a JSON experiment config");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "output directory (default $CFLAG_OUT_ROOT/<stem>-out)");
  auto* seed_opt = run->add_option("--seed", seed, "override the config seed");
  run->add_option("--threads", threads, "worker threads for client-parallel phases")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "materialize task shards to CSV");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required();
  gen->add_option("--out", out_dir, "output directory");

  auto* rep = app.add_subcommand("report", "recompute metrics and plot data from a run");
  rep->add_option("--dir", run_dir, "run output directory")->required();
  rep->add_option("--out", out_dir, "where to write plot data (default --dir)");

  auto* val = app.add_subcommand("validate", "check a config without running it");
  val->add_option("--config", config_path, "experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return run_command(config_path, out_dir, seed_opt->count() > 0, seed, threads);
    if (gen->parsed()) return gen_data_command(config_path, out_dir);
    if (rep->parsed()) return report_command(run_dir, out_dir);
    if (val->parsed()) return validate_command(config_path);
  } catch (const cflag::TraceError& e) {
    emit_error("TraceError", e.what());
    return 2;
  } catch (const cflag::ConfigError& e) {
    emit_error("ConfigError", e.what());
    return 1;
  } catch (const cflag::ParseError& e) {
    emit_error("ParseError", e.what());
    return 1;
  } catch (const cflag::DataError& e) {
    emit_error("DataError", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("Error", e.what());
    return 1;
  }
  return 1;
}
