#include "cflag/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cflag/metrics.hpp"
#include "test_util.hpp"

using namespace cflag;
namespace fs = std::filesystem;

namespace {

nlohmann::json base_config_json() {
  return nlohmann::json{
      {"schema_version", 1},
      {"algorithm", "cflag-fixed"},
      {"seed", 3},
      {"model",
       {{"kind", "multinomial-logistic"}, {"input_dim", 2}, {"num_classes", 4}, {"l2_coeff", 0.001}}},
      {"tasks",
       {{"type", "split-gaussians"},
        {"num_tasks", 2},
        {"classes_per_task", 2},
        {"dim", 2},
        {"n_per_class", 40},
        {"separation", 4.0}}},
      {"partition", {{"clients", 3}, {"zeta", 0.5}}},
      {"rounds_per_task", 4},
      {"local_epochs", 2},
      {"alpha", 0.05},
      {"beta", 0.05},
      {"smoothness", 5.0},
      {"memory", {{"capacity_per_task", 10}, {"policy", "class-balanced"}}},
      {"adaptation_case", "average"},
      {"test_fraction", 0.2}};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string trace_as_string(const RunResult& r) {
  const std::string path = testing::TempDir() + "cflag_tmp_trace.csv";
  write_trace_csv(r, path);
  return slurp(path);
}

}  // namespace

TEST(Metrics, AvgAccuracyHandCases) {
  AccuracyMatrix m(1);
  m.at(0, 0) = 0.9;
  EXPECT_DOUBLE_EQ(avg_accuracy(m, 1), 0.9);

  AccuracyMatrix m2(2);
  m2.at(1, 0) = 0.9;
  m2.at(1, 1) = 0.7;
  EXPECT_DOUBLE_EQ(avg_accuracy(m2, 2), 0.8);

  AccuracyMatrix m3(2);
  EXPECT_THROW(avg_accuracy(m3, 2), ConfigError);
}

TEST(Metrics, ForgettingHandCases) {
  AccuracyMatrix m(3);
  m.at(0, 0) = 0.9;
  m.at(1, 1) = 0.8;
  m.at(2, 0) = 0.7;
  m.at(2, 1) = 0.6;
  m.at(2, 2) = 0.95;
  EXPECT_NEAR(forgetting(m, 3), 0.2, 1e-15);

  AccuracyMatrix same(2);
  same.at(0, 0) = 0.8;
  same.at(1, 0) = 0.8;
  same.at(1, 1) = 0.9;
  EXPECT_DOUBLE_EQ(forgetting(same, 2), 0.0);

  AccuracyMatrix negative(2);
  negative.at(0, 0) = 0.5;
  negative.at(1, 0) = 0.7;  // backward transfer
  negative.at(1, 1) = 0.9;
  EXPECT_LT(forgetting(negative, 2), 0.0);

  EXPECT_THROW(forgetting(negative, 1), ConfigError);
}

TEST(Metrics, RecomputeFromExportedMatrixCsv) {
  AccuracyMatrix m(2);
  m.at(0, 0) = 0.875;
  m.at(1, 0) = 0.625;
  m.at(1, 1) = 0.75;
  const std::string path = testing::TempDir() + "cflag_matrix.csv";
  write_matrix_csv(m, path);
  AccuracyMatrix back = read_matrix_csv(path);
  EXPECT_DOUBLE_EQ(avg_accuracy(back, 2), avg_accuracy(m, 2));
  EXPECT_DOUBLE_EQ(forgetting(back, 2), forgetting(m, 2));
}

TEST(Config, ParseAndSnapshotRoundTrip) {
  ExperimentConfig cfg = parse_config(base_config_json());
  EXPECT_EQ(cfg.algorithm, Algorithm::CflagFixed);
  EXPECT_EQ(cfg.clients, 3);
  EXPECT_EQ(cfg.memory_policy, MemoryPolicy::ClassBalanced);
  ExperimentConfig again = parse_config(config_snapshot(cfg));
  EXPECT_EQ(config_snapshot(again).dump(), config_snapshot(cfg).dump());
}

TEST(Config, RatePreconditionRejection) {
  auto j = base_config_json();
  j["alpha"] = 0.5;  // limit is 2/(L(1+m)) = 0.4 at L = 5, m = 0
  ExperimentConfig cfg = parse_config(j);
  try {
    validate_config(cfg);
    FAIL() << "expected rejection";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("alpha < 2/(L*(1+m))"), std::string::npos);
  }
}

TEST(Config, AdaptiveRequiresEqualRates) {
  auto j = base_config_json();
  j["algorithm"] = "cflag-adaptive";
  j["beta"] = 0.04;
  EXPECT_THROW(validate_config(parse_config(j)), ConfigError);
  j["beta"] = 0.05;
  EXPECT_NO_THROW(validate_config(parse_config(j)));
}

TEST(Config, UnknownFieldsRejected) {
  auto j = base_config_json();
  j["algorithm"] = "sgd";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = base_config_json();
  j.erase("alpha");
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(PrepareData, SplitAndShardsPartitionTheTask) {
  ExperimentConfig cfg = parse_config(base_config_json());
  PreparedData data = prepare_data(cfg);
  ASSERT_EQ(data.stream.tasks.size(), 2u);
  for (int task = 0; task < 2; ++task) {
    int total = data.test_pools[task].rows();
    EXPECT_EQ(total, static_cast<int>(data.stream.tasks[task].rows() * cfg.test_fraction));
    for (const auto& shard : data.shards[task]) {
      EXPECT_GE(shard.rows(), 1);
      total += shard.rows();
    }
    EXPECT_EQ(total, data.stream.tasks[task].rows());
  }
}

TEST(RunExperiment, TraceShapeAndMatrixPopulation) {
  ExperimentConfig cfg = parse_config(base_config_json());
  RunResult r = run_experiment(cfg);
  ASSERT_EQ(r.trace.size(), 8u);
  for (std::size_t t = 0; t < r.trace.size(); ++t) {
    EXPECT_EQ(r.trace[t].rep.t, static_cast<int>(t));
    for (double a : r.trace[t].acc) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
  EXPECT_FALSE(std::isnan(r.matrix.at(0, 0)));
  EXPECT_FALSE(std::isnan(r.matrix.at(1, 0)));
  EXPECT_FALSE(std::isnan(r.matrix.at(1, 1)));
  EXPECT_TRUE(std::isnan(r.matrix.at(0, 1)));  // never trained, never read
  // task-0 rounds carry no memory diagnostics
  EXPECT_EQ(r.trace[0].rep.bias_m_hat, 0.0);
  EXPECT_FALSE(r.trace[0].rep.overfit_B.has_value());
  EXPECT_TRUE(r.trace[4].rep.overfit_B.has_value());
}

TEST(RunExperiment, FedtrackEqualsAlphaZeroedCflag) {
  auto j = base_config_json();
  j["algorithm"] = "fedtrack";
  RunResult tracked = run_experiment(parse_config(j));
  j["algorithm"] = "cflag-fixed";
  j["alpha"] = 0.0;
  RunResult zeroed = run_experiment(parse_config(j));
  EXPECT_EQ(trace_as_string(tracked), trace_as_string(zeroed));
  EXPECT_EQ(tracked.final_params, zeroed.final_params);
}

TEST(RunExperiment, FineFlMatchesPlainLocalStepsPlusAveraging) {
  auto j = base_config_json();
  j["algorithm"] = "fine-fl";
  j["tasks"]["num_tasks"] = 1;
  j["model"]["num_classes"] = 2;
  j["rounds_per_task"] = 3;
  j["local_epochs"] = 3;
  ExperimentConfig cfg = parse_config(j);
  RunResult r = run_experiment(cfg);

  PreparedData data = prepare_data(cfg);
  double total = 0.0;
  for (const auto& shard : data.shards[0]) total += shard.rows();
  Vec x_round = zeros(cfg.model.param_dim());
  for (int t = 0; t < 3; ++t) {
    Vec x_next = zeros(cfg.model.param_dim());
    for (const auto& shard : data.shards[0]) {
      Vec x = x_round;
      for (int k = 0; k < 3; ++k) axpy(-cfg.beta, grad(cfg.model, x, shard), x);
      axpy(shard.rows() / total, x, x_next);
    }
    x_round = x_next;
  }
  EXPECT_LE(rel_diff(r.final_params, x_round), 1e-12);
}

TEST(RunExperiment, ReproducibleAcrossRunsAndThreadCounts) {
  ExperimentConfig cfg = parse_config(base_config_json());
  RunResult a = run_experiment(cfg, 1);
  RunResult b = run_experiment(cfg, 1);
  RunResult c = run_experiment(cfg, 4);
  EXPECT_EQ(a.final_params, b.final_params);
  EXPECT_EQ(a.final_params, c.final_params);
  EXPECT_EQ(trace_as_string(a), trace_as_string(b));
  EXPECT_EQ(trace_as_string(a), trace_as_string(c));
}

TEST(RunExperiment, MemoryMinibatchCoveringBufferChangesNothing) {
  auto j = base_config_json();
  RunResult full = run_experiment(parse_config(j));
  j["memory"]["minibatch"] = 100000;  // covers any buffer, keeps row order
  RunResult covered = run_experiment(parse_config(j));
  EXPECT_EQ(trace_as_string(full), trace_as_string(covered));
  j["memory"]["minibatch"] = 3;  // genuine sub-sampling changes the memory gradient
  RunResult small = run_experiment(parse_config(j));
  EXPECT_NE(trace_as_string(full), trace_as_string(small));
}

TEST(MemoryBatch, SampleIsUniformSubsetWithoutReplacement) {
  Rng rng({77, 1});
  auto past = testutil::random_dataset(rng, 40, 2, 2);
  Rng mem({77, 2});
  RingBuffer buf = build_memory(past, 40, MemoryPolicy::Uniform, mem);
  Rng pick({77, 3});
  Dataset batch = memory_batch(buf, 10, pick);
  EXPECT_EQ(batch.rows(), 10);
  std::multiset<double> seen;
  for (int r = 0; r < batch.rows(); ++r) seen.insert(batch.row(r)[0]);
  EXPECT_EQ(seen.size(), 10u);  // without replacement: all rows distinct
  for (double v : seen) {
    bool found = false;
    for (int r = 0; r < past.rows(); ++r) found |= past.row(r)[0] == v;
    EXPECT_TRUE(found);
  }
}

TEST(RunExperiment, PerTaskRateOverridesApplyFromTheirTask) {
  auto j = base_config_json();
  RunResult base = run_experiment(parse_config(j));
  j["per_task_rates"] = nlohmann::json::array({{{"task", 1}, {"alpha", 0.02}, {"beta", 0.02}}});
  RunResult overridden = run_experiment(parse_config(j));
  for (int t = 0; t < 4; ++t)  // task-0 rounds untouched
    EXPECT_EQ(trace_row_line(base.trace[t]), trace_row_line(overridden.trace[t]));
  bool differs = false;
  for (int t = 4; t < 8; ++t)
    differs |= trace_row_line(base.trace[t]) != trace_row_line(overridden.trace[t]);
  EXPECT_TRUE(differs);
}

TEST(RunExperiment, RegressionModelRunsWithNullMetrics) {
  auto j = base_config_json();
  j["algorithm"] = "fedtrack";
  j["model"] = {{"kind", "linear-mse"}, {"input_dim", 2}, {"num_classes", 1}, {"l2_coeff", 0.01}};
  ExperimentConfig cfg = parse_config(j);
  RunResult r = run_experiment(cfg);
  EXPECT_FALSE(r.classification);
  EXPECT_EQ(r.trace.size(), 8u);
  for (double a : r.trace.back().acc) EXPECT_TRUE(std::isnan(a));
  nlohmann::json summary = summary_json(r);
  EXPECT_TRUE(summary.at("avg_accuracy").is_null());
  EXPECT_TRUE(summary.at("forgetting").is_null());
  const std::string dir = testing::TempDir() + "cflag_regression_run";
  fs::remove_all(dir);
  write_artifacts(r, dir);
  nlohmann::json metrics = make_report(dir, dir);
  EXPECT_TRUE(metrics.at("avg_accuracy").is_null());
}

TEST(Artifacts, WriteReadReportCycle) {
  ExperimentConfig cfg = parse_config(base_config_json());
  RunResult r = run_experiment(cfg);
  const std::string dir = testing::TempDir() + "cflag_run_artifacts";
  fs::remove_all(dir);
  write_artifacts(r, dir);
  for (const char* f : {kTraceFile, kSummaryFile, kSnapshotFile, kMatrixFile})
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;

  TraceData trace = read_trace((fs::path(dir) / kTraceFile).string());
  EXPECT_EQ(trace.rows.size(), 8u);
  EXPECT_EQ(trace.columns.size(), 12u + 2u);

  nlohmann::json metrics = make_report(dir, dir);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "gamma_vs_round.dat"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "avg_accuracy_vs_round.dat"));
  EXPECT_TRUE(metrics.at("avg_accuracy").is_number());

  nlohmann::json summary;
  std::ifstream(fs::path(dir) / kSummaryFile) >> summary;
  EXPECT_NEAR(metrics.at("avg_accuracy").get<double>(),
              summary.at("avg_accuracy").get<double>(), 1e-15);
}

TEST(Artifacts, TruncatedTraceNamesMissingRounds) {
  ExperimentConfig cfg = parse_config(base_config_json());
  RunResult r = run_experiment(cfg);
  const std::string dir = testing::TempDir() + "cflag_run_truncated";
  fs::remove_all(dir);
  write_artifacts(r, dir);
  // drop the last three rounds
  {
    std::ifstream in(fs::path(dir) / kTraceFile);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    in.close();
    std::ofstream out(fs::path(dir) / kTraceFile);
    for (std::size_t i = 0; i + 3 < lines.size(); ++i) out << lines[i] << "\n";
  }
  try {
    make_report(dir, dir);
    FAIL() << "expected TraceError";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("missing rounds 5..7"), std::string::npos);
  }
}
