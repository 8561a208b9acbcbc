#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "datagen.hpp"
#include "metrics.hpp"
#include "server.hpp"

namespace cflag {

// Trace shorter than the config promises; the CLI maps this to exit code 2.
class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PreparedData {
  TaskStream stream;
  std::vector<Dataset> test_pools;           // pooled held-out split per task
  std::vector<std::vector<Dataset>> shards;  // [task][client] training shards
};

// Generators, held-out splits and Dirichlet shards for every task; pure in
// (config, seed). The held-out rows are removed before partitioning.
inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData out;
  if (cfg.stream.type == "split-gaussians") {
    out.stream = make_split_gaussians(cfg.stream.num_tasks, cfg.stream.classes_per_task,
                                      cfg.stream.dim, cfg.stream.n_per_class,
                                      cfg.stream.separation, cfg.seed);
  } else if (cfg.stream.type == "permuted") {
    Dataset base;
    if (!cfg.stream.base_csv.empty()) {
      base = read_csv(cfg.stream.base_csv);
    } else {
      base = make_split_gaussians(1, cfg.stream.classes_per_task, cfg.stream.dim,
                                  cfg.stream.n_per_class, cfg.stream.separation, cfg.seed)
                 .tasks[0];
    }
    out.stream = make_permuted_features(base, cfg.stream.num_tasks, cfg.seed);
  } else {
    throw ConfigError("unknown task stream type '" + cfg.stream.type + "'");
  }

  if (cfg.model.input_dim != out.stream.tasks[0].feature_dim)
    throw ConfigError("model.input_dim " + std::to_string(cfg.model.input_dim) +
                      " does not match task feature dimension " +
                      std::to_string(out.stream.tasks[0].feature_dim));
  if (cfg.model.is_classifier() && out.stream.num_classes > cfg.model.num_classes)
    throw ConfigError("task stream uses " + std::to_string(out.stream.num_classes) +
                      " classes but the model has " + std::to_string(cfg.model.num_classes));

  const int s = static_cast<int>(out.stream.tasks.size());
  out.test_pools.resize(s);
  out.shards.resize(s);
  for (int task = 0; task < s; ++task) {
    const Dataset& full = out.stream.tasks[task];
    const int n_test = static_cast<int>(full.rows() * cfg.test_fraction);
    if (n_test < 1 || full.rows() - n_test < cfg.clients)
      throw ConfigError("task " + std::to_string(task) +
                        " is too small for the requested split and client count");
    Rng split_rng({cfg.seed, kStreamSplit, static_cast<std::uint64_t>(task)});
    auto [test_idx, train_idx] = split_indices(full.rows(), n_test, split_rng);
    out.test_pools[task] = full.select(test_idx);
    Dataset train = full.select(train_idx);
    PartitionSpec spec;
    spec.n_clients = cfg.clients;
    spec.zeta = cfg.zeta;
    spec.seed = derive_seed({cfg.seed, kStreamPartition, static_cast<std::uint64_t>(task)});
    out.shards[task] = dirichlet_partition(train, spec);
  }
  return out;
}

struct RoundRecord {
  RoundReport rep;
  std::vector<double> acc;  // accuracy per task's held-out pool; NaN for regression
};

struct RunResult {
  ExperimentConfig cfg;
  int num_tasks = 0;
  bool classification = false;
  AccuracyMatrix matrix;
  std::vector<RoundRecord> trace;
  Vec final_params;

  double gamma_mean() const {
    if (trace.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : trace) s += r.rep.gamma;
    return s / trace.size();
  }
  double gamma_max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& r : trace) m = std::max(m, r.rep.gamma);
    return trace.empty() ? 0.0 : m;
  }
};

namespace detail {

inline ServerConfig make_server_config(const ExperimentConfig& cfg, int task, double l_value) {
  RateOverride rates = cfg.rates_for_task(task);
  ServerConfig sc;
  sc.alpha = cfg.algorithm == Algorithm::FedTrack ? 0.0 : rates.alpha;
  sc.beta = rates.beta;
  sc.schedule = cfg.schedule;
  sc.schedule_c = cfg.schedule_c;
  sc.smoothness_L = l_value;
  sc.local_epochs = cfg.local_epochs;
  sc.rounds_per_task = cfg.rounds_per_task;
  sc.adaptive = cfg.algorithm == Algorithm::CflagAdaptive;
  sc.adapt_case = cfg.adapt_case;
  sc.m_bound = cfg.m_bound;
  sc.memory_minibatch = cfg.memory_minibatch;
  sc.seed = cfg.seed;
  return sc;
}

inline double analytic_L_for_task(const LossModel& model,
                                  const std::vector<ClientState>& clients) {
  double l = 0.0;
  for (const auto& c : clients) {
    l = std::max(l, estimate_L(model, c.current));
    if (!c.past_pool.empty()) l = std::max(l, estimate_L(model, c.past_pool));
    if (!c.memory.items.empty()) l = std::max(l, estimate_L(model, c.memory.items));
  }
  return l;
}

// Fine-FL baseline round: E plain full-batch local steps followed by FedAvg.
// Diagnostics mirror run_round with S_i the sum of the stepped-on gradients
// and no memory term in the update.
inline RoundReport fine_round(ServerState& st, std::vector<ClientState>& clients,
                              const LossModel& model, int threads) {
  const int n = static_cast<int>(clients.size());
  if (n == 0) throw ConfigError("no clients");
  const double beta_t = effective_beta(st.cfg);
  const int epochs = st.cfg.local_epochs;
  const double l = st.cfg.smoothness_L;
  const Vec x_t = st.x;
  const std::size_t d = x_t.size();

  int with_mem = 0;
  for (const auto& c : clients) with_mem += c.memory.items.empty() ? 0 : 1;
  const bool memory_active = with_mem == n;
  const bool have_past = !clients[0].past_pool.empty();

  std::vector<double> weights(n);
  for (int i = 0; i < n; ++i) weights[i] = clients[i].weight;

  std::vector<PrologueGrads> pro(n);
  std::vector<Vec> grad_f_full(n);
  std::vector<LocalRoundResult> locals(n);
  parallel_for(n, threads, [&](int i) {
    pro[i] = round_prologue(clients[i], model, x_t, st.cfg, st.task_index, st.round_in_task,
                            memory_active);
    if (have_past) grad_f_full[i] = grad(model, x_t, clients[i].past_pool);
    LocalRoundResult& res = locals[i];
    res.grad_g_i = pro[i].grad_g_i;
    res.memory_grad_i = pro[i].memory_grad_i;
    res.accum_S = zeros(d);
    res.drift_norms.resize(epochs);
    Vec x = x_t;
    for (int k = 0; k < epochs; ++k) {
      res.drift_norms[k] = norm(sub(x, x_t));
      Vec g = k == 0 ? pro[i].grad_g_i : grad(model, x, clients[i].current);
      axpy(1.0, g, res.accum_S);
      axpy(-beta_t, g, x);
    }
    check_finite(x, "local iterate");
    res.x_end = std::move(x);
  });

  auto [grad_g, f_tilde] = broadcast_grads(pro, weights);

  RoundReport rep;
  rep.t = st.global_round;
  rep.task = st.task_index;
  rep.alpha_used = 0.0;
  rep.beta_used = beta_t;
  rep.lambda.resize(n);
  rep.rates_used.assign(n, {0.0, beta_t, false});
  Vec x_next = zeros(d);
  Vec weighted_S = zeros(d);
  for (int i = 0; i < n; ++i) {
    rep.lambda[i] = dot(f_tilde, locals[i].accum_S);
    if (rep.lambda[i] > 0.0)
      ++rep.transference_count;
    else
      ++rep.interference_count;
    axpy(weights[i], locals[i].x_end, x_next);
    axpy(weights[i], locals[i].accum_S, weighted_S);
  }
  check_finite(x_next, "aggregated model");
  rep.gamma = gamma_value(beta_t, 0.0, l, weighted_S, f_tilde);
  for (int i = 0; i < n; ++i)
    rep.gamma_base_surr += weights[i] * gamma_surrogate(st.cfg.adapt_case, 0.0, beta_t, l,
                                                        weights[i], n, locals[i].accum_S, f_tilde);
  rep.gamma_ad = rep.gamma_base_surr;
  rep.grad_g_sq = norm_sq(grad_g);
  if (have_past) {
    Vec f_full = zeros(d);
    Vec h_grad = zeros(d);
    for (int i = 0; i < n; ++i) {
      axpy(weights[i], grad_f_full[i], f_full);
      const double np = clients[i].past_pool.rows();
      const double nc = clients[i].current.rows();
      for (std::size_t q = 0; q < d; ++q)
        h_grad[q] += weights[i] * (np * grad_f_full[i][q] + nc * pro[i].grad_g_i[q]) / (np + nc);
    }
    rep.grad_f_sq = norm_sq(f_full);
    rep.grad_h_sq = norm_sq(h_grad);
    if (memory_active) {
      Vec bias = sub(f_tilde, f_full);
      double bn = norm_sq(bias);
      rep.bias_m_hat = rep.grad_f_sq > 0.0
                           ? bn / rep.grad_f_sq
                           : (bn > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      rep.m_hat_flagged = rep.bias_m_hat >= 1.0;
      rep.overfit_B = overfit_term(0.0, beta_t, l, f_full, bias, weighted_S);
    }
  } else {
    rep.grad_h_sq = rep.grad_g_sq;
  }

  st.x = std::move(x_next);
  ++st.round_in_task;
  ++st.global_round;
  return rep;
}

inline std::vector<double> eval_accuracies(const LossModel& model, const Vec& x,
                                           const std::vector<Dataset>& pools) {
  std::vector<double> acc(pools.size(), std::numeric_limits<double>::quiet_NaN());
  if (!model.is_classifier()) return acc;
  for (std::size_t j = 0; j < pools.size(); ++j) acc[j] = accuracy(model, x, pools[j]);
  return acc;
}

}  // namespace detail

using RoundSink = std::function<void(const RoundRecord&)>;

// Full continual run: for each task, T rounds of the configured algorithm,
// evaluation of every task pool after each round, then the transition. Task 0
// trains without the memory term (no past data exists yet). When a sink is
// given it sees every round record as soon as the round finishes.
inline RunResult run_experiment(const ExperimentConfig& cfg, int threads = 1,
                                const RoundSink& sink = {}) {
  validate_config(cfg);
  PreparedData data = prepare_data(cfg);
  const int s = static_cast<int>(data.stream.tasks.size());

  RunResult result;
  result.cfg = cfg;
  result.num_tasks = s;
  result.classification = cfg.model.is_classifier();
  result.matrix = AccuracyMatrix(s);

  std::vector<ClientState> clients(cfg.clients);
  double total = 0.0;
  for (int i = 0; i < cfg.clients; ++i) {
    clients[i].id = i;
    clients[i].current = data.shards[0][i];
    total += clients[i].current.rows();
  }
  for (auto& c : clients) c.weight = c.current.rows() / total;

  ServerState st;
  st.x = zeros(cfg.model.param_dim());

  for (int task = 0; task < s; ++task) {
    double l_value =
        cfg.analytic_L ? detail::analytic_L_for_task(cfg.model, clients) : cfg.smoothness_L;
    st.cfg = detail::make_server_config(cfg, task, l_value);
    setup_check(st.cfg);
    for (int t = 0; t < cfg.rounds_per_task; ++t) {
      RoundRecord rec;
      rec.rep = cfg.algorithm == Algorithm::FineFl
                    ? detail::fine_round(st, clients, cfg.model, threads)
                    : run_round(st, clients, cfg.model, threads);
      rec.acc = detail::eval_accuracies(cfg.model, st.x, data.test_pools);
      if (sink) sink(rec);
      result.trace.push_back(std::move(rec));
    }
    if (result.classification)
      for (int j = 0; j <= task; ++j) result.matrix.at(task, j) = result.trace.back().acc[j];
    if (task + 1 < s)
      task_transition(st, clients, data.shards[task + 1], cfg.memory_capacity_per_task,
                      cfg.memory_policy);
  }
  result.final_params = st.x;
  return result;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::vector<std::string> trace_columns(int num_tasks) {
  std::vector<std::string> cols{"t",          "task",        "gamma",      "gamma_ad",
                                "lambda_min", "lambda_max",  "n_transfer", "n_interfere",
                                "grad_f_sq",  "grad_g_sq",   "grad_h_sq",  "m_hat"};
  for (int j = 0; j < num_tasks; ++j) cols.push_back("acc_task_" + std::to_string(j));
  return cols;
}

inline std::string trace_header_line(int num_tasks) {
  auto cols = trace_columns(num_tasks);
  std::string line;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) line += ",";
    line += cols[i];
  }
  return line;
}

inline std::string trace_row_line(const RoundRecord& rec) {
  const RoundReport& r = rec.rep;
  double lmin = r.lambda.empty() ? 0.0 : *std::min_element(r.lambda.begin(), r.lambda.end());
  double lmax = r.lambda.empty() ? 0.0 : *std::max_element(r.lambda.begin(), r.lambda.end());
  std::string line = std::to_string(r.t) + "," + std::to_string(r.task) + "," + fmt_g17(r.gamma) +
                     "," + fmt_g17(r.gamma_ad) + "," + fmt_g17(lmin) + "," + fmt_g17(lmax) + "," +
                     std::to_string(r.transference_count) + "," +
                     std::to_string(r.interference_count) + "," + fmt_g17(r.grad_f_sq) + "," +
                     fmt_g17(r.grad_g_sq) + "," + fmt_g17(r.grad_h_sq) + "," +
                     fmt_g17(r.bias_m_hat);
  for (double a : rec.acc) line += "," + fmt_g17(a);
  return line;
}

inline void write_trace_csv(const RunResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << trace_header_line(result.num_tasks) << "\n";
  for (const auto& rec : result.trace) out << trace_row_line(rec) << "\n";
  if (!out) throw DataError("write failed for " + path);
}

inline void write_matrix_csv(const AccuracyMatrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (int i = 0; i < m.size; ++i) {
    for (int j = 0; j < m.size; ++j) out << (j ? "," : "") << fmt_g17(m.at(i, j));
    out << "\n";
  }
}

inline AccuracyMatrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto toks = detail::split_csv_line(line);
    std::vector<double> row;
    for (const auto& t : toks) {
      char* end = nullptr;
      double v = std::strtod(t.c_str(), &end);
      if (end != t.c_str() + t.size()) throw ParseError("malformed matrix cell '" + t + "'", lineno);
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  AccuracyMatrix m(static_cast<int>(rows.size()));
  for (int i = 0; i < m.size; ++i) {
    if (static_cast<int>(rows[i].size()) != m.size)
      throw ParseError("accuracy matrix is not square");
    for (int j = 0; j < m.size; ++j) m.at(i, j) = rows[i][j];
  }
  return m;
}

inline nlohmann::json summary_json(const RunResult& result) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["algorithm"] = to_string(result.cfg.algorithm);
  j["seed"] = result.cfg.seed;
  j["clients"] = result.cfg.clients;
  j["tasks"] = result.num_tasks;
  j["rounds_per_task"] = result.cfg.rounds_per_task;
  if (result.classification) {
    j["avg_accuracy"] = avg_accuracy(result.matrix, result.num_tasks);
    if (result.num_tasks >= 2)
      j["forgetting"] = forgetting(result.matrix, result.num_tasks);
    else
      j["forgetting"] = nullptr;
  } else {
    j["avg_accuracy"] = nullptr;
    j["forgetting"] = nullptr;
  }
  j["gamma_mean"] = result.gamma_mean();
  j["gamma_max"] = result.gamma_max();
  int transfer = 0, interfere = 0, flagged = 0;
  for (const auto& r : result.trace) {
    transfer += r.rep.transference_count;
    interfere += r.rep.interference_count;
    flagged += r.rep.m_hat_flagged ? 1 : 0;
  }
  j["transference_total"] = transfer;
  j["interference_total"] = interfere;
  j["m_hat_flagged_rounds"] = flagged;
  return j;
}

inline const char* const kTraceFile = "trace.csv";
inline const char* const kSummaryFile = "summary.json";
inline const char* const kSnapshotFile = "config_snapshot.json";
inline const char* const kMatrixFile = "accuracy_matrix.csv";

inline void write_artifacts(const RunResult& result, const std::string& out_dir,
                            bool include_trace = true) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (include_trace) write_trace_csv(result, (fs::path(out_dir) / kTraceFile).string());
  write_matrix_csv(result.matrix, (fs::path(out_dir) / kMatrixFile).string());
  {
    std::ofstream out(fs::path(out_dir) / kSummaryFile);
    out << summary_json(result).dump(2) << "\n";
    if (!out) throw DataError("write failed for summary.json");
  }
  {
    std::ofstream out(fs::path(out_dir) / kSnapshotFile);
    out << config_snapshot(result.cfg).dump(2) << "\n";
    if (!out) throw DataError("write failed for config_snapshot.json");
  }
}

// ---------------------------------------------------------------------------
// Trace re-reading and the report products
// ---------------------------------------------------------------------------

struct TraceData {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    throw ParseError("trace is missing column '" + name + "'");
  }
};

inline TraceData read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  TraceData trace;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto toks = detail::split_csv_line(line);
    if (lineno == 1) {
      trace.columns = toks;
      continue;
    }
    std::vector<double> row;
    row.reserve(toks.size());
    for (const auto& t : toks) {
      char* end = nullptr;
      double v = std::strtod(t.c_str(), &end);
      if (end != t.c_str() + t.size()) throw ParseError("malformed trace value '" + t + "'", lineno);
      row.push_back(v);
    }
    if (row.size() != trace.columns.size())
      throw ParseError("trace row width does not match header", lineno);
    trace.rows.push_back(std::move(row));
  }
  if (trace.columns.empty()) throw ParseError("empty trace " + path);
  return trace;
}

// Recomputes metrics from a run directory and emits plot-ready two-column
// files (round vs gamma, round vs average accuracy over the tasks seen so
// far). Throws TraceError naming the missing rounds when the trace is short.
inline nlohmann::json make_report(const std::string& run_dir, const std::string& out_dir) {
  namespace fs = std::filesystem;
  nlohmann::json snapshot;
  {
    std::ifstream in(fs::path(run_dir) / kSnapshotFile);
    if (!in) throw ParseError("cannot open config_snapshot.json in " + run_dir);
    in >> snapshot;
  }
  const int num_tasks = snapshot.at("tasks").at("num_tasks").get<int>();
  const int rounds_per_task = snapshot.at("rounds_per_task").get<int>();
  const long expected = static_cast<long>(num_tasks) * rounds_per_task;

  TraceData trace = read_trace((fs::path(run_dir) / kTraceFile).string());
  const int col_t = trace.column("t");
  const int col_task = trace.column("task");
  const int col_gamma = trace.column("gamma");
  const long have = static_cast<long>(trace.rows.size());
  for (long i = 0; i < have; ++i)
    if (static_cast<long>(trace.rows[i][col_t]) != i)
      throw TraceError("trace round index jumps at row " + std::to_string(i) +
                       "; expected t = " + std::to_string(i));
  if (have < expected)
    throw TraceError("trace is missing rounds " + std::to_string(have) + ".." +
                     std::to_string(expected - 1) + " (have " + std::to_string(have) + " of " +
                     std::to_string(expected) + ")");

  std::vector<int> acc_cols;
  for (int j = 0; j < num_tasks; ++j)
    acc_cols.push_back(trace.column("acc_task_" + std::to_string(j)));

  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "gamma_vs_round.dat");
    for (const auto& row : trace.rows)
      out << static_cast<long>(row[col_t]) << " " << fmt_g17(row[col_gamma]) << "\n";
    if (!out) throw DataError("write failed for gamma_vs_round.dat");
  }
  {
    std::ofstream out(fs::path(out_dir) / "avg_accuracy_vs_round.dat");
    for (const auto& row : trace.rows) {
      const int seen = static_cast<int>(row[col_task]) + 1;
      double sum = 0.0;
      for (int j = 0; j < seen; ++j) sum += row[acc_cols[j]];
      out << static_cast<long>(row[col_t]) << " " << fmt_g17(sum / seen) << "\n";
    }
    if (!out) throw DataError("write failed for avg_accuracy_vs_round.dat");
  }

  AccuracyMatrix matrix = read_matrix_csv((fs::path(run_dir) / kMatrixFile).string());
  nlohmann::json metrics;
  metrics["rounds"] = have;
  double gsum = 0.0;
  for (const auto& row : trace.rows) gsum += row[col_gamma];
  metrics["gamma_mean"] = have > 0 ? gsum / have : 0.0;
  const bool defined = matrix.size > 0 && !std::isnan(matrix.at(matrix.size - 1, 0));
  metrics["avg_accuracy"] =
      defined ? nlohmann::json(avg_accuracy(matrix, matrix.size)) : nlohmann::json(nullptr);
  metrics["forgetting"] = defined && matrix.size >= 2
                              ? nlohmann::json(forgetting(matrix, matrix.size))
                              : nlohmann::json(nullptr);
  return metrics;
}

}  // namespace cflag
