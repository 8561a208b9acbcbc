#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "model.hpp"
#include "replay.hpp"
#include "server.hpp"

namespace cflag {

enum class Algorithm { CflagFixed, CflagAdaptive, FineFl, FedTrack };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::CflagFixed: return "cflag-fixed";
    case Algorithm::CflagAdaptive: return "cflag-adaptive";
    case Algorithm::FineFl: return "fine-fl";
    case Algorithm::FedTrack: return "fedtrack";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "cflag-fixed") return Algorithm::CflagFixed;
  if (s == "cflag-adaptive") return Algorithm::CflagAdaptive;
  if (s == "fine-fl") return Algorithm::FineFl;
  if (s == "fedtrack") return Algorithm::FedTrack;
  throw ConfigError("unknown algorithm '" + s + "'");
}

struct TaskStreamSpec {
  std::string type;  // "split-gaussians" | "permuted"
  int num_tasks = 1;
  // split-gaussians (also the embedded base of a permuted stream)
  int classes_per_task = 2;
  int dim = 2;
  int n_per_class = 100;
  double separation = 4.0;
  // permuted
  std::string base_csv;  // when set, the base task is loaded from this file
};

struct RateOverride {
  double alpha = 0.0;
  double beta = 0.0;
};

struct ExperimentConfig {
  int schema_version = 1;
  Algorithm algorithm = Algorithm::CflagFixed;
  std::uint64_t seed = 1;
  LossModel model;
  TaskStreamSpec stream;
  int clients = 1;
  double zeta = 1.0;
  int rounds_per_task = 1;
  int local_epochs = 1;
  double alpha = 0.0;
  double beta = 0.0;
  BetaSchedule schedule = BetaSchedule::Constant;
  double schedule_c = 1.0;
  bool analytic_L = false;
  double smoothness_L = 5.0;  // ignored when analytic_L
  int memory_capacity_per_task = 1;
  MemoryPolicy memory_policy = MemoryPolicy::ClassBalanced;
  int memory_minibatch = 0;  // 0 = full buffer
  AdaptCase adapt_case = AdaptCase::Average;
  double m_bound = 0.0;
  double test_fraction = 0.2;
  std::map<int, RateOverride> per_task_rates;

  RateOverride rates_for_task(int task) const {
    auto it = per_task_rates.find(task);
    if (it != per_task_rates.end()) return it->second;
    return {alpha, beta};
  }
};

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) throw ConfigError("config is missing required field '" + key + "'");
  return j.at(key);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.schema_version = detail::get_or(j, "schema_version", 1);
  if (cfg.schema_version != 1)
    throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version));
  cfg.algorithm = algorithm_from_string(detail::require(j, "algorithm").get<std::string>());
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 1);

  const auto& jm = detail::require(j, "model");
  cfg.model.kind = model_kind_from_string(detail::require(jm, "kind").get<std::string>());
  cfg.model.input_dim = detail::require(jm, "input_dim").get<int>();
  cfg.model.num_classes = detail::require(jm, "num_classes").get<int>();
  cfg.model.hidden_dim = detail::get_or(jm, "hidden_dim", 0);
  cfg.model.l2_coeff = detail::get_or(jm, "l2_coeff", 0.0);

  const auto& jt = detail::require(j, "tasks");
  cfg.stream.type = detail::require(jt, "type").get<std::string>();
  cfg.stream.num_tasks = detail::get_or(jt, "num_tasks", 1);
  cfg.stream.classes_per_task = detail::get_or(jt, "classes_per_task", 2);
  cfg.stream.dim = detail::get_or(jt, "dim", cfg.model.input_dim);
  cfg.stream.n_per_class = detail::get_or(jt, "n_per_class", 100);
  cfg.stream.separation = detail::get_or(jt, "separation", 4.0);
  cfg.stream.base_csv = detail::get_or<std::string>(jt, "base_csv", "");

  const auto& jp = detail::require(j, "partition");
  cfg.clients = detail::require(jp, "clients").get<int>();
  cfg.zeta = detail::require(jp, "zeta").get<double>();

  cfg.rounds_per_task = detail::require(j, "rounds_per_task").get<int>();
  cfg.local_epochs = detail::require(j, "local_epochs").get<int>();
  cfg.alpha = detail::require(j, "alpha").get<double>();
  cfg.beta = detail::require(j, "beta").get<double>();

  if (j.contains("beta_schedule")) {
    const auto& js = j.at("beta_schedule");
    std::string type = detail::require(js, "type").get<std::string>();
    if (type == "constant") {
      cfg.schedule = BetaSchedule::Constant;
    } else if (type == "c-over-sqrt-t") {
      cfg.schedule = BetaSchedule::COverSqrtT;
      cfg.schedule_c = detail::require(js, "c").get<double>();
    } else {
      throw ConfigError("unknown beta_schedule type '" + type + "'");
    }
  }

  if (j.contains("smoothness") && j.at("smoothness").is_string()) {
    std::string s = j.at("smoothness").get<std::string>();
    if (s != "analytic") throw ConfigError("smoothness must be a number or \"analytic\"");
    cfg.analytic_L = true;
  } else {
    cfg.smoothness_L = detail::get_or(j, "smoothness", 5.0);
  }

  if (j.contains("memory")) {
    const auto& jmem = j.at("memory");
    cfg.memory_capacity_per_task = detail::require(jmem, "capacity_per_task").get<int>();
    cfg.memory_policy =
        memory_policy_from_string(detail::get_or<std::string>(jmem, "policy", "class-balanced"));
    cfg.memory_minibatch = detail::get_or(jmem, "minibatch", 0);
  }

  cfg.adapt_case = adapt_case_from_string(detail::get_or<std::string>(j, "adaptation_case", "average"));
  cfg.m_bound = detail::get_or(j, "m_bound", 0.0);
  cfg.test_fraction = detail::get_or(j, "test_fraction", 0.2);

  if (j.contains("per_task_rates")) {
    for (const auto& entry : j.at("per_task_rates")) {
      int task = detail::require(entry, "task").get<int>();
      RateOverride ro;
      ro.alpha = detail::get_or(entry, "alpha", cfg.alpha);
      ro.beta = detail::get_or(entry, "beta", cfg.beta);
      cfg.per_task_rates[task] = ro;
    }
  }
  return cfg;
}

// Static checks; returns notes about checks that can only run once data (and
// an analytic L) exist. Throws ConfigError on any hard violation.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> notes;
  if (cfg.clients < 1) throw ConfigError("partition.clients must be at least 1");
  if (!(cfg.zeta > 0.0)) throw ConfigError("partition.zeta must be positive");
  if (cfg.rounds_per_task < 1) throw ConfigError("rounds_per_task must be at least 1");
  if (cfg.local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
  if (cfg.memory_capacity_per_task < 1)
    throw ConfigError("memory.capacity_per_task must be at least 1");
  if (cfg.memory_minibatch < 0) throw ConfigError("memory.minibatch must be nonnegative");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0))
    throw ConfigError("test_fraction must lie in (0, 1)");
  if (cfg.model.input_dim < 1) throw ConfigError("model.input_dim must be at least 1");
  if (cfg.model.kind != ModelKind::LinearMse && cfg.model.num_classes < 2)
    throw ConfigError("classification models need num_classes >= 2");
  if (cfg.model.kind == ModelKind::MlpOneHidden && cfg.model.hidden_dim < 1)
    throw ConfigError("mlp-1hidden needs hidden_dim >= 1");
  if (cfg.model.l2_coeff < 0.0) throw ConfigError("l2_coeff must be nonnegative");
  if (cfg.stream.type != "split-gaussians" && cfg.stream.type != "permuted")
    throw ConfigError("unknown task stream type '" + cfg.stream.type + "'");
  if (cfg.stream.type == "split-gaussians" && cfg.model.kind != ModelKind::LinearMse) {
    int k = cfg.stream.num_tasks * cfg.stream.classes_per_task;
    if (k != cfg.model.num_classes)
      throw ConfigError("model.num_classes (" + std::to_string(cfg.model.num_classes) +
                        ") must equal num_tasks*classes_per_task (" + std::to_string(k) + ")");
  }
  if (cfg.analytic_L && cfg.model.kind == ModelKind::MlpOneHidden)
    throw ConfigError("analytic smoothness is unavailable for mlp-1hidden");

  auto check_rates = [&](int task, double alpha, double beta) {
    if (alpha < 0.0 || !(beta > 0.0))
      throw ConfigError("task " + std::to_string(task) + ": rates must be positive");
    if (!cfg.analytic_L) {
      double limit = 2.0 / (cfg.smoothness_L * (1.0 + cfg.m_bound));
      if (!(alpha < limit))
        throw ConfigError("task " + std::to_string(task) +
                          ": memory rate too large, alpha must satisfy alpha < 2/(L*(1+m)) = " +
                          fmt_g17(limit));
      if (cfg.algorithm == Algorithm::CflagAdaptive && !(cfg.smoothness_L * alpha < 1.0))
        throw ConfigError("task " + std::to_string(task) +
                          ": adaptive runs require L*alpha < 1");
    }
    if (cfg.algorithm == Algorithm::CflagAdaptive && beta != alpha)
      throw ConfigError("task " + std::to_string(task) +
                        ": adaptive runs fix beta = alpha before rescaling; set them equal");
  };
  if (cfg.algorithm == Algorithm::CflagAdaptive && cfg.schedule != BetaSchedule::Constant)
    throw ConfigError("adaptive runs require a constant beta schedule");
  if (cfg.schedule == BetaSchedule::COverSqrtT && !(cfg.schedule_c > 0.0))
    throw ConfigError("beta_schedule.c must be positive");
  if (cfg.schedule == BetaSchedule::Constant) {
    check_rates(-1, cfg.alpha, cfg.beta);
    for (const auto& [task, ro] : cfg.per_task_rates) check_rates(task, ro.alpha, ro.beta);
  } else if (cfg.alpha < 0.0) {
    throw ConfigError("alpha must be nonnegative");
  }
  if (cfg.analytic_L)
    notes.push_back("smoothness=analytic: the rate bound alpha < 2/(L*(1+m)) is enforced at "
                    "runtime once per task");
  if (cfg.stream.type == "permuted" && !cfg.stream.base_csv.empty())
    notes.push_back("permuted stream with base_csv: label-space checks run at load time");
  return notes;
}

// Canonical echo of a parsed config; regenerating a run from this snapshot
// reproduces it byte for byte.
inline nlohmann::json config_snapshot(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = cfg.schema_version;
  j["algorithm"] = to_string(cfg.algorithm);
  j["seed"] = cfg.seed;
  j["model"] = {{"kind", to_string(cfg.model.kind)},
                {"input_dim", cfg.model.input_dim},
                {"num_classes", cfg.model.num_classes},
                {"hidden_dim", cfg.model.hidden_dim},
                {"l2_coeff", cfg.model.l2_coeff}};
  nlohmann::json jt;
  jt["type"] = cfg.stream.type;
  jt["num_tasks"] = cfg.stream.num_tasks;
  if (cfg.stream.type == "split-gaussians" || cfg.stream.base_csv.empty()) {
    jt["classes_per_task"] = cfg.stream.classes_per_task;
    jt["dim"] = cfg.stream.dim;
    jt["n_per_class"] = cfg.stream.n_per_class;
    jt["separation"] = cfg.stream.separation;
  }
  if (!cfg.stream.base_csv.empty()) jt["base_csv"] = cfg.stream.base_csv;
  j["tasks"] = jt;
  j["partition"] = {{"clients", cfg.clients}, {"zeta", cfg.zeta}};
  j["rounds_per_task"] = cfg.rounds_per_task;
  j["local_epochs"] = cfg.local_epochs;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  if (cfg.schedule == BetaSchedule::Constant)
    j["beta_schedule"] = {{"type", "constant"}};
  else
    j["beta_schedule"] = {{"type", "c-over-sqrt-t"}, {"c", cfg.schedule_c}};
  if (cfg.analytic_L)
    j["smoothness"] = "analytic";
  else
    j["smoothness"] = cfg.smoothness_L;
  j["memory"] = {{"capacity_per_task", cfg.memory_capacity_per_task},
                 {"policy", to_string(cfg.memory_policy)},
                 {"minibatch", cfg.memory_minibatch}};
  j["adaptation_case"] = to_string(cfg.adapt_case);
  j["m_bound"] = cfg.m_bound;
  j["test_fraction"] = cfg.test_fraction;
  if (!cfg.per_task_rates.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [task, ro] : cfg.per_task_rates)
      arr.push_back({{"task", task}, {"alpha", ro.alpha}, {"beta", ro.beta}});
    j["per_task_rates"] = arr;
  }
  return j;
}

}  // namespace cflag
