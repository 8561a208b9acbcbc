#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "client.hpp"
#include "common.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace cflag {

enum class AdaptCase { Average, Worst };

inline const char* to_string(AdaptCase c) { return c == AdaptCase::Average ? "average" : "worst"; }

inline AdaptCase adapt_case_from_string(const std::string& s) {
  if (s == "average") return AdaptCase::Average;
  if (s == "worst") return AdaptCase::Worst;
  throw ConfigError("unknown adaptation case '" + s + "'");
}

enum class BetaSchedule { Constant, COverSqrtT };

struct ServerConfig {
  double alpha = 0.0;  // memory rate
  double beta = 0.0;   // current-task rate (constant schedule)
  BetaSchedule schedule = BetaSchedule::Constant;
  double schedule_c = 1.0;  // beta = c / sqrt(T) under COverSqrtT
  double smoothness_L = 5.0;
  int local_epochs = 1;    // E
  int rounds_per_task = 1; // T, the planned horizon entering c/sqrt(T)
  bool adaptive = false;
  AdaptCase adapt_case = AdaptCase::Average;
  double m_bound = 0.0;       // m entering the alpha < 2/(L(1+m)) check
  int memory_minibatch = 0;   // 0 = whole buffer for the memory gradient
  std::uint64_t seed = 1;
};

// The current-task rate is constant within a task; the sqrt schedule fixes it
// from the planned horizon.
inline double effective_beta(const ServerConfig& cfg) {
  if (cfg.schedule == BetaSchedule::COverSqrtT)
    return cfg.schedule_c / std::sqrt(static_cast<double>(cfg.rounds_per_task));
  return cfg.beta;
}

inline void setup_check(const ServerConfig& cfg) {
  if (cfg.local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
  if (cfg.rounds_per_task < 1) throw ConfigError("rounds_per_task must be at least 1");
  if (!(cfg.smoothness_L > 0.0)) throw ConfigError("smoothness constant L must be positive");
  if (cfg.alpha < 0.0) throw ConfigError("alpha must be nonnegative");
  if (!(effective_beta(cfg) > 0.0)) throw ConfigError("beta must be positive");
  const double limit = 2.0 / (cfg.smoothness_L * (1.0 + cfg.m_bound));
  if (!(cfg.alpha < limit))
    throw ConfigError("memory rate too large: alpha must satisfy alpha < 2/(L*(1+m)) = " +
                      fmt_g17(limit));
  if (cfg.adaptive) {
    if (cfg.schedule != BetaSchedule::Constant)
      throw ConfigError("adaptive runs require a constant beta schedule");
    if (cfg.beta != cfg.alpha)
      throw ConfigError("adaptive runs fix beta = alpha before rescaling; set them equal");
    if (!(cfg.smoothness_L * cfg.alpha < 1.0))
      throw ConfigError("adaptive runs require L*alpha < 1 for a positive transference rate");
  }
}

struct ServerState {
  ServerConfig cfg;
  Vec x;
  int task_index = 0;
  int round_in_task = 0;
  int global_round = 0;
};

// Weighted sums in ascending client order; the broadcast pair (grad g, memory
// grad f~) every client steps against this round.
inline std::pair<Vec, Vec> broadcast_grads(const std::vector<PrologueGrads>& pro,
                                           const std::vector<double>& weights) {
  if (pro.empty()) throw ConfigError("no prologue results to broadcast");
  if (pro.size() != weights.size()) throw ConfigError("missing client prologue results");
  Vec g = zeros(pro[0].grad_g_i.size());
  Vec f = zeros(pro[0].grad_g_i.size());
  for (std::size_t i = 0; i < pro.size(); ++i) {
    axpy(weights[i], pro[i].grad_g_i, g);
    axpy(weights[i], pro[i].memory_grad_i, f);
  }
  return {std::move(g), std::move(f)};
}

struct AdaptedRates {
  double alpha_i = 0.0;
  double beta_i = 0.0;
  bool degenerate = false;  // fell back to (alpha, alpha) on a zero denominator
};

// Interference (lambda <= 0): grow the memory rate to cancel the projection
// of the accumulated update onto the memory gradient, keep beta at alpha.
// Transference (lambda > 0): keep alpha, move beta to the vertex of the
// per-client forgetting quadratic; the worst case divides by N.
inline AdaptedRates adap_lr(double lambda_i, double f_tilde_sq, double s_sq, double alpha,
                            double L, double p_i, int n_clients, AdaptCase c) {
  if (lambda_i > 0.0) {
    double denom = L * p_i * s_sq;
    if (c == AdaptCase::Worst) denom *= n_clients;
    if (!(denom > 0.0)) return {alpha, alpha, true};
    double beta_i = (1.0 - L * alpha) * lambda_i / denom;
    if (!(beta_i > 0.0) || !std::isfinite(beta_i)) return {alpha, alpha, true};
    return {alpha, beta_i, false};
  }
  if (!(f_tilde_sq > 0.0)) return {alpha, alpha, true};
  return {alpha * (1.0 - lambda_i / f_tilde_sq), alpha, false};
}

// Forgetting functional at the server:
//   L/2 * beta^2 * ||sum_i p_i S_i||^2 - beta*(1 - L*alpha) * <f~, sum_i p_i S_i>.
inline double gamma_value(double beta, double alpha, double L, const Vec& weighted_S,
                          const Vec& f_tilde) {
  return 0.5 * L * beta * beta * norm_sq(weighted_S) -
         beta * (1.0 - L * alpha) * dot(f_tilde, weighted_S);
}

// Per-client surrogate; average case drops cross-client interactions, worst
// case charges them at p_i*N times the quadratic term.
inline double gamma_surrogate(AdaptCase c, double alpha_i, double beta_i, double L, double p_i,
                              int n_clients, const Vec& s_i, const Vec& f_tilde) {
  double quad = 0.5 * L * beta_i * beta_i * p_i * norm_sq(s_i);
  if (c == AdaptCase::Worst) quad *= n_clients;
  return quad - beta_i * (1.0 - L * alpha_i) * dot(f_tilde, s_i);
}

// Overfitting term B(t); zero in expectation under uniform memory sampling.
inline double overfit_term(double alpha, double beta, double L, const Vec& grad_f_full,
                           const Vec& bias, const Vec& weighted_S) {
  return (L * alpha * alpha - alpha) * dot(grad_f_full, bias) + beta * dot(bias, weighted_S);
}

inline Vec server_aggregate(const std::vector<Vec>& deltas, const std::vector<double>& weights) {
  if (deltas.empty() || deltas.size() != weights.size())
    throw ConfigError("update count does not match client count");
  Vec x = zeros(deltas[0].size());
  for (std::size_t i = 0; i < deltas.size(); ++i) axpy(weights[i], deltas[i], x);
  check_finite(x, "aggregated model");
  return x;
}

// Per-round diagnostics. gamma is the aggregate forgetting functional at base
// rates; gamma_ad and gamma_base_surr go through the case-matching per-client
// surrogates at the used and the base rates.
struct RoundReport {
  int t = 0;
  int task = 0;
  double alpha_used = 0.0;
  double beta_used = 0.0;
  double gamma = 0.0;
  double gamma_ad = 0.0;
  double gamma_base_surr = 0.0;
  std::vector<double> lambda;
  std::vector<AdaptedRates> rates_used;
  int transference_count = 0;
  int interference_count = 0;
  double bias_m_hat = 0.0;
  bool m_hat_flagged = false;  // empirical m_hat >= 1 (bounded-bias assumption violated)
  std::optional<double> overfit_B;
  double grad_f_sq = 0.0;
  double grad_g_sq = 0.0;
  double grad_h_sq = 0.0;
  double memory_ratio_max = 0.0;  // max_i ||f~_i|| / ||grad g||, reported, never enforced
};

namespace detail {

// Index-parallel helper; work is merged by index so the thread count never
// changes results. Exceptions are rethrown on the caller thread.
inline void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

namespace detail {

// Round-start gradients for one client, honoring the optional memory
// mini-batch; shared by the C-FLAG round and the baselines.
inline PrologueGrads round_prologue(const ClientState& c, const LossModel& model, const Vec& x_t,
                                    const ServerConfig& cfg, int task, int round,
                                    bool memory_active) {
  if (!memory_active) {
    if (c.current.empty()) throw DataError("client has no current-task data");
    return {grad(model, x_t, c.current), zeros(x_t.size())};
  }
  if (cfg.memory_minibatch <= 0) return client_prologue(c, model, x_t);
  if (c.current.empty()) throw DataError("client has no current-task data");
  Rng rng({cfg.seed, kStreamMemoryBatch, static_cast<std::uint64_t>(c.id),
           static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(round)});
  Dataset batch = memory_batch(c.memory, cfg.memory_minibatch, rng);
  return {grad(model, x_t, c.current), grad(model, x_t, batch)};
}

}  // namespace detail

// Snapshot of a round handed to an optional observer; used by tests to check
// the drift identity and the closed-form server update against live runs.
struct RoundInternals {
  const Vec& x_t;
  const Vec& grad_g;
  const Vec& f_tilde;
  const std::vector<PrologueGrads>& prologue;
  const std::vector<LocalRoundResult>& locals;
  const std::vector<AdaptedRates>& rates;
  const std::vector<Vec>& deltas;
  const Vec& x_next;
  double alpha_used;
  double beta_used;
};

using RoundObserver = std::function<void(const RoundInternals&)>;

// One communication round: prologue, broadcast, parallel local rounds,
// adaptation, compose, aggregate, report. When no client holds memory yet
// (first task) the memory term is dropped: alpha_eff = 0 and f~ = 0.
inline RoundReport run_round(ServerState& st, std::vector<ClientState>& clients,
                             const LossModel& model, int threads = 1,
                             const RoundObserver& observer = {}) {
  const int n = static_cast<int>(clients.size());
  if (n == 0) throw ConfigError("no clients");
  const ServerConfig& cfg = st.cfg;
  const double beta_t = effective_beta(cfg);
  const double L = cfg.smoothness_L;
  const int epochs = cfg.local_epochs;

  int with_mem = 0;
  for (const auto& c : clients) with_mem += c.memory.items.empty() ? 0 : 1;
  if (with_mem != 0 && with_mem != n)
    throw ConfigError("clients disagree on memory availability");
  const bool memory_active = with_mem == n;
  const double alpha_t = memory_active ? cfg.alpha : 0.0;

  std::vector<double> weights(n);
  for (int i = 0; i < n; ++i) weights[i] = clients[i].weight;

  const Vec x_t = st.x;
  const std::size_t d = x_t.size();

  // Prologue plus full-past diagnostics, one parallel region.
  std::vector<PrologueGrads> pro(n);
  std::vector<Vec> grad_f_full(n);
  const bool have_past = !clients[0].past_pool.empty();
  detail::parallel_for(n, threads, [&](int i) {
    pro[i] = detail::round_prologue(clients[i], model, x_t, cfg, st.task_index, st.round_in_task,
                                    memory_active);
    if (have_past) grad_f_full[i] = grad(model, x_t, clients[i].past_pool);
  });

  auto [grad_g, f_tilde] = broadcast_grads(pro, weights);

  std::vector<LocalRoundResult> locals(n);
  detail::parallel_for(n, threads, [&](int i) {
    Rng stream({cfg.seed, kStreamLocal, static_cast<std::uint64_t>(clients[i].id),
                static_cast<std::uint64_t>(st.task_index),
                static_cast<std::uint64_t>(st.round_in_task)});
    locals[i] = local_round(clients[i], model, x_t, grad_g, beta_t, epochs, stream);
    locals[i].memory_grad_i = pro[i].memory_grad_i;
  });

  RoundReport rep;
  rep.t = st.global_round;
  rep.task = st.task_index;
  rep.alpha_used = alpha_t;
  rep.beta_used = beta_t;
  rep.lambda.resize(n);
  rep.rates_used.resize(n);

  const double f_tilde_sq = norm_sq(f_tilde);
  std::vector<Vec> deltas(n);
  for (int i = 0; i < n; ++i) {
    rep.lambda[i] = dot(f_tilde, locals[i].accum_S);
    if (cfg.adaptive && memory_active) {
      rep.rates_used[i] = adap_lr(rep.lambda[i], f_tilde_sq, norm_sq(locals[i].accum_S),
                                  alpha_t, L, weights[i], n, cfg.adapt_case);
    } else {
      rep.rates_used[i] = {alpha_t, beta_t, false};
    }
    if (rep.lambda[i] > 0.0)
      ++rep.transference_count;
    else
      ++rep.interference_count;
    deltas[i] = compose_update(locals[i], x_t, grad_g, f_tilde, rep.rates_used[i].alpha_i,
                               rep.rates_used[i].beta_i, beta_t, epochs);
  }

  Vec x_next = server_aggregate(deltas, weights);

  Vec weighted_S = zeros(d);
  for (int i = 0; i < n; ++i) axpy(weights[i], locals[i].accum_S, weighted_S);
  rep.gamma = gamma_value(beta_t, alpha_t, L, weighted_S, f_tilde);
  for (int i = 0; i < n; ++i) {
    rep.gamma_base_surr += weights[i] * gamma_surrogate(cfg.adapt_case, alpha_t, beta_t, L,
                                                        weights[i], n, locals[i].accum_S, f_tilde);
    rep.gamma_ad += weights[i] * gamma_surrogate(cfg.adapt_case, rep.rates_used[i].alpha_i,
                                                 rep.rates_used[i].beta_i, L, weights[i], n,
                                                 locals[i].accum_S, f_tilde);
  }

  rep.grad_g_sq = norm_sq(grad_g);
  const double grad_g_norm = std::sqrt(rep.grad_g_sq);
  if (memory_active && grad_g_norm > 0.0) {
    for (int i = 0; i < n; ++i)
      rep.memory_ratio_max =
          std::max(rep.memory_ratio_max, norm(pro[i].memory_grad_i) / grad_g_norm);
  }
  if (have_past) {
    Vec f_full = zeros(d);
    Vec h_grad = zeros(d);
    for (int i = 0; i < n; ++i) {
      axpy(weights[i], grad_f_full[i], f_full);
      const double np = clients[i].past_pool.rows();
      const double nc = clients[i].current.rows();
      // mean gradient over the joint rows, as a count-weighted combination
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
      rep.overfit_B = overfit_term(alpha_t, beta_t, L, f_full, bias, weighted_S);
    }
  } else {
    rep.grad_h_sq = rep.grad_g_sq;  // no past data: the joint objective is the current one
  }

  if (observer) {
    RoundInternals internals{x_t,    grad_g, f_tilde, pro,     locals,
                             rep.rates_used, deltas,  x_next,  alpha_t, beta_t};
    observer(internals);
  }

  st.x = std::move(x_next);
  ++st.round_in_task;
  ++st.global_round;
  return rep;
}

// Finish the current task: fold the live shard into the past pool, extend the
// frozen memory with a per-task reservoir slab, install the new shard, and
// recompute data-proportional weights.
inline void task_transition(ServerState& st, std::vector<ClientState>& clients,
                            const std::vector<Dataset>& new_shards, int m0_per_task,
                            MemoryPolicy policy) {
  if (new_shards.size() != clients.size())
    throw ConfigError("shard count does not match client count");
  const auto finished = static_cast<std::uint64_t>(st.task_index);
  double total = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ClientState& c = clients[i];
    Rng mem_rng({st.cfg.seed, kStreamMemory, static_cast<std::uint64_t>(c.id), finished});
    RingBuffer slab = build_memory(c.current, m0_per_task, policy, mem_rng);
    c.memory.items.append(slab.items);
    c.memory.capacity += m0_per_task;
    c.memory.policy = policy;
    c.memory.frozen = true;
    c.memory.source_size += c.current.rows();
    c.past_pool.append(c.current);
    c.current = new_shards[i];
    if (c.current.empty()) throw ConfigError("empty shard for client " + std::to_string(c.id));
    total += c.current.rows();
  }
  for (auto& c : clients) c.weight = c.current.rows() / total;
  ++st.task_index;
  st.round_in_task = 0;
}

}  // namespace cflag
