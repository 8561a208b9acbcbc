#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "iag.hpp"
#include "model.hpp"
#include "replay.hpp"
#include "rng.hpp"

namespace cflag {

/// One federated participant. current is the live task shard, past_pool the
/// union of finished shards (simulator-side bookkeeping; the algorithm only
/// ever sees the frozen memory buffer). iag holds the most recent local
/// round's cache.
struct ClientState {
  int id = 0;
  double weight = 1.0;  // p_i, data-proportional by default
  Dataset current;
  Dataset past_pool;
  RingBuffer memory;
  IagState iag;
};

struct PrologueGrads {
  Vec grad_g_i;       // exact full gradient on the current shard
  Vec memory_grad_i;  // exact full gradient on the memory buffer
};

inline PrologueGrads client_prologue(const ClientState& c, const LossModel& m, const Vec& x_t) {
  if (c.current.empty()) throw DataError("client has no current-task data");
  if (c.memory.items.empty()) throw DataError("client has no replay memory");
  return {grad(m, x_t, c.current), memory_gradient(m, x_t, c.memory)};
}

struct LocalRoundResult {
  Vec x_end;                        // x^i_{t,E}
  Vec accum_S;                      // S_i, the sum of the aggregates stepped on
  Vec grad_g_i;                     // gradient on the current shard at x_t
  Vec memory_grad_i;                // memory gradient at x_t (set by the coordinator)
  std::vector<double> drift_norms;  // ||x^i_{t,k} - x_t|| for k = 0..E-1
};

// E local steps of x <- x - beta * (grad_g_global - grad_g_i + delayed
// aggregate). Step 0 uses the init-time full gradient; from step 1 on, one
// component chosen by pick_index(k) is refreshed at the current iterate
// before stepping. The aggregate entering each step is accumulated into S_i.
inline LocalRoundResult local_round(ClientState& c, const LossModel& m, const Vec& x_t,
                                    const Vec& grad_g_global, double beta, int epochs,
                                    const std::function<int(int)>& pick_index) {
  if (epochs < 1) throw ConfigError("local epochs must be at least 1");
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  c.iag = iag_init(m, x_t, c.current);
  LocalRoundResult res;
  res.grad_g_i = c.iag.aggregate;
  Vec corr = sub(grad_g_global, res.grad_g_i);
  Vec x = x_t;
  res.drift_norms.resize(epochs);
  for (int k = 0; k < epochs; ++k) {
    res.drift_norms[k] = norm(sub(x, x_t));
    if (k >= 1) iag_refresh(c.iag, m, c.current, pick_index(k), x, k);
    iag_accumulate(c.iag);
    const Vec& agg = c.iag.aggregate;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= beta * (corr[i] + agg[i]);
  }
  check_finite(x, "local iterate");
  res.x_end = std::move(x);
  res.accum_S = c.iag.accum;
  return res;
}

// Component sampling is uniform with replacement over the current shard.
inline LocalRoundResult local_round(ClientState& c, const LossModel& m, const Vec& x_t,
                                    const Vec& grad_g_global, double beta, int epochs,
                                    Rng& stream) {
  const int n = c.current.rows();
  return local_round(c, m, x_t, grad_g_global, beta, epochs, [&stream, n](int) {
    return static_cast<int>(stream.below(static_cast<std::uint64_t>(n)));
  });
}

// Transmitted payload
//   x_t - beta_base*E*(grad_g - grad_g_i) - beta_i*S_i - alpha_i*f_tilde.
// With beta_i == beta_base and alpha_i == alpha this is exactly
// x_end - alpha*f_tilde; only the S_i part of the drift is rescaled by an
// adapted rate, and the memory step uses the broadcast global gradient.
inline Vec compose_update(const LocalRoundResult& r, const Vec& x_t, const Vec& grad_g_global,
                          const Vec& f_tilde_global, double alpha_i, double beta_i,
                          double beta_base, int epochs) {
  if (alpha_i < 0.0 || beta_i < 0.0 || beta_base < 0.0)
    throw ConfigError("learning rates must be nonnegative");
  Vec delta = x_t;
  const double be = beta_base * epochs;
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] -= be * (grad_g_global[i] - r.grad_g_i[i]) + beta_i * r.accum_S[i] +
                alpha_i * f_tilde_global[i];
  check_finite(delta, "client update");
  return delta;
}

}  // namespace cflag
