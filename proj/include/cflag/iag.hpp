#pragma once

#include <cassert>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "model.hpp"

namespace cflag {

/// Incrementally aggregated gradient cache for one client and one local
/// round. cache[j] holds the component gradient last evaluated at local step
/// tau[j]; aggregate is maintained incrementally as the mean of the cache and
/// accum collects the aggregate used at each local step (the S_i of the
/// drift identity and the interference statistic).
struct IagState {
  std::vector<Vec> cache;
  std::vector<int> tau;
  Vec aggregate;
  Vec accum;
  int steps_taken = 0;

  int size() const { return static_cast<int>(cache.size()); }
};

// Full-gradient prologue: every component refreshed at params, tau = 0, and
// the aggregate set to the exact full-batch gradient.
inline IagState iag_init(const LossModel& m, const Vec& params, const Dataset& data) {
  if (data.empty()) throw DataError("cannot initialize IAG state on an empty dataset");
  IagState st;
  const int n = data.rows();
  st.cache.reserve(n);
  for (int j = 0; j < n; ++j) st.cache.push_back(grad_component(m, params, data, j));
  st.tau.assign(n, 0);
  st.aggregate = grad(m, params, data);
  st.accum = zeros(params.size());
  st.steps_taken = 0;
  return st;
}

inline const Vec& delayed_grad(const IagState& st) { return st.aggregate; }

// Mean of the cache recomputed from scratch; debug/oracle path for the
// incrementally maintained aggregate.
inline Vec iag_recompute(const IagState& st) {
  Vec out = zeros(st.aggregate.size());
  for (const Vec& c : st.cache) axpy(1.0, c, out);
  const double inv_n = 1.0 / st.size();
  for (double& v : out) v *= inv_n;
  return out;
}

// Refresh component j at the given iterate as local step k. Steps must be
// consecutive: k == steps_taken + 1.
inline void iag_refresh(IagState& st, const LossModel& m, const Dataset& data, int j,
                        const Vec& params, int k) {
  if (j < 0 || j >= st.size())
    throw DataError("component index " + std::to_string(j) + " out of range");
  if (k != st.steps_taken + 1)
    throw ConfigError("local step " + std::to_string(k) + " out of order; expected " +
                      std::to_string(st.steps_taken + 1));
  Vec fresh = grad_component(m, params, data, j);
  const double inv_n = 1.0 / st.size();
  for (std::size_t i = 0; i < fresh.size(); ++i)
    st.aggregate[i] += (fresh[i] - st.cache[j][i]) * inv_n;
  st.cache[j] = std::move(fresh);
  st.tau[j] = k;
  st.steps_taken = k;
  // debug mode: the O(d) incremental update must track a full recompute
  assert(rel_diff(st.aggregate, iag_recompute(st)) <= 1e-10);
}

inline void iag_accumulate(IagState& st) { axpy(1.0, st.aggregate, st.accum); }

// ||delayed aggregate - true full gradient at params||, the e^i_{t,k}
// staleness diagnostic.
inline double gradient_error(const IagState& st, const LossModel& m, const Vec& params,
                             const Dataset& data) {
  return norm(sub(st.aggregate, grad(m, params, data)));
}

}  // namespace cflag
