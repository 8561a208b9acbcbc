#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace cflag {

enum class MemoryPolicy { Uniform, ClassBalanced };

inline const char* to_string(MemoryPolicy p) {
  return p == MemoryPolicy::Uniform ? "uniform" : "class-balanced";
}

inline MemoryPolicy memory_policy_from_string(const std::string& s) {
  if (s == "uniform") return MemoryPolicy::Uniform;
  if (s == "class-balanced") return MemoryPolicy::ClassBalanced;
  throw ConfigError("unknown memory policy '" + s + "'");
}

/// Fixed-capacity episodic memory. Built once from past-task data and frozen
/// for the whole task phase; the items dataset is the algorithm-visible view.
struct RingBuffer {
  int capacity = 0;
  Dataset items;
  MemoryPolicy policy = MemoryPolicy::Uniform;
  bool frozen = true;
  int source_size = 0;
};

namespace detail {

// Algorithm R over the row indices in [0, n); keeps insertion order until the
// first replacement, which preserves the full dataset when quota >= n.
inline std::vector<int> reservoir(int n, int quota, Rng& rng,
                                  const std::vector<int>* pool = nullptr) {
  std::vector<int> kept;
  kept.reserve(std::min(n, quota));
  for (int t = 0; t < n; ++t) {
    int row = pool ? (*pool)[t] : t;
    if (static_cast<int>(kept.size()) < quota) {
      kept.push_back(row);
    } else {
      auto r = rng.below(static_cast<std::uint64_t>(t) + 1);
      if (r < static_cast<std::uint64_t>(quota)) kept[r] = row;
    }
  }
  return kept;
}

}  // namespace detail

// Uniform policy: one-pass reservoir over the whole stream. Class-balanced:
// independent per-class reservoirs with quotas floor(m0/K), plus one extra
// for the first m0 mod K classes in ascending class id.
inline RingBuffer build_memory(const Dataset& past, int m0, MemoryPolicy policy, Rng& rng) {
  if (past.empty()) throw DataError("cannot build memory from an empty dataset");
  if (m0 < 1) throw ConfigError("memory capacity must be at least 1");
  RingBuffer buf;
  buf.capacity = m0;
  buf.policy = policy;
  buf.frozen = true;
  buf.source_size = past.rows();
  if (policy == MemoryPolicy::Uniform) {
    buf.items = past.select(detail::reservoir(past.rows(), m0, rng));
    return buf;
  }
  std::map<int, std::vector<int>> by_class;
  for (int r = 0; r < past.rows(); ++r) by_class[past.labels[r]].push_back(r);
  const int k = static_cast<int>(by_class.size());
  const int base = m0 / k;
  const int extra = m0 % k;
  std::vector<int> picked;
  int rank = 0;
  for (auto& [cls, rows] : by_class) {
    const int quota = base + (rank < extra ? 1 : 0);
    ++rank;
    if (quota == 0) continue;
    auto kept = detail::reservoir(static_cast<int>(rows.size()), quota, rng, &rows);
    picked.insert(picked.end(), kept.begin(), kept.end());
  }
  buf.items = past.select(picked);
  return buf;
}

// Full-batch gradient restricted to the buffer contents: the (biased) memory
// gradient used as the past-task guide.
inline Vec memory_gradient(const LossModel& m, const Vec& params, const RingBuffer& buf) {
  if (buf.items.empty()) throw DataError("memory buffer is empty");
  return grad(m, params, buf.items);
}

// Uniform sub-sample of the buffer without replacement; the whole buffer in
// order when k covers it. Off by default everywhere, the theory-first path
// uses the full buffer.
inline Dataset memory_batch(const RingBuffer& buf, int k, Rng& rng) {
  if (buf.items.empty()) throw DataError("memory buffer is empty");
  if (k < 1) throw ConfigError("memory batch size must be at least 1");
  return buf.items.select(detail::reservoir(buf.items.rows(), k, rng));
}

struct BiasDiagnostic {
  Vec bias;      // memory gradient minus the true past-task gradient
  double m_hat;  // ||bias||^2 / ||grad f||^2, inf when only the bias is nonzero
};

inline BiasDiagnostic bias_diagnostic(const LossModel& m, const Vec& params,
                                      const RingBuffer& buf, const Dataset& past) {
  if (past.empty()) throw DataError("past dataset is empty");
  BiasDiagnostic out;
  Vec full = grad(m, params, past);
  out.bias = sub(memory_gradient(m, params, buf), full);
  double fn = norm_sq(full);
  double bn = norm_sq(out.bias);
  if (fn > 0.0)
    out.m_hat = bn / fn;
  else
    out.m_hat = bn > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return out;
}

}  // namespace cflag
