#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "rng.hpp"

namespace cflag {

/// Ordered continual task sequence. Split-class streams carry disjoint label
/// sets per task over a shared global label space.
struct TaskStream {
  std::vector<Dataset> tasks;
  int classes_per_task = 0;
  int num_classes = 0;
};

// Isotropic Gaussian clusters, one fresh set of class ids per task; class
// means are sampled on a sphere of radius `separation`. Byte-identical per
// seed.
inline TaskStream make_split_gaussians(int num_tasks, int classes_per_task, int dim,
                                       int n_per_class, double separation, std::uint64_t seed) {
  if (num_tasks < 1 || classes_per_task < 1 || dim < 1 || n_per_class < 1)
    throw ConfigError("split-gaussian counts must be at least 1");
  if (!(separation > 0.0)) throw ConfigError("separation must be positive");
  TaskStream stream;
  stream.classes_per_task = classes_per_task;
  stream.num_classes = num_tasks * classes_per_task;
  for (int s = 0; s < num_tasks; ++s) {
    Dataset task(dim);
    for (int c = 0; c < classes_per_task; ++c) {
      const int cls = s * classes_per_task + c;
      Rng rng({seed, kStreamGen, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(c)});
      Vec mean(dim);
      for (int i = 0; i < dim; ++i) mean[i] = rng.normal();
      double mn = norm(mean);
      if (mn == 0.0) {
        mean[0] = 1.0;
        mn = 1.0;
      }
      for (int i = 0; i < dim; ++i) mean[i] *= separation / mn;
      Vec x(dim);
      for (int r = 0; r < n_per_class; ++r) {
        for (int i = 0; i < dim; ++i) x[i] = mean[i] + rng.normal();
        task.append_row(x, cls);
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

// Task s applies a fixed random coordinate permutation to the base features;
// task 0 is the identity, labels never change.
inline TaskStream make_permuted_features(const Dataset& base, int num_tasks, std::uint64_t seed) {
  if (num_tasks < 1) throw ConfigError("num_tasks must be at least 1");
  if (base.empty()) throw DataError("base dataset is empty");
  TaskStream stream;
  int max_label = 0;
  for (int y : base.labels) max_label = std::max(max_label, y);
  stream.num_classes = max_label + 1;
  stream.classes_per_task = stream.num_classes;
  stream.tasks.push_back(base);
  const int p = base.feature_dim;
  for (int s = 1; s < num_tasks; ++s) {
    Rng rng({seed, kStreamGen, 0x70, static_cast<std::uint64_t>(s)});
    std::vector<int> perm(p);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = p - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(perm[i], perm[j]);
    }
    Dataset task(p);
    Vec x(p);
    for (int r = 0; r < base.rows(); ++r) {
      auto src = base.row(r);
      for (int i = 0; i < p; ++i) x[i] = src[perm[i]];
      task.append_row(x, base.labels[r]);
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

struct PartitionSpec {
  int n_clients = 1;
  double zeta = 1.0;
  std::uint64_t seed = 1;
};

namespace detail {

// Largest-remainder rounding of proportions to integer counts summing to n.
inline std::vector<int> largest_remainder_counts(const Vec& props, int n) {
  const int k = static_cast<int>(props.size());
  std::vector<int> counts(k);
  std::vector<std::pair<double, int>> rem(k);
  int assigned = 0;
  for (int i = 0; i < k; ++i) {
    double raw = props[i] * n;
    counts[i] = static_cast<int>(std::floor(raw));
    assigned += counts[i];
    rem[i] = {raw - counts[i], i};
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int r = 0; r < n - assigned; ++r) ++counts[rem[r].second];
  return counts;
}

}  // namespace detail

// Per-class Dirichlet(zeta) proportions rounded by largest remainder; every
// row lands in exactly one shard and empty shards are repaired by moving one
// row from the largest shard.
inline std::vector<Dataset> dirichlet_partition(const Dataset& data, const PartitionSpec& spec) {
  if (data.empty()) throw DataError("cannot partition an empty dataset");
  if (spec.n_clients < 1) throw ConfigError("client count must be at least 1");
  if (!(spec.zeta > 0.0)) throw ConfigError("zeta must be positive");
  const int n_clients = spec.n_clients;
  if (data.rows() < n_clients)
    throw ConfigError("fewer rows than clients; every client needs at least one");
  if (n_clients == 1) return {data};

  std::map<int, std::vector<int>> by_class;
  for (int r = 0; r < data.rows(); ++r) by_class[data.labels[r]].push_back(r);

  std::vector<std::vector<int>> shard_rows(n_clients);
  for (auto& [cls, rows] : by_class) {
    Rng rng({spec.seed, kStreamPartition, static_cast<std::uint64_t>(cls)});
    Vec props = rng.dirichlet(spec.zeta, n_clients);
    auto counts = detail::largest_remainder_counts(props, static_cast<int>(rows.size()));
    std::size_t cursor = 0;
    for (int i = 0; i < n_clients; ++i)
      for (int c = 0; c < counts[i]; ++c) shard_rows[i].push_back(rows[cursor++]);
  }

  // Repair: no shard may end up empty.
  for (;;) {
    int empty = -1;
    for (int i = 0; i < n_clients; ++i)
      if (shard_rows[i].empty()) {
        empty = i;
        break;
      }
    if (empty < 0) break;
    int largest = 0;
    for (int i = 1; i < n_clients; ++i)
      if (shard_rows[i].size() > shard_rows[largest].size()) largest = i;
    if (shard_rows[largest].size() <= 1)
      throw ConfigError("cannot repair empty shards: not enough rows");
    shard_rows[empty].push_back(shard_rows[largest].back());
    shard_rows[largest].pop_back();
  }

  std::vector<Dataset> shards;
  shards.reserve(n_clients);
  for (int i = 0; i < n_clients; ++i) shards.push_back(data.select(shard_rows[i]));
  return shards;
}

// Deterministic held-out selection: k rows drawn without replacement.
inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, int k, Rng& rng) {
  if (k < 0 || k > n) throw ConfigError("invalid split size");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  std::vector<int> take(idx.begin(), idx.begin() + k);
  std::vector<int> rest(idx.begin() + k, idx.end());
  std::sort(take.begin(), take.end());
  std::sort(rest.begin(), rest.end());
  return {std::move(take), std::move(rest)};
}

}  // namespace cflag
