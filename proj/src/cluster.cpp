#include "xmodal/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>
#include <unordered_map>

#include "xmodal/error.hpp"
#include "xmodal/log.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

ClusterAssignment ClusterAssignment::from_labels(std::vector<int> labels) {
  ClusterAssignment out;
  std::unordered_map<int, int> remap;
  for (int& l : labels) {
    if (l < 0) {
      l = kNoise;
      continue;
    }
    auto [it, inserted] = remap.try_emplace(l, static_cast<int>(remap.size()));
    l = it->second;
  }
  out.num_clusters = static_cast<int>(remap.size());
  out.members.resize(static_cast<std::size_t>(out.num_clusters));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kNoise) out.members[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  out.labels = std::move(labels);
  return out;
}

std::size_t ClusterAssignment::noise_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kNoise));
}

std::vector<int> ClusterAssignment::parent_labels(std::size_t parent_size) const {
  std::vector<int> out(parent_size, kNoise);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t p = parent_row(i);
    if (p >= parent_size) throw UsageError("assignment source index exceeds parent size");
    out[p] = labels[i];
  }
  return out;
}

ClusterAssignment dbscan(const DistanceMatrix& d, const ClusterConfig& config) {
  if (!(config.eps > 0.0)) throw UsageError("eps must be > 0");
  if (config.min_samples < 1) throw UsageError("min_samples must be >= 1");
  const std::size_t n = d.size();
  if (d.values().size() != n * n) throw UsageError("distance matrix is not square");

  std::vector<std::vector<std::uint32_t>> region(n);
  parallel_for(0, n, [&](std::size_t i) {
    const auto row = d.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] <= config.eps) region[i].push_back(static_cast<std::uint32_t>(j));
    }
  });
  std::vector<char> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    // The region always contains i itself (zero diagonal).
    core[i] = region[i].size() >= static_cast<std::size_t>(config.min_samples) ? 1 : 0;
  }

  std::vector<int> labels(n, kNoise);
  int next = 0;
  std::deque<std::uint32_t> queue;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!core[seed] || labels[seed] != kNoise) continue;
    labels[seed] = next;
    queue.assign(1, static_cast<std::uint32_t>(seed));
    while (!queue.empty()) {
      const std::uint32_t p = queue.front();
      queue.pop_front();
      for (std::uint32_t q : region[p]) {
        if (core[q] && labels[q] == kNoise) {
          labels[q] = next;
          queue.push_back(q);
        }
      }
    }
    ++next;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::uint32_t q : region[i]) {  // ascending, so the first core hit is the lowest index
      if (core[q]) {
        labels[i] = labels[q];
        break;
      }
    }
  }
  return ClusterAssignment::from_labels(std::move(labels));
}

std::vector<std::size_t> subset_sample(std::size_t n, double ratio, std::mt19937_64& rng) {
  if (!(ratio > 0.0) || ratio > 1.0) throw UsageError("subset ratio must be in (0, 1]");
  const auto count = std::min(n, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (count == n) return all;
  // Partial Fisher-Yates keeps the draw a pure function of the rng stream.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

ClusterAssignment cluster_intra(const EmbeddingSet& set, Modality modality, const ClusterConfig& config,
                                JaccardMode distance_mode, const JaccardParams& params,
                                std::mt19937_64* rng) {
  std::vector<std::size_t> rows = rows_of(set, modality);
  if (rows.empty()) throw DataError(std::string("no ") + std::string(to_string(modality)) + " rows to cluster");
  if (modality == Modality::vis && config.subset_ratio < 1.0 && rng != nullptr) {
    const auto picked = subset_sample(rows.size(), config.subset_ratio, *rng);
    std::vector<std::size_t> sampled;
    sampled.reserve(picked.size());
    for (std::size_t p : picked) sampled.push_back(rows[p]);
    rows = std::move(sampled);
  }
  const SubsetView view = subset_view(set, rows);
  const DistanceMatrix d = jaccard_distance(view.set, {params, distance_mode, 0.0});
  ClusterAssignment out = dbscan(d, config);
  out.source_indices = view.parent_index;
  return out;
}

ClusterAssignment cluster_global(const EmbeddingSet& set, const ClusterConfig& config,
                                 JaccardMode distance_mode, const JaccardParams& params) {
  if (set.count(Modality::vis) == 0 || set.count(Modality::ir) == 0) {
    throw DataError("global clustering needs both modalities present");
  }
  return dbscan(jaccard_distance(set, {params, distance_mode, 0.0}), config);
}

double mixed_cluster_rate(const ClusterAssignment& assignment, std::span<const Modality> parent_modality) {
  if (assignment.num_clusters == 0) return 0.0;
  std::size_t mixed = 0;
  for (const auto& members : assignment.members) {
    bool vis = false;
    bool ir = false;
    for (std::size_t local : members) {
      const Modality m = parent_modality[assignment.parent_row(local)];
      vis = vis || m == Modality::vis;
      ir = ir || m == Modality::ir;
    }
    mixed += (vis && ir) ? 1 : 0;
  }
  return static_cast<double>(mixed) / assignment.num_clusters;
}

}  // namespace xmodal
