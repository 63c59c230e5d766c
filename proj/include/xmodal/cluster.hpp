#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "xmodal/distance.hpp"
#include "xmodal/embed_store.hpp"

namespace xmodal {

inline constexpr int kNoise = -1;

struct ClusterAssignment {
  std::vector<int> labels;  // kNoise or 0..num_clusters-1
  int num_clusters = 0;
  std::vector<std::vector<std::size_t>> members;  // cluster -> local row indices
  // Parent-set row of each local row, when clustering ran on a subset.
  std::optional<std::vector<std::size_t>> source_indices;

  // Builds a consistent assignment, relabeling clusters contiguously in
  // order of first appearance.
  static ClusterAssignment from_labels(std::vector<int> labels);

  std::size_t size() const { return labels.size(); }
  std::size_t noise_count() const;
  std::size_t parent_row(std::size_t local) const {
    return source_indices ? (*source_indices)[local] : local;
  }
  // Labels scattered onto a parent set of `parent_size` rows; rows outside
  // the clustered subset read kNoise.
  std::vector<int> parent_labels(std::size_t parent_size) const;
};

struct ClusterConfig {
  double eps = 0.6;
  int min_samples = 4;
  double subset_ratio = 0.5;
  std::uint64_t seed = 0;
};

// Density clustering over a precomputed distance matrix. A row is core when at
// least min_samples rows (itself included) lie within eps. A border row
// joins the cluster of its lowest-index core neighbor. Clusters are numbered
// in order of their first row.
ClusterAssignment dbscan(const DistanceMatrix& d, const ClusterConfig& config);

// ceil(ratio * n) distinct indices drawn uniformly, returned ascending.
std::vector<std::size_t> subset_sample(std::size_t n, double ratio, std::mt19937_64& rng);

// Clusters the rows of one modality with Jaccard distance. The visible
// modality is subsampled when subset_ratio < 1 and `rng` is given.
ClusterAssignment cluster_intra(const EmbeddingSet& set, Modality modality, const ClusterConfig& config,
                                JaccardMode distance_mode, const JaccardParams& params = {},
                                std::mt19937_64* rng = nullptr);

ClusterAssignment cluster_global(const EmbeddingSet& set, const ClusterConfig& config,
                                 JaccardMode distance_mode = JaccardMode::modality_aware,
                                 const JaccardParams& params = {});

// Fraction of clusters holding rows of both modalities.
double mixed_cluster_rate(const ClusterAssignment& assignment, std::span<const Modality> parent_modality);

}  // namespace xmodal
