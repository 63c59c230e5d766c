#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "xmodal/cluster.hpp"
#include "xmodal/embed_store.hpp"

namespace xmodal {

enum class ProtoTag : std::uint8_t { vis = 0, ir = 1, none = 2 };

std::string_view to_string(ProtoTag t);
ProtoTag proto_tag_from_string(std::string_view s);

struct PrototypeBank {
  RowMatrixD vectors;                      // C x d, unit rows
  std::vector<ProtoTag> modality_tag;      // per prototype
  std::vector<int> owner_cluster;          // per prototype
  double mu = 0.1;
  // Indexed by cluster id: prototype indices representing that cluster.
  std::vector<std::vector<std::size_t>> positives;

  std::size_t size() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
  // Prototype of cluster z for modality m, or the cluster's only prototype.
  std::size_t prototype_for(int cluster, Modality m) const;
  // Throws DataError when an invariant does not hold.
  void validate(double tol = 1e-6) const;
};

// One prototype per cluster, the normalized mean of its members.
PrototypeBank build_intra_bank(const EmbeddingSet& set, const ClusterAssignment& assignment, double mu);

// Each global cluster is split by modality; every non-empty subcluster gets a
// prototype (visible first).
PrototypeBank build_global_bank_split(const EmbeddingSet& set, const ClusterAssignment& global, double mu);

// A single modality-agnostic prototype per global cluster.
PrototypeBank build_global_bank_unified(const EmbeddingSet& set, const ClusterAssignment& global, double mu);

// v <- mu * v + (1 - mu) * f, renormalized.
void ema_update(PrototypeBank& bank, std::size_t index, std::span<const double> feature);

// The k_neg prototypes most similar to the query, outside `exclude`, ordered by
// descending inner product then ascending index.
std::vector<std::size_t> hard_negatives(const PrototypeBank& bank, std::span<const double> query,
                                        std::span<const std::size_t> exclude, std::size_t k_neg);

// Vectors go to `path` in the embedding binary format (f32), metadata to
// `path` + ".json".
void save_bank(const PrototypeBank& bank, const std::filesystem::path& path);
PrototypeBank load_bank(const std::filesystem::path& path);

}  // namespace xmodal
