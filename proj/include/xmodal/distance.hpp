#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "xmodal/embed_store.hpp"

namespace xmodal {

enum class Metric : std::uint8_t { cosine = 0, jaccard_vanilla = 1, jaccard_modality_aware = 2 };

std::string_view to_string(Metric m);

struct JaccardParams {
  int k1 = 30;
  int k2 = 6;
};

// Dense symmetric N x N distance matrix, row-major.
class DistanceMatrix {
 public:
  DistanceMatrix(std::size_t n, Metric metric, std::optional<JaccardParams> params = std::nullopt);
  DistanceMatrix(std::size_t n, std::vector<double> values, Metric metric,
                 std::optional<JaccardParams> params = std::nullopt);

  std::size_t size() const { return n_; }
  Metric metric() const { return metric_; }
  const std::optional<JaccardParams>& params() const { return params_; }

  double operator()(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * n_, n_}; }
  std::span<double> row(std::size_t i) { return {values_.data() + i * n_, n_}; }
  const std::vector<double>& values() const { return values_; }

  // Throws NumericError when symmetry, zero diagonal or metric range is violated.
  void validate(double tol = 1e-6) const;

 private:
  std::size_t n_;
  std::vector<double> values_;
  Metric metric_;
  std::optional<JaccardParams> params_;
};

// Binary layout: "XMD1" | u32 N | u8 metric | N*N little-endian f32, row-major.
void save_distance(const DistanceMatrix& d, const std::filesystem::path& path);
DistanceMatrix load_distance(const std::filesystem::path& path);

// Fixed-length per-query neighbor lists, ascending by (distance, index).
struct NeighborList {
  std::size_t n = 0;
  int k = 0;
  bool balanced = false;
  std::vector<std::uint32_t> index;  // n * k
  std::vector<double> distance;      // n * k

  std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return {index.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
  }
  std::span<const double> distances(std::size_t i) const {
    return {distance.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
  }
};

// Per-query expanded k-reciprocal sets, each sorted ascending and containing the query.
struct ReciprocalSet {
  std::vector<std::vector<std::uint32_t>> members;
};

// Row-compressed non-negative weights; columns ascending within each row.
struct SparseRows {
  std::size_t cols = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t rows() const { return offsets.size() - 1; }
  std::span<const std::uint32_t> row_index(std::size_t i) const {
    return {index.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
  std::span<const double> row_value(std::size_t i) const {
    return {value.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
  double at(std::size_t i, std::size_t j) const;
};

DistanceMatrix cosine_distance(const EmbeddingSet& set);

NeighborList knn(const DistanceMatrix& d, int k);

// Union of the k1/2 nearest same-modality and k1/2 nearest other-modality
// non-self rows, merged ascending by (distance, index).
NeighborList knn_modality_balanced(const DistanceMatrix& d, std::span<const Modality> modality,
                                   int k1);

// Mutual-kNN sets over the first k1 entries of each list, expanded by every
// member's k1/2-reciprocal set that overlaps the current set in more than
// two thirds of its size.
ReciprocalSet reciprocal_expand(const NeighborList& neighbors, int k1);

// V[i][j] proportional to exp(-D[i][j]) over the expanded set of i, rows summing to 1.
SparseRows v_encode(const DistanceMatrix& d, const ReciprocalSet& reciprocal);

// Plain local query expansion: mean of V over the query and its k2 - 1 nearest rows.
SparseRows local_query_expansion(const SparseRows& v, const NeighborList& neighbors, int k2);

// Balanced expansion: mean of V over the query, its k2/2 - 1 nearest
// same-modality rows and its k2/2 nearest other-modality rows.
SparseRows balanced_lqe(const SparseRows& v, const DistanceMatrix& d,
                        std::span<const Modality> modality, int k2);

// 1 - sum(min) / sum(max) between rows of V.
DistanceMatrix jaccard_from_v(const SparseRows& v, Metric tag = Metric::jaccard_vanilla,
                              std::optional<JaccardParams> params = std::nullopt);

enum class JaccardMode { vanilla, modality_aware };

struct JaccardConfig {
  JaccardParams params;
  JaccardMode mode = JaccardMode::vanilla;
  // Weight of the cosine distance mixed into the output; 0 gives pure Jaccard.
  double cosine_mix = 0.0;
};

DistanceMatrix jaccard_distance(const EmbeddingSet& set, const JaccardConfig& config);

struct Composition {
  std::vector<double> inter_fraction;  // per query
  double mean = 0.0;
};

Composition knn_composition(const NeighborList& neighbors, std::span<const Modality> modality);

}  // namespace xmodal
