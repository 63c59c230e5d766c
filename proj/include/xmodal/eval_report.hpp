#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/embed_store.hpp"

namespace xmodal {

// Adjusted Rand index. Noise labels (< 0) count as singleton clusters.
double ari(std::span<const int> pred, std::span<const std::uint32_t> truth);
double ari(const ClusterAssignment& pred, std::span<const std::uint32_t> truth);

struct RetrievalResult {
  std::vector<double> cmc;  // cmc[r - 1] = fraction of queries matched within the top r
  double map_score = 0.0;
  Modality query_modality = Modality::ir;
  Modality gallery_modality = Modality::vis;
  std::size_t num_queries = 0;  // queries with at least one gallery match
  std::size_t excluded = 0;     // queries whose identity is absent from the gallery

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

// Cosine ranking of the gallery for every query; ties broken by gallery index.
RetrievalResult cmc_map(const EmbeddingSet& query, const EmbeddingSet& gallery, int max_rank);

enum class PairType : std::uint8_t { vis_vis = 0, ir_ir = 1, vis_ir = 2 };
std::string_view to_string(PairType t);

enum class GroupBy { true_class, predicted_cluster };

struct Histogram {
  PairType type = PairType::vis_vis;
  std::vector<double> edges;  // bins [edges[b], edges[b+1]); the outer bins also take out-of-range values
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;
  double sum = 0.0;

  double mean() const { return total == 0 ? 0.0 : sum / static_cast<double>(total); }
};

struct DistanceBundle {
  std::array<Histogram, 3> hist;  // indexed by PairType

  const Histogram& operator[](PairType t) const { return hist[static_cast<std::size_t>(t)]; }
  // Pooled mean over both same-modality pair types.
  double intra_mean() const;
  // Cross-modality mean minus intra_mean; empty without cross pairs.
  std::optional<double> gap() const;
};

std::vector<double> uniform_edges(double lo, double hi, int bins);

// Histograms of the pairwise distances inside each group; negative group
// labels are skipped.
DistanceBundle distance_distribution(const EmbeddingSet& set, const DistanceMatrix& d, std::span<const int> groups,
                                     const std::vector<double>& edges);
DistanceBundle distance_distribution(const EmbeddingSet& set, const DistanceMatrix& d, GroupBy group_by,
                                     const ClusterAssignment* predicted, const std::vector<double>& edges);

// One row of the per-epoch history. `ari` is the global ARI in stage 2 and the
// mean intra-modality ARI in stage 1. Cluster counts of -1 mean not computed.
struct EpochRecord {
  int epoch = 0;  // 1-based across both stages
  int stage = 1;
  double loss = 0.0;  // mean loss per step
  double ari = 0.0;
  int clusters_vis = -1;
  int clusters_ir = -1;
  int clusters_global = -1;
  double mixed_rate = 0.0;
  double rank1 = 0.0;
  double map_score = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
nlohmann::json to_json(const RetrievalResult& r);
nlohmann::json to_json(const DistanceBundle& b);

struct ReportArtifacts {
  nlohmann::json summary = nlohmann::json::object();
  std::optional<RetrievalResult> retrieval;
  std::vector<std::pair<std::string, DistanceBundle>> distributions;
  std::vector<EpochRecord> history;
};

// Writes summary.json plus one CSV per curve or histogram bundle:
//   cmc.csv                  rank,cmc
//   dist_<name>.csv          bin_lo,bin_hi,count,pair_type
//   epochs.csv               epoch,ari,clusters_vis,clusters_ir,clusters_global
//   loss.csv                 epoch,stage,loss
// Returns the written paths, summary first.
std::vector<std::filesystem::path> emit_report(const ReportArtifacts& artifacts, const std::filesystem::path& out_dir);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace xmodal
