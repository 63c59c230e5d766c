#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/eval_report.hpp"
#include "xmodal/synth_data.hpp"
#include "xmodal/training.hpp"

namespace xmodal::experiments {

// Mean fraction of other-modality rows among each row's cosine top-k1, and the
// same over the modality-balanced lists.
struct CompositionRow {
  std::uint64_t seed = 0;
  double cosine_inter = 0.0;
  double balanced_inter = 0.0;
};
CompositionRow composition(const SynthConfig& synth, const JaccardParams& params);

// Intra-class distance statistics of the oracle embedding (training rows)
// under cosine, vanilla Jaccard and modality-aware Jaccard.
struct GapRow {
  std::uint64_t seed = 0;
  Metric metric = Metric::cosine;
  double intra_mean = 0.0;
  double inter_mean = 0.0;
  double gap = 0.0;
  DistanceBundle bundle;
};
std::vector<GapRow> distance_gaps(const SynthConfig& synth, const JaccardParams& params,
                                  const std::vector<double>& edges);

// Global density clustering of the oracle embedding (training rows).
struct AriRow {
  std::uint64_t seed = 0;
  Metric metric = Metric::jaccard_vanilla;
  double ari = 0.0;
  int clusters = 0;
  std::size_t noise = 0;
  double mixed_rate = 0.0;
};
AriRow global_ari(const SynthConfig& synth, const ClusterConfig& cluster, JaccardMode mode, const JaccardParams& params);

// Visible-only corpus with twice k1 images per identity and two appearance
// modes per identity, where full-set clustering over-segments.
SynthConfig subset_corpus_config(std::uint64_t seed);

struct RatioRow {
  std::uint64_t seed = 0;
  double ratio = 1.0;
  int clusters = 0;
  int true_ids = 0;
  double ari = 0.0;
};
// Clusters the visible rows of the oracle embedding at the given subset ratio.
RatioRow subset_clustering(const SynthConfig& synth, const ClusterConfig& cluster, double ratio,
                           const JaccardParams& params);

struct AblationRow {
  std::uint64_t seed = 0;
  std::string model;  // M1 .. M6
  bool subset = false;
  bool modality_aware = false;
  bool split_memory = false;
  double rank1 = 0.0;
  double map_score = 0.0;
};
// Stage-1 baseline plus the five two-stage variants, sharing stage-1 runs.
std::vector<AblationRow> ablation_grid(const SynthConfig& synth, const TrainConfig& train);

}  // namespace xmodal::experiments
