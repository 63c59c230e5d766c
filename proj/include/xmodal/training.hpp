#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/eval_report.hpp"
#include "xmodal/prototype_memory.hpp"
#include "xmodal/synth_data.hpp"

namespace xmodal {

// forward(x) = normalize(weight * x)
struct ToyEncoder {
  RowMatrixD weight;  // embed_dim x raw_dim

  // Pre-normalization outputs, one row per input row.
  RowMatrixD project(const RowMatrixD& raw) const;
  EmbeddingSet encode(const EmbeddingSet& raw) const;

  void save(const std::filesystem::path& path) const;
  static ToyEncoder load(const std::filesystem::path& path);
};

struct TrainConfig {
  int epochs_stage1 = 20;
  int epochs_stage2 = 20;
  int batch_ids = 8;        // P
  int batch_instances = 16;  // K
  double lr = 1e-3;
  int lr_step = 20;          // epochs between decays, counted within a stage
  double lr_gamma = 0.1;
  double mu = 0.1;
  double tau = 0.05;
  ClusterConfig cluster;
  JaccardParams jaccard;
  std::size_t k_neg = 50;
  std::uint64_t seed = 0;
  int iters_per_epoch = 0;  // 0: one pass over the clustered rows of the larger modality
  int max_rank = 20;
  // Ablation switches.
  bool subset_clustering = true;
  bool modality_aware_global = true;
  bool split_global_memory = true;  // false: one prototype per global cluster, single positive

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Batch of P distinct non-noise clusters with K members each, drawn with
// replacement from clusters smaller than K. Returns local row indices.
std::vector<std::size_t> pk_sample(const ClusterAssignment& assignment, int p, int k, std::mt19937_64& rng);

struct Banks {
  PrototypeBank vis;
  PrototypeBank ir;
  std::optional<PrototypeBank> global;
};

// Training rows and held-out evaluation rows, encoder inputs as f64.
struct TrainData {
  EmbeddingSet train;
  EmbeddingSet query;
  EmbeddingSet gallery;

  static TrainData from_corpus(const SynthCorpus& corpus);
};

EpochRecord stage1_epoch(const TrainData& data, ToyEncoder& encoder, Banks& banks, const TrainConfig& config,
                         int epoch, std::mt19937_64& rng);
EpochRecord stage2_epoch(const TrainData& data, ToyEncoder& encoder, Banks& banks, const TrainConfig& config,
                         int epoch, std::mt19937_64& rng);

struct TrainResult {
  ToyEncoder encoder;
  ToyEncoder stage1_encoder;
  std::vector<EpochRecord> history;
  RetrievalResult stage1_retrieval;
  RetrievalResult final_retrieval;
};

ToyEncoder initial_encoder(const SynthCorpus& corpus);

// Stage 1 only; final_retrieval equals stage1_retrieval.
TrainResult train_stage1(const SynthCorpus& corpus, const TrainConfig& config);
// Stage 2 starting from the stage-1 result. Its random stream does not depend
// on stage 1, so a reused stage-1 result gives the same outcome as train().
TrainResult train_stage2(const SynthCorpus& corpus, const TrainConfig& config, const TrainResult& stage1);
TrainResult train(const SynthCorpus& corpus, const TrainConfig& config);

RetrievalResult evaluate(const TrainData& data, const ToyEncoder& encoder, int max_rank);

nlohmann::json to_json(const TrainResult& r);

}  // namespace xmodal
