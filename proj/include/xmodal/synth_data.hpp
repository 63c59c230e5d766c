#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "xmodal/embed_store.hpp"

namespace xmodal {

struct SynthConfig {
  int num_ids = 50;
  int imgs_per_id_vis = 20;
  int imgs_per_id_ir = 10;
  int latent_dim = 24;
  int raw_dim = 64;
  int embed_dim = 32;
  double modality_gap = 0.8;
  double intra_noise = 0.1;
  std::uint64_t seed = 0;
  // Held-out identities that populate the query/gallery partitions.
  int num_test_ids = 100;
  // Appearance modes per identity and modality; 1 disables them.
  int appearance_modes = 1;
  double mode_spread = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> query;    // IR rows of held-out identities
  std::vector<std::size_t> gallery;  // VIS rows of held-out identities
};

struct SynthCorpus {
  SynthConfig config;
  EmbeddingSet raw;           // raw_dim features, encoder input
  EmbeddingSet oracle_embed;  // embed_dim features from a fixed random projection
  RowMatrixD projection;      // embed_dim x raw_dim
  CorpusSplit split;

  EmbeddingSet train_raw() const;
  EmbeddingSet train_embed() const;
};

// Identity centers on the latent unit sphere are mapped into raw space by one
// of two modality maps. The maps differ by a principal angle of
// modality_gap * pi/4 and the infrared one also twists the latent by
// modality_gap * 0.6 rad. Samples are shifted by opposite modality offsets of
// norm 1.25 * modality_gap, perturbed by isotropic noise of expected norm
// 2 * intra_noise and normalized. Deterministic in the config.
SynthCorpus generate(const SynthConfig& config);

struct ClassBias {
  std::uint32_t id = 0;
  double intra = 0.0;                // mean same-modality pair distance
  std::optional<double> inter;       // mean cross-modality pair distance
};

struct BiasReport {
  std::vector<ClassBias> per_class;
  double mean_intra = 0.0;
  std::optional<double> mean_inter;
  std::optional<double> gap;  // mean_inter - mean_intra
};

// Cosine-distance modality bias within ground-truth classes.
BiasReport bias_report(const EmbeddingSet& set);
BiasReport bias_report(const SynthCorpus& corpus);

nlohmann::json to_json(const BiasReport& r);

}  // namespace xmodal
