#include "experiments.hpp"

#include <random>

#include "xmodal/error.hpp"

namespace xmodal::experiments {

CompositionRow composition(const SynthConfig& synth, const JaccardParams& params) {
  const SynthCorpus corpus = generate(synth);
  const EmbeddingSet emb = corpus.train_embed();
  const DistanceMatrix d = cosine_distance(emb);
  CompositionRow row;
  row.seed = synth.seed;
  row.cosine_inter = knn_composition(knn(d, params.k1), emb.modality()).mean;
  row.balanced_inter = knn_composition(knn_modality_balanced(d, emb.modality(), params.k1), emb.modality()).mean;
  return row;
}

std::vector<GapRow> distance_gaps(const SynthConfig& synth, const JaccardParams& params,
                                  const std::vector<double>& edges) {
  const SynthCorpus corpus = generate(synth);
  const EmbeddingSet emb = corpus.train_embed();
  std::vector<GapRow> rows;
  const auto add = [&](Metric metric, const DistanceMatrix& d) {
    GapRow r;
    r.seed = synth.seed;
    r.metric = metric;
    r.bundle = distance_distribution(emb, d, GroupBy::true_class, nullptr, edges);
    r.intra_mean = r.bundle.intra_mean();
    r.inter_mean = r.bundle[PairType::vis_ir].mean();
    r.gap = r.bundle.gap().value_or(0.0);
    rows.push_back(std::move(r));
  };
  add(Metric::cosine, cosine_distance(emb));
  add(Metric::jaccard_vanilla, jaccard_distance(emb, {params, JaccardMode::vanilla, 0.0}));
  add(Metric::jaccard_modality_aware, jaccard_distance(emb, {params, JaccardMode::modality_aware, 0.0}));
  return rows;
}

AriRow global_ari(const SynthConfig& synth, const ClusterConfig& cluster, JaccardMode mode, const JaccardParams& params) {
  const SynthCorpus corpus = generate(synth);
  const EmbeddingSet emb = corpus.train_embed();
  const ClusterAssignment a = cluster_global(emb, cluster, mode, params);
  AriRow row;
  row.seed = synth.seed;
  row.metric = mode == JaccardMode::vanilla ? Metric::jaccard_vanilla : Metric::jaccard_modality_aware;
  row.ari = ari(a, *emb.true_id());
  row.clusters = a.num_clusters;
  row.noise = a.noise_count();
  row.mixed_rate = mixed_cluster_rate(a, emb.modality());
  return row;
}

SynthConfig subset_corpus_config(std::uint64_t seed) {
  SynthConfig c;
  c.num_ids = 30;
  c.imgs_per_id_vis = 60;
  c.imgs_per_id_ir = 1;
  c.num_test_ids = 0;
  c.appearance_modes = 2;
  c.mode_spread = 0.4;
  c.seed = seed;
  return c;
}

RatioRow subset_clustering(const SynthConfig& synth, const ClusterConfig& cluster, double ratio,
                           const JaccardParams& params) {
  const SynthCorpus corpus = generate(synth);
  const EmbeddingSet emb = corpus.train_embed();
  ClusterConfig cfg = cluster;
  cfg.subset_ratio = ratio;
  std::mt19937_64 rng(cluster.seed);
  const ClusterAssignment a = cluster_intra(emb, Modality::vis, cfg, JaccardMode::vanilla, params, &rng);
  RatioRow row;
  row.seed = synth.seed;
  row.ratio = ratio;
  row.clusters = a.num_clusters;
  row.true_ids = synth.num_ids;
  row.ari = ari(a, *emb.true_id());
  return row;
}

std::vector<AblationRow> ablation_grid(const SynthConfig& synth, const TrainConfig& train) {
  const SynthCorpus corpus = generate(synth);
  std::vector<AblationRow> rows;
  TrainConfig no_subset = train;
  no_subset.subset_clustering = false;
  TrainConfig with_subset = train;
  with_subset.subset_clustering = true;
  const TrainResult base_plain = train_stage1(corpus, no_subset);
  const TrainResult base_subset = train_stage1(corpus, with_subset);

  const auto push = [&](const std::string& model, const TrainConfig& c, const RetrievalResult& r) {
    rows.push_back({synth.seed, model, c.subset_clustering, c.modality_aware_global, c.split_global_memory, r.rank1(),
                    r.map_score});
  };
  AblationRow m1{synth.seed, "M1", false, false, false, base_plain.stage1_retrieval.rank1(),
                 base_plain.stage1_retrieval.map_score};
  rows.push_back(m1);

  struct Variant {
    const char* model;
    bool subset;
    bool modality_aware;
    bool split;
  };
  for (const Variant v : {Variant{"M2", false, false, false}, Variant{"M3", false, true, false},
                          Variant{"M4", true, true, false}, Variant{"M5", true, false, true},
                          Variant{"M6", true, true, true}}) {
    TrainConfig c = train;
    c.subset_clustering = v.subset;
    c.modality_aware_global = v.modality_aware;
    c.split_global_memory = v.split;
    const TrainResult r = train_stage2(corpus, c, v.subset ? base_subset : base_plain);
    push(v.model, c, r.final_retrieval);
  }
  return rows;
}

}  // namespace xmodal::experiments
