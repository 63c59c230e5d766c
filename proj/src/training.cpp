#include "xmodal/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "xmodal/error.hpp"
#include "xmodal/log.hpp"
#include "xmodal/objectives.hpp"

namespace xmodal {

namespace {

constexpr std::uint64_t kStage2Stream = 0x9E3779B97F4A7C15ULL;

RowMatrixD as_double(const EmbeddingSet& set) { return set.features().cast<double>(); }

RowMatrixD normalized_rows(const RowMatrixD& pre) {
  RowMatrixD out = pre;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("encoder produced a zero or non-finite feature");
    out.row(i) /= n;
  }
  return out;
}

double stage_lr(const TrainConfig& c, int stage_epoch) {
  const int decays = c.lr_step > 0 ? (stage_epoch - 1) / c.lr_step : 0;
  return c.lr * std::pow(c.lr_gamma, decays);
}

// One sampled batch: parent rows, per-row cluster labels, and modalities.
struct Batch {
  std::vector<std::size_t> rows;
  std::vector<int> labels;
};

Batch sample_batch(const ClusterAssignment& a, const TrainConfig& c, std::mt19937_64& rng) {
  Batch b;
  if (a.num_clusters == 0) return b;
  const int p = std::min(c.batch_ids, a.num_clusters);
  for (std::size_t l : pk_sample(a, p, c.batch_instances, rng)) {
    b.rows.push_back(a.parent_row(l));
    b.labels.push_back(a.labels[l]);
  }
  return b;
}

RowMatrixD gather(const RowMatrixD& x, const std::vector<std::size_t>& rows) {
  RowMatrixD out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Applies d loss / d features to the encoder by plain gradient descent.
void descend(ToyEncoder& encoder, const RowMatrixD& x, const RowMatrixD& pre, const RowMatrixD& grad, double lr) {
  const RowMatrixD g_pre = grad_through_normalization(grad, pre);
  const RowMatrixD step = g_pre.transpose() * x;
  if (!step.allFinite()) throw NumericError("encoder gradient is not finite");
  if (lr != 0.0) encoder.weight -= lr * step;
  if (!encoder.weight.allFinite()) throw NumericError("encoder weight diverged");
}

std::span<const double> row_span(const RowMatrixD& m, std::size_t i) {
  return {m.data() + i * static_cast<std::size_t>(m.cols()), static_cast<std::size_t>(m.cols())};
}

double intra_step(const RowMatrixD& x_all, ToyEncoder& encoder, Banks& banks, const ClusterAssignment& a_vis,
                  const ClusterAssignment& a_ir, const TrainConfig& c, double lr, std::mt19937_64& rng) {
  const Batch bv = sample_batch(a_vis, c, rng);
  const Batch bi = sample_batch(a_ir, c, rng);
  std::vector<std::size_t> rows = bv.rows;
  rows.insert(rows.end(), bi.rows.begin(), bi.rows.end());
  if (rows.empty()) return 0.0;
  const RowMatrixD x = gather(x_all, rows);
  const RowMatrixD pre = encoder.project(x);
  const RowMatrixD f = normalized_rows(pre);
  RowMatrixD grad = RowMatrixD::Zero(f.rows(), f.cols());
  double loss = 0.0;
  const auto nv = static_cast<Eigen::Index>(bv.rows.size());
  const auto ni = static_cast<Eigen::Index>(bi.rows.size());
  const auto to_labels = [](const std::vector<int>& l) { return std::vector<std::size_t>(l.begin(), l.end()); };
  if (nv > 0) {
    const auto out = intra_infonce(f.topRows(nv), to_labels(bv.labels), banks.vis, c.tau);
    loss += out.value;
    grad.topRows(nv) = out.grad;
  }
  if (ni > 0) {
    const auto out = intra_infonce(f.bottomRows(ni), to_labels(bi.labels), banks.ir, c.tau);
    loss += out.value;
    grad.bottomRows(ni) = out.grad;
  }
  descend(encoder, x, pre, grad, lr);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const bool vis = i < nv;
    const int label = vis ? bv.labels[static_cast<std::size_t>(i)] : bi.labels[static_cast<std::size_t>(i - nv)];
    ema_update(vis ? banks.vis : banks.ir, static_cast<std::size_t>(label), row_span(f, static_cast<std::size_t>(i)));
  }
  return loss;
}

double global_step(const RowMatrixD& x_all, const EmbeddingSet& data, ToyEncoder& encoder, PrototypeBank& bank,
                   const ClusterAssignment& global, const TrainConfig& c, double lr, std::mt19937_64& rng) {
  const Batch b = sample_batch(global, c, rng);
  if (b.rows.empty()) return 0.0;
  std::size_t max_pos = 1;
  for (const auto& p : bank.positives) max_pos = std::max(max_pos, p.size());
  const std::size_t k_neg = std::min(c.k_neg, bank.size() - max_pos);
  const RowMatrixD x = gather(x_all, b.rows);
  const RowMatrixD pre = encoder.project(x);
  const RowMatrixD f = normalized_rows(pre);
  const auto out = multi_positive_global(f, b.labels, bank, c.tau, k_neg);
  descend(encoder, x, pre, out.grad, lr);
  for (std::size_t i = 0; i < b.rows.size(); ++i) {
    ema_update(bank, bank.prototype_for(b.labels[i], data.modality(b.rows[i])), row_span(f, i));
  }
  return out.value;
}

std::size_t clustered_rows(const ClusterAssignment& a) { return a.size() - a.noise_count(); }

int iterations(const TrainConfig& c, const ClusterAssignment& a_vis, const ClusterAssignment& a_ir) {
  if (c.iters_per_epoch > 0) return c.iters_per_epoch;
  const std::size_t rows = std::max(clustered_rows(a_vis), clustered_rows(a_ir));
  const auto per_batch = static_cast<std::size_t>(c.batch_ids * c.batch_instances);
  return static_cast<int>(std::max<std::size_t>(1, (rows + per_batch - 1) / per_batch));
}

struct IntraClusters {
  ClusterAssignment vis;
  ClusterAssignment ir;
};

IntraClusters cluster_both(const EmbeddingSet& emb, const TrainConfig& c, std::mt19937_64& rng) {
  ClusterConfig cfg = c.cluster;
  if (!c.subset_clustering) cfg.subset_ratio = 1.0;
  IntraClusters out;
  out.vis = cluster_intra(emb, Modality::vis, cfg, JaccardMode::vanilla, c.jaccard, &rng);
  out.ir = cluster_intra(emb, Modality::ir, cfg, JaccardMode::vanilla, c.jaccard, &rng);
  return out;
}

void check_finite(double loss, int epoch) {
  if (!std::isfinite(loss)) throw NumericError("loss is not finite in epoch " + std::to_string(epoch));
}

void record_retrieval(EpochRecord& r, const TrainData& data, const ToyEncoder& encoder, int max_rank) {
  const auto res = evaluate(data, encoder, max_rank);
  r.rank1 = res.rank1();
  r.map_score = res.map_score;
}

}  // namespace

RowMatrixD ToyEncoder::project(const RowMatrixD& raw) const {
  if (raw.cols() != weight.cols()) throw UsageError("raw dimension does not match the encoder");
  return raw * weight.transpose();
}

EmbeddingSet ToyEncoder::encode(const EmbeddingSet& raw) const {
  const RowMatrixD f = normalized_rows(project(as_double(raw)));
  return l2_normalize(EmbeddingSet(f.cast<float>(), raw.modality(), raw.true_id(), raw.camera()));
}

void ToyEncoder::save(const std::filesystem::path& path) const {
  RowMatrixF w = weight.cast<float>();
  std::vector<Modality> tags(static_cast<std::size_t>(weight.rows()), Modality::vis);
  xmodal::save(EmbeddingSet(std::move(w), std::move(tags)), path, FileFormat::binary);
}

ToyEncoder ToyEncoder::load(const std::filesystem::path& path) {
  return ToyEncoder{xmodal::load(path, FileFormat::binary).features().cast<double>()};
}

void TrainConfig::validate() const {
  if (epochs_stage1 < 0 || epochs_stage2 < 0) throw UsageError("epoch counts must be >= 0");
  if (batch_ids < 1 || batch_instances < 1) throw UsageError("batch P and K must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("lr must be a finite value >= 0");
  if (lr_step < 0 || !(lr_gamma > 0.0)) throw UsageError("lr_step must be >= 0 and lr_gamma > 0");
  if (!(mu >= 0.0 && mu <= 1.0)) throw UsageError("mu must be in [0, 1]");
  if (!(tau > 0.0)) throw UsageError("tau must be > 0");
  if (iters_per_epoch < 0) throw UsageError("iters_per_epoch must be >= 0");
  if (max_rank < 1) throw UsageError("max_rank must be >= 1");
  if (!(cluster.subset_ratio > 0.0 && cluster.subset_ratio <= 1.0)) throw UsageError("subset_ratio must be in (0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs_stage1", c.epochs_stage1},
                     {"epochs_stage2", c.epochs_stage2},
                     {"batch_ids", c.batch_ids},
                     {"batch_instances", c.batch_instances},
                     {"lr", c.lr},
                     {"lr_step", c.lr_step},
                     {"lr_gamma", c.lr_gamma},
                     {"mu", c.mu},
                     {"tau", c.tau},
                     {"eps", c.cluster.eps},
                     {"min_samples", c.cluster.min_samples},
                     {"subset_ratio", c.cluster.subset_ratio},
                     {"k1", c.jaccard.k1},
                     {"k2", c.jaccard.k2},
                     {"k_neg", c.k_neg},
                     {"seed", c.seed},
                     {"iters_per_epoch", c.iters_per_epoch},
                     {"max_rank", c.max_rank},
                     {"subset_clustering", c.subset_clustering},
                     {"modality_aware_global", c.modality_aware_global},
                     {"split_global_memory", c.split_global_memory}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs_stage1 = j.value("epochs_stage1", c.epochs_stage1);
  c.epochs_stage2 = j.value("epochs_stage2", c.epochs_stage2);
  c.batch_ids = j.value("batch_ids", c.batch_ids);
  c.batch_instances = j.value("batch_instances", c.batch_instances);
  c.lr = j.value("lr", c.lr);
  c.lr_step = j.value("lr_step", c.lr_step);
  c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
  c.mu = j.value("mu", c.mu);
  c.tau = j.value("tau", c.tau);
  c.cluster.eps = j.value("eps", c.cluster.eps);
  c.cluster.min_samples = j.value("min_samples", c.cluster.min_samples);
  c.cluster.subset_ratio = j.value("subset_ratio", c.cluster.subset_ratio);
  c.jaccard.k1 = j.value("k1", c.jaccard.k1);
  c.jaccard.k2 = j.value("k2", c.jaccard.k2);
  c.k_neg = j.value("k_neg", c.k_neg);
  c.seed = j.value("seed", c.seed);
  c.iters_per_epoch = j.value("iters_per_epoch", c.iters_per_epoch);
  c.max_rank = j.value("max_rank", c.max_rank);
  c.subset_clustering = j.value("subset_clustering", c.subset_clustering);
  c.modality_aware_global = j.value("modality_aware_global", c.modality_aware_global);
  c.split_global_memory = j.value("split_global_memory", c.split_global_memory);
}

std::vector<std::size_t> pk_sample(const ClusterAssignment& assignment, int p, int k, std::mt19937_64& rng) {
  if (p < 1 || k < 1) throw UsageError("P and K must be >= 1");
  if (assignment.num_clusters < p) {
    throw DataError("need " + std::to_string(p) + " clusters for a batch, found " + std::to_string(assignment.num_clusters));
  }
  std::vector<int> ids(static_cast<std::size_t>(assignment.num_clusters));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < p; ++i) {
    std::uniform_int_distribution<int> pick(i, assignment.num_clusters - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(p * k));
  for (int i = 0; i < p; ++i) {
    std::vector<std::size_t> members = assignment.members[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])];
    const auto ku = static_cast<std::size_t>(k);
    if (members.size() >= ku) {
      for (std::size_t s = 0; s < ku; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, members.size() - 1);
        std::swap(members[s], members[pick(rng)]);
        out.push_back(members[s]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t s = 0; s < ku; ++s) out.push_back(members[pick(rng)]);
    }
  }
  return out;
}

TrainData TrainData::from_corpus(const SynthCorpus& corpus) {
  if (corpus.split.query.empty() || corpus.split.gallery.empty()) {
    throw DataError("corpus has no held-out identities for evaluation");
  }
  return TrainData{corpus.train_raw(), subset_view(corpus.raw, corpus.split.query).set,
                   subset_view(corpus.raw, corpus.split.gallery).set};
}

EpochRecord stage1_epoch(const TrainData& data, ToyEncoder& encoder, Banks& banks, const TrainConfig& config,
                         int epoch, std::mt19937_64& rng) {
  const RowMatrixD x_all = as_double(data.train);
  const EmbeddingSet emb = encoder.encode(data.train);
  const auto& truth = *data.train.true_id();
  const IntraClusters ac = cluster_both(emb, config, rng);
  banks.vis = build_intra_bank(emb, ac.vis, config.mu);
  banks.ir = build_intra_bank(emb, ac.ir, config.mu);
  banks.global.reset();

  EpochRecord r;
  r.epoch = epoch;
  r.stage = 1;
  r.clusters_vis = ac.vis.num_clusters;
  r.clusters_ir = ac.ir.num_clusters;
  r.ari = 0.5 * (ari(ac.vis, truth) + ari(ac.ir, truth));
  const double lr = stage_lr(config, epoch);
  const int iters = iterations(config, ac.vis, ac.ir);
  double total = 0.0;
  for (int it = 0; it < iters; ++it) {
    total += intra_step(x_all, encoder, banks, ac.vis, ac.ir, config, lr, rng);
    check_finite(total, epoch);
  }
  r.loss = total / iters;
  return r;
}

EpochRecord stage2_epoch(const TrainData& data, ToyEncoder& encoder, Banks& banks, const TrainConfig& config,
                         int epoch, std::mt19937_64& rng) {
  const RowMatrixD x_all = as_double(data.train);
  const EmbeddingSet emb = encoder.encode(data.train);
  const auto& truth = *data.train.true_id();
  const IntraClusters ac = cluster_both(emb, config, rng);
  banks.vis = build_intra_bank(emb, ac.vis, config.mu);
  banks.ir = build_intra_bank(emb, ac.ir, config.mu);
  const ClusterAssignment global =
      cluster_global(emb, config.cluster, config.modality_aware_global ? JaccardMode::modality_aware : JaccardMode::vanilla,
                     config.jaccard);
  banks.global = config.split_global_memory ? build_global_bank_split(emb, global, config.mu)
                                            : build_global_bank_unified(emb, global, config.mu);

  EpochRecord r;
  r.epoch = epoch;
  r.stage = 2;
  r.clusters_vis = ac.vis.num_clusters;
  r.clusters_ir = ac.ir.num_clusters;
  r.clusters_global = global.num_clusters;
  r.ari = ari(global, truth);
  r.mixed_rate = mixed_cluster_rate(global, emb.modality());
  const double lr = stage_lr(config, epoch);
  const int iters = iterations(config, ac.vis, ac.ir);
  double total = 0.0;
  for (int it = 0; it < iters; ++it) {
    total += intra_step(x_all, encoder, banks, ac.vis, ac.ir, config, lr, rng);
    total += global_step(x_all, data.train, encoder, *banks.global, global, config, lr, rng);
    check_finite(total, epoch);
  }
  r.loss = total / iters;
  return r;
}

RetrievalResult evaluate(const TrainData& data, const ToyEncoder& encoder, int max_rank) {
  return cmc_map(encoder.encode(data.query), encoder.encode(data.gallery), max_rank);
}

ToyEncoder initial_encoder(const SynthCorpus& corpus) { return ToyEncoder{corpus.projection}; }

TrainResult train_stage1(const SynthCorpus& corpus, const TrainConfig& config) {
  config.validate();
  const TrainData data = TrainData::from_corpus(corpus);
  const auto pk = static_cast<std::size_t>(config.batch_ids * config.batch_instances);
  if (pk > std::min(data.train.count(Modality::vis), data.train.count(Modality::ir))) {
    throw UsageError("batch P*K exceeds the smaller modality population");
  }
  TrainResult out{initial_encoder(corpus), {}, {}, {}, {}};
  std::mt19937_64 rng(config.seed);
  Banks banks;
  for (int e = 1; e <= config.epochs_stage1; ++e) {
    EpochRecord r = stage1_epoch(data, out.encoder, banks, config, e, rng);
    record_retrieval(r, data, out.encoder, config.max_rank);
    log::info("stage 1 epoch " + std::to_string(e) + ": loss " + format_double(r.loss) + ", ari " + format_double(r.ari) +
              ", rank-1 " + format_double(r.rank1));
    out.history.push_back(r);
  }
  out.stage1_encoder = out.encoder;
  out.stage1_retrieval = evaluate(data, out.encoder, config.max_rank);
  out.final_retrieval = out.stage1_retrieval;
  return out;
}

TrainResult train_stage2(const SynthCorpus& corpus, const TrainConfig& config, const TrainResult& stage1) {
  config.validate();
  const TrainData data = TrainData::from_corpus(corpus);
  TrainResult out = stage1;
  out.encoder = stage1.stage1_encoder;
  out.history.resize(std::min<std::size_t>(out.history.size(), static_cast<std::size_t>(config.epochs_stage1)));
  std::mt19937_64 rng(config.seed ^ kStage2Stream);
  Banks banks;
  for (int e = 1; e <= config.epochs_stage2; ++e) {
    EpochRecord r = stage2_epoch(data, out.encoder, banks, config, e, rng);
    r.epoch = config.epochs_stage1 + e;
    record_retrieval(r, data, out.encoder, config.max_rank);
    log::info("stage 2 epoch " + std::to_string(e) + ": loss " + format_double(r.loss) + ", ari " + format_double(r.ari) +
              ", clusters " + std::to_string(r.clusters_global) + ", rank-1 " + format_double(r.rank1));
    out.history.push_back(r);
  }
  out.final_retrieval = evaluate(data, out.encoder, config.max_rank);
  return out;
}

TrainResult train(const SynthCorpus& corpus, const TrainConfig& config) {
  return train_stage2(corpus, config, train_stage1(corpus, config));
}

nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json j;
  j["stage1"] = to_json(r.stage1_retrieval);
  j["final"] = to_json(r.final_retrieval);
  j["history"] = nlohmann::json::array();
  for (const auto& e : r.history) j["history"].push_back(to_json(e));
  return j;
}

}  // namespace xmodal
