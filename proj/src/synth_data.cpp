#include "xmodal/synth_data.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include <Eigen/QR>

#include "xmodal/distance.hpp"
#include "xmodal/error.hpp"

namespace xmodal {

namespace {

constexpr double kOffsetScale = 1.25;
constexpr double kNoiseNormScale = 2.0;
constexpr double kLatentTwist = 0.6;

RowMatrixD gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = normal(rng);
  }
  return m;
}

Eigen::VectorXd unit_gaussian(Eigen::Index dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (Eigen::Index k = 0; k < dim; ++k) v(k) = normal(rng);
  return v / v.norm();
}

}  // namespace

void SynthConfig::validate() const {
  if (num_ids < 1 || imgs_per_id_vis < 1 || imgs_per_id_ir < 1) {
    throw UsageError("num_ids and images per identity must be positive");
  }
  if (num_test_ids < 0) throw UsageError("num_test_ids must be >= 0");
  if (latent_dim < 1 || embed_dim < 2) throw UsageError("latent_dim must be >= 1 and embed_dim >= 2");
  if (raw_dim < 2 * latent_dim + 1) {
    throw UsageError("raw_dim must be >= 2 * latent_dim + 1 to hold both modality maps and the offset axis");
  }
  if (!(modality_gap >= 0.0 && modality_gap <= 1.0)) throw UsageError("modality_gap must be in [0, 1]");
  if (!(intra_noise >= 0.0)) throw UsageError("intra_noise must be >= 0");
  if (appearance_modes < 1) throw UsageError("appearance_modes must be >= 1");
  if (!(mode_spread >= 0.0)) throw UsageError("mode_spread must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"num_ids", c.num_ids},
                     {"imgs_per_id_vis", c.imgs_per_id_vis},
                     {"imgs_per_id_ir", c.imgs_per_id_ir},
                     {"latent_dim", c.latent_dim},
                     {"raw_dim", c.raw_dim},
                     {"embed_dim", c.embed_dim},
                     {"modality_gap", c.modality_gap},
                     {"intra_noise", c.intra_noise},
                     {"seed", c.seed},
                     {"num_test_ids", c.num_test_ids},
                     {"appearance_modes", c.appearance_modes},
                     {"mode_spread", c.mode_spread}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.num_ids = j.value("num_ids", c.num_ids);
  c.imgs_per_id_vis = j.value("imgs_per_id_vis", c.imgs_per_id_vis);
  c.imgs_per_id_ir = j.value("imgs_per_id_ir", c.imgs_per_id_ir);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.raw_dim = j.value("raw_dim", c.raw_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.modality_gap = j.value("modality_gap", c.modality_gap);
  c.intra_noise = j.value("intra_noise", c.intra_noise);
  c.seed = j.value("seed", c.seed);
  c.num_test_ids = j.value("num_test_ids", c.num_test_ids);
  c.appearance_modes = j.value("appearance_modes", c.appearance_modes);
  c.mode_spread = j.value("mode_spread", c.mode_spread);
}

EmbeddingSet SynthCorpus::train_raw() const { return subset_view(raw, split.train).set; }

EmbeddingSet SynthCorpus::train_embed() const { return subset_view(oracle_embed, split.train).set; }

SynthCorpus generate(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const Eigen::Index latent = config.latent_dim;
  const Eigen::Index raw = config.raw_dim;

  // Orthonormal frame: visible map, the rotation partner, and the offset axis.
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(raw, 2 * latent + 1, rng));
  const Eigen::MatrixXd frame = qr.householderQ() * Eigen::MatrixXd::Identity(raw, 2 * latent + 1);
  const Eigen::MatrixXd u = frame.leftCols(latent);
  const Eigen::MatrixXd v = frame.middleCols(latent, latent);
  const Eigen::VectorXd offset_axis = frame.col(2 * latent);

  // The infrared map also turns the identity latent by modality_gap * 0.6 rad
  // in each of a random set of coordinate planes, so cross-modal cosine
  // ranking is degraded while a linear map can still align both modalities.
  const Eigen::HouseholderQR<Eigen::MatrixXd> latent_qr(gaussian(latent, latent, rng));
  const Eigen::MatrixXd planes = latent_qr.householderQ() * Eigen::MatrixXd::Identity(latent, latent);
  Eigen::MatrixXd twist = Eigen::MatrixXd::Identity(latent, latent);
  const double phi = config.modality_gap * kLatentTwist;
  for (Eigen::Index i = 0; i + 1 < latent; i += 2) {
    twist(i, i) = twist(i + 1, i + 1) = std::cos(phi);
    twist(i, i + 1) = -std::sin(phi);
    twist(i + 1, i) = std::sin(phi);
  }
  const double angle = config.modality_gap * std::numbers::pi / 4.0;
  const Eigen::MatrixXd map_vis = u;
  const Eigen::MatrixXd map_ir = std::cos(angle) * u * (planes * twist * planes.transpose()) + std::sin(angle) * v;
  const Eigen::VectorXd offset_vis = kOffsetScale * config.modality_gap * offset_axis;
  const Eigen::VectorXd offset_ir = -offset_vis;
  const double sigma = kNoiseNormScale * config.intra_noise / std::sqrt(static_cast<double>(raw));

  const RowMatrixD projection = gaussian(config.embed_dim, raw, rng) / std::sqrt(static_cast<double>(raw));

  // Identities are drawn in order, training ones first, so the training rows
  // do not depend on num_test_ids.
  const int total_ids = config.num_ids + config.num_test_ids;

  const std::size_t per_id = static_cast<std::size_t>(config.imgs_per_id_vis + config.imgs_per_id_ir);
  const std::size_t n = per_id * static_cast<std::size_t>(total_ids);
  RowMatrixF raw_rows(static_cast<Eigen::Index>(n), raw);
  RowMatrixF embed_rows(static_cast<Eigen::Index>(n), config.embed_dim);
  std::vector<Modality> modality;
  std::vector<std::uint32_t> ids;
  modality.reserve(n);
  ids.reserve(n);
  CorpusSplit split;

  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t row = 0;
  for (int k = 0; k < total_ids; ++k) {
    const Eigen::VectorXd center = unit_gaussian(latent, rng);
    for (const Modality m : {Modality::vis, Modality::ir}) {
      const int count = m == Modality::vis ? config.imgs_per_id_vis : config.imgs_per_id_ir;
      const Eigen::MatrixXd& map = m == Modality::vis ? map_vis : map_ir;
      const Eigen::VectorXd& offset = m == Modality::vis ? offset_vis : offset_ir;
      std::vector<Eigen::VectorXd> modes;
      for (int s = 0; s < config.appearance_modes; ++s) {
        modes.push_back(config.appearance_modes > 1 ? Eigen::VectorXd(config.mode_spread * unit_gaussian(latent, rng))
                                                    : Eigen::VectorXd::Zero(latent));
      }
      for (int s = 0; s < count; ++s) {
        const auto& mode = modes[static_cast<std::size_t>(s % config.appearance_modes)];
        Eigen::VectorXd x = map * (center + mode) + offset;
        for (Eigen::Index c = 0; c < raw; ++c) x(c) += sigma * normal(rng);
        x.normalize();
        Eigen::VectorXd e = projection * x;
        e.normalize();
        raw_rows.row(static_cast<Eigen::Index>(row)) = x.transpose().cast<float>();
        embed_rows.row(static_cast<Eigen::Index>(row)) = e.transpose().cast<float>();
        modality.push_back(m);
        ids.push_back(static_cast<std::uint32_t>(k));
        if (k < config.num_ids) {
          split.train.push_back(row);
        } else if (m == Modality::ir) {
          split.query.push_back(row);
        } else {
          split.gallery.push_back(row);
        }
        ++row;
      }
    }
  }
  // Rows were normalized in double; re-normalize after rounding to float.
  EmbeddingSet raw_set = l2_normalize(EmbeddingSet(std::move(raw_rows), modality, ids));
  EmbeddingSet embed_set = l2_normalize(EmbeddingSet(std::move(embed_rows), modality, ids));
  return SynthCorpus{config, std::move(raw_set), std::move(embed_set), projection, std::move(split)};
}

BiasReport bias_report(const EmbeddingSet& input) {
  if (!input.true_id()) throw DataError("bias_report needs ground-truth identities");
  const EmbeddingSet set = ensure_normalized(input, "bias_report");
  const auto& ids = *set.true_id();
  std::map<std::uint32_t, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < set.size(); ++i) classes[ids[i]].push_back(i);

  BiasReport out;
  double intra_total = 0.0;
  double inter_total = 0.0;
  std::size_t intra_classes = 0;
  std::size_t inter_classes = 0;
  for (const auto& [id, rows] : classes) {
    double intra = 0.0;
    double inter = 0.0;
    std::size_t n_intra = 0;
    std::size_t n_inter = 0;
    for (std::size_t a = 0; a < rows.size(); ++a) {
      const auto fa = set.row(rows[a]);
      for (std::size_t b = a + 1; b < rows.size(); ++b) {
        const auto fb = set.row(rows[b]);
        double dot = 0.0;
        for (std::size_t k = 0; k < fa.size(); ++k) dot += static_cast<double>(fa[k]) * fb[k];
        const double dist = 1.0 - dot;
        if (set.modality(rows[a]) == set.modality(rows[b])) {
          intra += dist;
          ++n_intra;
        } else {
          inter += dist;
          ++n_inter;
        }
      }
    }
    ClassBias cb;
    cb.id = id;
    if (n_intra > 0) {
      cb.intra = intra / static_cast<double>(n_intra);
      intra_total += cb.intra;
      ++intra_classes;
    }
    if (n_inter > 0) {
      cb.inter = inter / static_cast<double>(n_inter);
      inter_total += *cb.inter;
      ++inter_classes;
    }
    out.per_class.push_back(cb);
  }
  if (intra_classes > 0) out.mean_intra = intra_total / static_cast<double>(intra_classes);
  if (inter_classes > 0) {
    out.mean_inter = inter_total / static_cast<double>(inter_classes);
    out.gap = *out.mean_inter - out.mean_intra;
  }
  return out;
}

BiasReport bias_report(const SynthCorpus& corpus) { return bias_report(corpus.train_embed()); }

nlohmann::json to_json(const BiasReport& r) {
  nlohmann::json j;
  j["mean_intra"] = r.mean_intra;
  j["mean_inter"] = r.mean_inter ? nlohmann::json(*r.mean_inter) : nlohmann::json(nullptr);
  j["gap"] = r.gap ? nlohmann::json(*r.gap) : nlohmann::json(nullptr);
  j["num_classes"] = r.per_class.size();
  return j;
}

}  // namespace xmodal
