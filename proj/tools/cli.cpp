#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "experiments.hpp"
#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/embed_store.hpp"
#include "xmodal/error.hpp"
#include "xmodal/eval_report.hpp"
#include "xmodal/log.hpp"
#include "xmodal/objectives.hpp"
#include "xmodal/parallel.hpp"
#include "xmodal/prototype_memory.hpp"
#include "xmodal/synth_data.hpp"
#include "xmodal/training.hpp"

namespace xmodal::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Flag values land in holders and are copied onto their targets only when the
// flag was given, after the config file has been applied.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& name, T& target, const std::string& help) {
    auto holder = std::make_shared<T>(target);
    CLI::Option* opt = app->add_option(name, *holder, help)->capture_default_str();
    apply_.push_back([opt, holder, &target] {
      if (opt->count() > 0) target = *holder;
    });
    return opt;
  }
  void apply() const {
    for (const auto& f : apply_) f();
  }

 private:
  std::vector<std::function<void()>> apply_;
};

struct Global {
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int threads = 0;
  int verbose = 0;
  bool quiet = false;
  std::string config;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

fs::path sidecar(const fs::path& p) {
  fs::path s = p;
  s += ".json";
  return s;
}

// The config file may hold the subcommand's fields at top level or under a
// key named after the subcommand.
template <class T>
void apply_config(const Global& g, const std::string& section, T& target) {
  if (g.config.empty()) return;
  const json j = read_json(g.config);
  if (!j.is_object()) throw DataError("config file must hold a JSON object");
  try {
    if (j.contains(section)) {
      target = j.at(section).get<T>();
    } else {
      target = j.get<T>();
    }
  } catch (const json::exception& e) {
    throw DataError("invalid config values: " + std::string(e.what()));
  }
}

struct ClusterFields {
  ClusterConfig c;
};
void to_json(json& j, const ClusterFields& f) {
  j = json{{"eps", f.c.eps}, {"min_samples", f.c.min_samples}, {"subset_ratio", f.c.subset_ratio}, {"seed", f.c.seed}};
}
void from_json(const json& j, ClusterFields& f) {
  f.c.eps = j.value("eps", f.c.eps);
  f.c.min_samples = j.value("min_samples", f.c.min_samples);
  f.c.subset_ratio = j.value("subset_ratio", f.c.subset_ratio);
  f.c.seed = j.value("seed", f.c.seed);
}

struct DistanceFields {
  std::string metric = "ma-jaccard";
  JaccardParams params;
  double cosine_mix = 0.0;
};
void to_json(json& j, const DistanceFields& f) {
  j = json{{"metric", f.metric}, {"k1", f.params.k1}, {"k2", f.params.k2}, {"cosine_mix", f.cosine_mix}};
}
void from_json(const json& j, DistanceFields& f) {
  f.metric = j.value("metric", f.metric);
  f.params.k1 = j.value("k1", f.params.k1);
  f.params.k2 = j.value("k2", f.params.k2);
  f.cosine_mix = j.value("cosine_mix", f.cosine_mix);
}

Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "jaccard") return Metric::jaccard_vanilla;
  if (s == "ma-jaccard") return Metric::jaccard_modality_aware;
  throw UsageError("unknown metric '" + s + "' (expected cosine, jaccard or ma-jaccard)");
}

DistanceMatrix compute_distance(const EmbeddingSet& set, const DistanceFields& f) {
  switch (parse_metric(f.metric)) {
    case Metric::cosine: return cosine_distance(set);
    case Metric::jaccard_vanilla: return jaccard_distance(set, {f.params, JaccardMode::vanilla, f.cosine_mix});
    case Metric::jaccard_modality_aware:
      return jaccard_distance(set, {f.params, JaccardMode::modality_aware, f.cosine_mix});
  }
  throw UsageError("unknown metric");
}

EmbeddingSet load_set(const fs::path& p) { return load(p, format_from_path(p)); }

fs::path embed_path(const fs::path& corpus_path) {
  fs::path p = corpus_path;
  const std::string ext = p.extension().string();
  p.replace_extension(".embed" + ext);
  return p;
}

// Regenerates a corpus from its sidecar and checks it against the raw file.
SynthCorpus load_corpus(const fs::path& path) {
  const json meta = read_json(sidecar(path));
  SynthConfig config;
  try {
    config = meta.at("config").get<SynthConfig>();
  } catch (const json::exception& e) {
    throw DataError("corpus sidecar lacks a valid config: " + std::string(e.what()));
  }
  SynthCorpus corpus = generate(config);
  const EmbeddingSet raw = load_set(path);
  if (raw.size() != corpus.raw.size() || raw.dim() != corpus.raw.dim() || raw.features() != corpus.raw.features() ||
      raw.modality() != corpus.raw.modality()) {
    throw DataError("corpus file " + path.string() + " does not match the config in its sidecar");
  }
  return corpus;
}

std::string csv_line(std::initializer_list<std::string> cells) {
  std::string s;
  for (const auto& c : cells) {
    if (!s.empty()) s += ',';
    s += c;
  }
  return s + "\n";
}

std::string fmt(double v) { return format_double(v); }

// One-line JSON result on stdout, suppressed by -q.
void print(const Global& g, const std::string& line) {
  if (!g.quiet) std::cout << line << '\n';
}

// ---------------------------------------------------------------- synth

struct SynthCmd {
  SynthConfig config;
  std::string out;
  Overrides flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic two-modality corpus");
    flags.add(cmd, "--ids", config.num_ids, "Training identities");
    flags.add(cmd, "--vis", config.imgs_per_id_vis, "Visible images per identity");
    flags.add(cmd, "--ir", config.imgs_per_id_ir, "Infrared images per identity");
    flags.add(cmd, "--latent", config.latent_dim, "Latent dimension");
    flags.add(cmd, "--raw", config.raw_dim, "Raw feature dimension");
    flags.add(cmd, "--embed", config.embed_dim, "Oracle embedding dimension");
    flags.add(cmd, "--gap", config.modality_gap, "Modality gap strength in [0, 1]");
    flags.add(cmd, "--noise", config.intra_noise, "Within-class noise scale");
    flags.add(cmd, "--test-ids", config.num_test_ids, "Held-out identities for query/gallery");
    flags.add(cmd, "--modes", config.appearance_modes, "Appearance modes per identity and modality");
    flags.add(cmd, "--mode-spread", config.mode_spread, "Latent distance of appearance modes");
    cmd->add_option("--out", out, "Raw corpus output path (.xma or .csv)")->required();
  }

  int run(const Global& g) {
    apply_config(g, "synth", config);
    flags.apply();
    if (g.seed_opt->count() > 0) config.seed = g.seed;
    const SynthCorpus corpus = generate(config);
    const fs::path raw_path = out;
    const FileFormat fmt_out = format_from_path(raw_path);
    save(corpus.raw, raw_path, fmt_out);
    save(corpus.oracle_embed, embed_path(raw_path), fmt_out);
    json meta;
    meta["config"] = config;
    meta["embed_file"] = embed_path(raw_path).filename().string();
    meta["rows"] = corpus.raw.size();
    meta["split"] = {{"train", corpus.split.train}, {"query", corpus.split.query}, {"gallery", corpus.split.gallery}};
    meta["bias"] = to_json(bias_report(corpus));
    write_json(sidecar(raw_path), meta);
    print(g, json{{"rows", corpus.raw.size()}, {"bias", meta["bias"]}, {"config", config}}.dump());
    return 0;
  }
};

// ---------------------------------------------------------------- distance

struct DistanceCmd {
  DistanceFields fields;
  std::string input;
  std::string out;
  Overrides flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("distance", "Compute a pairwise distance matrix");
    cmd->add_option("--input", input, "Embedding file (.xma or .csv)")->required();
    flags.add(cmd, "--metric", fields.metric, "cosine, jaccard or ma-jaccard")
        ->check(CLI::IsMember({"cosine", "jaccard", "ma-jaccard"}));
    flags.add(cmd, "--k1", fields.params.k1, "Reciprocal neighborhood size");
    flags.add(cmd, "--k2", fields.params.k2, "Query expansion size");
    flags.add(cmd, "--cosine-mix", fields.cosine_mix, "Weight of cosine distance mixed into Jaccard");
    cmd->add_option("--out", out, "Distance matrix output path")->required();
  }

  int run(const Global& g) {
    apply_config(g, "distance", fields);
    flags.apply();
    const EmbeddingSet set = ensure_normalized(load_set(input), "distance");
    const Metric metric = parse_metric(fields.metric);
    const DistanceMatrix d = compute_distance(set, fields);
    save_distance(d, out);
    json summary;
    summary["config"] = fields;
    summary["rows"] = set.size();
    const DistanceMatrix cos = metric == Metric::cosine ? d : cosine_distance(set);
    const bool both = set.count(Modality::vis) > 0 && set.count(Modality::ir) > 0;
    if (static_cast<std::size_t>(fields.params.k1) < set.size()) {
      const NeighborList nb = metric == Metric::jaccard_modality_aware && both
                                  ? knn_modality_balanced(cos, set.modality(), fields.params.k1)
                                  : knn(cos, fields.params.k1);
      summary["composition"] = knn_composition(nb, set.modality()).mean;
    }
    if (set.true_id()) {
      summary["class_distances"] = to_json(distance_distribution(set, d, GroupBy::true_class, nullptr, uniform_edges(0.0, 2.0, 80)));
    }
    write_json(sidecar(out), summary);
    print(g, summary.dump());
    return 0;
  }
};

// ---------------------------------------------------------------- cluster

struct ClusterCmd {
  ClusterFields cluster;
  DistanceFields dist;
  std::string input;
  std::string distance_file;
  std::string modality = "all";
  std::string out;
  Overrides flags;

  ClusterCmd() { cluster.c.subset_ratio = 1.0; }

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("cluster", "Density clustering over Jaccard distances");
    cmd->add_option("--input", input, "Embedding file (.xma or .csv)")->required();
    cmd->add_option("--distance", distance_file, "Precomputed distance matrix (skips distance computation)");
    cmd->add_option("--modality", modality, "all, vis or ir")->check(CLI::IsMember({"all", "vis", "ir"}))->capture_default_str();
    flags.add(cmd, "--metric", dist.metric, "jaccard or ma-jaccard")->check(CLI::IsMember({"cosine", "jaccard", "ma-jaccard"}));
    flags.add(cmd, "--k1", dist.params.k1, "Reciprocal neighborhood size");
    flags.add(cmd, "--k2", dist.params.k2, "Query expansion size");
    flags.add(cmd, "--eps", cluster.c.eps, "Neighborhood radius");
    flags.add(cmd, "--min-samples", cluster.c.min_samples, "Core point threshold (self included)");
    flags.add(cmd, "--subset-ratio", cluster.c.subset_ratio, "Fraction of visible rows clustered with --modality vis");
    cmd->add_option("--out", out, "Label CSV output path (row,label)")->required();
  }

  int run(const Global& g) {
    apply_config(g, "cluster", cluster);
    flags.apply();
    if (g.seed_opt->count() > 0) cluster.c.seed = g.seed;
    const EmbeddingSet set = ensure_normalized(load_set(input), "cluster");
    ClusterAssignment a;
    if (!distance_file.empty()) {
      const DistanceMatrix d = load_distance(distance_file);
      if (d.size() != set.size()) throw DataError("distance matrix size does not match the embedding set");
      if (modality != "all") throw UsageError("--distance applies to the whole set; use --modality all");
      a = dbscan(d, cluster.c);
    } else if (modality == "all") {
      const Metric m = parse_metric(dist.metric);
      if (m == Metric::cosine) {
        a = dbscan(cosine_distance(set), cluster.c);
      } else {
        a = cluster_global(set, cluster.c, m == Metric::jaccard_vanilla ? JaccardMode::vanilla : JaccardMode::modality_aware,
                           dist.params);
      }
    } else {
      std::mt19937_64 rng(cluster.c.seed);
      a = cluster_intra(set, modality_from_string(modality), cluster.c, JaccardMode::vanilla, dist.params, &rng);
    }
    const std::vector<int> labels = a.parent_labels(set.size());
    std::string csv = "row,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) csv += std::to_string(i) + "," + std::to_string(labels[i]) + "\n";
    write_text(out, csv);
    json summary;
    summary["config"] = {{"cluster", cluster}, {"distance", dist}, {"modality", modality}};
    summary["clustered_rows"] = a.size();
    summary["num_clusters"] = a.num_clusters;
    summary["noise"] = a.noise_count();
    summary["mixed_rate"] = mixed_cluster_rate(a, set.modality());
    if (set.true_id()) summary["ari"] = ari(a, *set.true_id());
    write_json(sidecar(out), summary);
    print(g, summary.dump());
    return 0;
  }
};

// ---------------------------------------------------------------- train

struct TrainCmd {
  TrainConfig config;
  std::string corpus;
  std::vector<std::string> ablate;
  std::string out_dir;
  Overrides flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("train", "Two-stage training of the toy encoder");
    cmd->add_option("--corpus", corpus, "Corpus written by synth")->required();
    cmd->add_option("--ablate", ablate, "Disable a component: subset, ma-dist or global-loss")
        ->check(CLI::IsMember({"subset", "ma-dist", "global-loss"}));
    flags.add(cmd, "--epochs1", config.epochs_stage1, "Stage-1 epochs");
    flags.add(cmd, "--epochs2", config.epochs_stage2, "Stage-2 epochs");
    flags.add(cmd, "--lr", config.lr, "Initial learning rate");
    flags.add(cmd, "--iters", config.iters_per_epoch, "Iterations per epoch (0 = one pass)");
    flags.add(cmd, "--k-neg", config.k_neg, "Hard negatives per query in the global loss");
    flags.add(cmd, "--eps", config.cluster.eps, "Clustering radius");
    cmd->add_option("--out-dir", out_dir, "Directory for checkpoints and reports")->required();
  }

  int run(const Global& g) {
    apply_config(g, "train", config);
    flags.apply();
    if (g.seed_opt->count() > 0) config.seed = g.seed;
    for (const auto& a : ablate) {
      if (a == "subset") config.subset_clustering = false;
      if (a == "ma-dist") config.modality_aware_global = false;
      if (a == "global-loss") config.split_global_memory = false;
    }
    const SynthCorpus c = load_corpus(corpus);
    ensure_dir(out_dir);
    const TrainResult s1 = train_stage1(c, config);
    s1.stage1_encoder.save(fs::path(out_dir) / "stage1.xma");
    const TrainResult result = train_stage2(c, config, s1);
    result.encoder.save(fs::path(out_dir) / "final.xma");
    ReportArtifacts art;
    art.summary["config"] = config;
    art.summary["corpus"] = fs::path(corpus).filename().string();
    art.summary["stage1"] = to_json(result.stage1_retrieval);
    art.summary["checkpoints"] = {"stage1.xma", "final.xma"};
    art.retrieval = result.final_retrieval;
    art.history = result.history;
    emit_report(art, out_dir);
    print(g, json{{"stage1_rank1", result.stage1_retrieval.rank1()},
                  {"final_rank1", result.final_retrieval.rank1()},
                  {"final_map", result.final_retrieval.map_score}}
                 .dump());
    return 0;
  }
};

// ---------------------------------------------------------------- gradcheck

struct GradcheckCmd {
  int instances = 20;
  double tau = 0.05;
  double step = 1e-4;
  double tolerance = 1e-4;
  std::string out;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("gradcheck", "Check analytic loss gradients against central differences");
    cmd->add_option("--instances", instances, "Random instances per loss")->capture_default_str();
    cmd->add_option("--tau", tau, "Temperature")->capture_default_str();
    cmd->add_option("--step", step, "Finite-difference step")->capture_default_str();
    cmd->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
    cmd->add_option("--out", out, "Also write the JSON result here");
  }

  static RowMatrixD unit_rows(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    RowMatrixD m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < d; ++k) m(i, k) = normal(rng);
      m.row(i).normalize();
    }
    return m;
  }

  // max |analytic - numeric| / max |numeric|
  double check(const RowMatrixD& at, const RowMatrixD& analytic, const std::function<double(const RowMatrixD&)>& f) const {
    RowMatrixD numeric(at.rows(), at.cols());
    RowMatrixD probe = at;
    for (Eigen::Index i = 0; i < at.rows(); ++i) {
      for (Eigen::Index k = 0; k < at.cols(); ++k) {
        probe(i, k) = at(i, k) + step;
        const double up = f(probe);
        probe(i, k) = at(i, k) - step;
        const double down = f(probe);
        probe(i, k) = at(i, k);
        numeric(i, k) = (up - down) / (2.0 * step);
      }
    }
    const double scale = std::max(numeric.cwiseAbs().maxCoeff(), 1e-12);
    return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
  }

  int run(const Global& g) {
    if (instances < 1) throw UsageError("--instances must be >= 1");
    std::mt19937_64 rng(g.seed);
    double worst_intra = 0.0;
    double worst_global = 0.0;
    double worst_norm = 0.0;
    for (int t = 0; t < instances; ++t) {
      const Eigen::Index d = 16;
      PrototypeBank bank;
      bank.vectors = unit_rows(6, d, rng);
      bank.modality_tag = {ProtoTag::vis, ProtoTag::ir, ProtoTag::vis, ProtoTag::ir, ProtoTag::vis, ProtoTag::ir};
      bank.owner_cluster = {0, 0, 1, 1, 2, 2};
      bank.positives = {{0, 1}, {2, 3}, {4, 5}};
      const RowMatrixD f = unit_rows(8, d, rng);
      std::vector<std::size_t> labels(8);
      std::vector<int> clusters(8);
      std::uniform_int_distribution<int> pick_proto(0, 5);
      std::uniform_int_distribution<int> pick_cluster(0, 2);
      for (std::size_t i = 0; i < 8; ++i) {
        labels[i] = static_cast<std::size_t>(pick_proto(rng));
        clusters[i] = pick_cluster(rng);
      }
      const auto intra = intra_infonce(f, labels, bank, tau);
      worst_intra = std::max(worst_intra, check(f, intra.grad, [&](const RowMatrixD& x) {
                               return intra_infonce(x, labels, bank, tau).value;
                             }));
      const auto global = multi_positive_global(f, clusters, bank, tau, 3);
      worst_global = std::max(worst_global, check(f, global.grad, [&](const RowMatrixD& x) {
                                return multi_positive_global(x, clusters, bank, tau, 3).value;
                              }));
      std::normal_distribution<double> normal(0.0, 1.0);
      RowMatrixD x(8, d);
      RowMatrixD up(8, d);
      for (Eigen::Index i = 0; i < 8; ++i) {
        for (Eigen::Index k = 0; k < d; ++k) {
          x(i, k) = 2.0 * normal(rng);
          up(i, k) = normal(rng);
        }
      }
      const RowMatrixD chained = grad_through_normalization(up, x);
      worst_norm = std::max(worst_norm, check(x, chained, [&](const RowMatrixD& z) {
                              double s = 0.0;
                              for (Eigen::Index i = 0; i < z.rows(); ++i) s += up.row(i).dot(z.row(i) / z.row(i).norm());
                              return s;
                            }));
    }
    const auto entry = [&](double e) { return json{{"max_rel_error", e}, {"pass", e < tolerance}}; };
    const bool pass = worst_intra < tolerance && worst_global < tolerance && worst_norm < tolerance;
    const json result{{"instances", instances},
                      {"tau", tau},
                      {"step", step},
                      {"tolerance", tolerance},
                      {"intra_infonce", entry(worst_intra)},
                      {"multi_positive_global", entry(worst_global)},
                      {"normalization", entry(worst_norm)},
                      {"pass", pass}};
    if (!out.empty()) write_json(out, result);
    print(g, result.dump());
    return pass ? 0 : 3;
  }
};

// ---------------------------------------------------------------- eval

struct EvalCmd {
  std::string corpus;
  std::string encoder;
  std::string query;
  std::string gallery;
  int max_rank = 20;
  std::string out_dir;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Cross-modality retrieval metrics");
    cmd->add_option("--corpus", corpus, "Corpus written by synth; evaluates its held-out split");
    cmd->add_option("--encoder", encoder, "Encoder checkpoint (default: the corpus projection)");
    cmd->add_option("--query", query, "Query embeddings (instead of --corpus)");
    cmd->add_option("--gallery", gallery, "Gallery embeddings (instead of --corpus)");
    cmd->add_option("--max-rank", max_rank, "Longest CMC rank")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Write summary.json and cmc.csv here");
  }

  int run(const Global& g) {
    RetrievalResult r;
    json config{{"max_rank", max_rank}};
    if (!corpus.empty()) {
      if (!query.empty() || !gallery.empty()) throw UsageError("use either --corpus or --query/--gallery");
      const SynthCorpus c = load_corpus(corpus);
      const ToyEncoder enc = encoder.empty() ? initial_encoder(c) : ToyEncoder::load(encoder);
      r = evaluate(TrainData::from_corpus(c), enc, max_rank);
      config["corpus"] = fs::path(corpus).filename().string();
      config["encoder"] = encoder.empty() ? "projection" : fs::path(encoder).filename().string();
    } else {
      if (query.empty() || gallery.empty()) throw UsageError("eval needs --corpus or both --query and --gallery");
      r = cmc_map(load_set(query), load_set(gallery), max_rank);
    }
    if (!out_dir.empty()) {
      ReportArtifacts art;
      art.summary["config"] = config;
      art.retrieval = r;
      emit_report(art, out_dir);
    }
    print(g, to_json(r).dump());
    return 0;
  }
};

// ---------------------------------------------------------------- report

struct ReportCmd {
  std::string corpus;
  std::string out_dir;
  std::string group_by = "class";
  int bins = 40;
  DistanceFields dist;
  ClusterFields cluster;
  Overrides flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("report", "Distance distributions and bias statistics of a corpus");
    cmd->add_option("--corpus", corpus, "Corpus written by synth")->required();
    cmd->add_option("--out-dir", out_dir, "Output directory")->required();
    cmd->add_option("--group-by", group_by, "class or cluster")->check(CLI::IsMember({"class", "cluster"}))->capture_default_str();
    cmd->add_option("--bins", bins, "Histogram bins over [0, 2]")->capture_default_str();
    flags.add(cmd, "--k1", dist.params.k1, "Reciprocal neighborhood size");
    flags.add(cmd, "--k2", dist.params.k2, "Query expansion size");
    flags.add(cmd, "--eps", cluster.c.eps, "Clustering radius for --group-by cluster");
  }

  int run(const Global& g) {
    apply_config(g, "report", dist);
    flags.apply();
    const SynthCorpus c = load_corpus(corpus);
    const EmbeddingSet emb = c.train_embed();
    const auto edges = uniform_edges(0.0, 2.0, bins);
    std::optional<ClusterAssignment> grouping;
    if (group_by == "cluster") grouping = cluster_global(emb, cluster.c, JaccardMode::modality_aware, dist.params);
    ReportArtifacts art;
    const auto add = [&](const std::string& name, const DistanceMatrix& d) {
      art.distributions.emplace_back(
          name, distance_distribution(emb, d, grouping ? GroupBy::predicted_cluster : GroupBy::true_class,
                                      grouping ? &*grouping : nullptr, edges));
    };
    const DistanceMatrix cos = cosine_distance(emb);
    add("cosine", cos);
    add("jaccard", jaccard_distance(emb, {dist.params, JaccardMode::vanilla, 0.0}));
    add("ma-jaccard", jaccard_distance(emb, {dist.params, JaccardMode::modality_aware, 0.0}));
    art.summary["config"] = {{"distance", dist}, {"group_by", group_by}, {"bins", bins}, {"synth", c.config}};
    art.summary["bias"] = to_json(bias_report(c));
    art.summary["composition"] = {
        {"cosine", knn_composition(knn(cos, dist.params.k1), emb.modality()).mean},
        {"balanced", knn_composition(knn_modality_balanced(cos, emb.modality(), dist.params.k1), emb.modality()).mean}};
    const auto files = emit_report(art, out_dir);
    json listing = json::array();
    for (const auto& f : files) listing.push_back(f.filename().string());
    print(g, json{{"files", listing}}.dump());
    return 0;
  }
};

// ---------------------------------------------------------------- repro

struct ReproCmd {
  std::string experiment = "all";
  int seeds = 3;
  std::string out_dir;
  TrainConfig train;
  Overrides flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("repro", "Run the scripted desk-scale experiments");
    cmd->add_option("--experiment", experiment, "composition, distributions, ari, ablation, ratio or all")
        ->check(CLI::IsMember({"composition", "distributions", "ari", "ablation", "ratio", "all"}))
        ->capture_default_str();
    cmd->add_option("--seeds", seeds, "Number of seeds, starting at --seed")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Output directory")->required();
    flags.add(cmd, "--epochs1", train.epochs_stage1, "Stage-1 epochs for the ablation grid");
    flags.add(cmd, "--epochs2", train.epochs_stage2, "Stage-2 epochs for the ablation grid");
  }

  bool wants(const std::string& name) const { return experiment == "all" || experiment == name; }

  int run(const Global& g) {
    apply_config(g, "train", train);
    flags.apply();
    if (seeds < 1) throw UsageError("--seeds must be >= 1");
    ensure_dir(out_dir);
    const fs::path dir = out_dir;
    json summary;
    summary["config"] = {{"experiment", experiment}, {"seeds", seeds}, {"first_seed", g.seed}, {"train", train}};
    const JaccardParams params;
    const ClusterConfig cluster;
    std::vector<std::uint64_t> seed_list;
    for (int s = 0; s < seeds; ++s) seed_list.push_back(g.seed + static_cast<std::uint64_t>(s));
    const auto synth_for = [](std::uint64_t seed) {
      SynthConfig c;
      c.seed = seed;
      return c;
    };

    if (wants("composition")) {
      std::string csv = "seed,cosine_inter,balanced_inter\n";
      double mean = 0.0;
      for (auto s : seed_list) {
        const auto r = experiments::composition(synth_for(s), params);
        csv += csv_line({std::to_string(s), fmt(r.cosine_inter), fmt(r.balanced_inter)});
        mean += r.cosine_inter / seeds;
      }
      write_text(dir / "composition.csv", csv);
      summary["composition"] = {{"mean_cosine_inter", mean}};
    }
    if (wants("distributions")) {
      std::string csv = "seed,metric,intra_mean,inter_mean,gap\n";
      json means = json::object();
      for (auto s : seed_list) {
        const auto rows = experiments::distance_gaps(synth_for(s), params, uniform_edges(0.0, 2.0, 40));
        ReportArtifacts art;
        for (const auto& r : rows) {
          csv += csv_line({std::to_string(s), std::string(to_string(r.metric)), fmt(r.intra_mean), fmt(r.inter_mean), fmt(r.gap)});
          const std::string key(to_string(r.metric));
          means[key] = means.value(key, 0.0) + r.gap / seeds;
          art.distributions.emplace_back(key + "_seed" + std::to_string(s), r.bundle);
        }
        art.summary["seed"] = s;
        emit_report(art, dir / ("distributions_seed" + std::to_string(s)));
      }
      write_text(dir / "distance_gaps.csv", csv);
      summary["distance_gap_means"] = means;
    }
    if (wants("ari")) {
      std::string csv = "seed,metric,ari,clusters,noise,mixed_rate\n";
      json means = json::object();
      for (auto s : seed_list) {
        for (const JaccardMode m : {JaccardMode::vanilla, JaccardMode::modality_aware}) {
          const auto r = experiments::global_ari(synth_for(s), cluster, m, params);
          csv += csv_line({std::to_string(s), std::string(to_string(r.metric)), fmt(r.ari), std::to_string(r.clusters),
                           std::to_string(r.noise), fmt(r.mixed_rate)});
          const std::string key(to_string(r.metric));
          means[key] = means.value(key, 0.0) + r.ari / seeds;
        }
      }
      write_text(dir / "ari.csv", csv);
      summary["ari_means"] = means;
    }
    if (wants("ratio")) {
      std::string csv = "seed,ratio,clusters,true_ids,ari\n";
      for (auto s : seed_list) {
        for (const double ratio : {0.3, 0.4, 0.5, 0.6, 0.7, 1.0}) {
          ClusterConfig cc;
          cc.seed = s;
          const auto r = experiments::subset_clustering(experiments::subset_corpus_config(s), cc, ratio, params);
          csv += csv_line({std::to_string(s), fmt(ratio), std::to_string(r.clusters), std::to_string(r.true_ids), fmt(r.ari)});
        }
      }
      write_text(dir / "subset_ratio.csv", csv);
    }
    if (wants("ablation")) {
      std::string csv = "seed,model,subset,modality_aware,split_memory,rank1,map\n";
      json means = json::object();
      for (auto s : seed_list) {
        TrainConfig tc = train;
        tc.seed = s;
        for (const auto& r : experiments::ablation_grid(synth_for(s), tc)) {
          csv += csv_line({std::to_string(s), r.model, std::to_string(r.subset), std::to_string(r.modality_aware),
                           std::to_string(r.split_memory), fmt(r.rank1), fmt(r.map_score)});
          means[r.model] = means.value(r.model, 0.0) + r.rank1 / seeds;
        }
      }
      write_text(dir / "ablation.csv", csv);
      summary["ablation_rank1_means"] = means;
    }
    write_json(dir / "summary.json", summary);
    print(g, summary.dump());
    return 0;
  }
};

log::Level level_for(const Global& g) {
  if (g.quiet) return log::Level::error;
  if (g.verbose >= 2) return log::Level::debug;
  if (g.verbose == 1) return log::Level::info;
  return log::Level::warn;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Cross-modality association toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  g.seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_flag("-v,--verbose", g.verbose, "More log output (repeatable)");
  app.add_flag("-q,--quiet", g.quiet, "Errors only");
  app.add_option("--config", g.config, "JSON config file; flags take precedence");

  SynthCmd synth;
  DistanceCmd distance;
  ClusterCmd cluster;
  TrainCmd train;
  GradcheckCmd gradcheck;
  EvalCmd eval;
  ReportCmd report;
  ReproCmd repro;
  synth.add(app);
  distance.add(app);
  cluster.add(app);
  train.add(app);
  gradcheck.add(app);
  eval.add(app);
  report.add(app);
  repro.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g.threads < 0) throw UsageError("--threads must be >= 0");
    set_num_threads(g.threads);
    log::set_level(level_for(g));
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return synth.run(g);
    if (name == "distance") return distance.run(g);
    if (name == "cluster") return cluster.run(g);
    if (name == "train") return train.run(g);
    if (name == "gradcheck") return gradcheck.run(g);
    if (name == "eval") return eval.run(g);
    if (name == "report") return report.run(g);
    if (name == "repro") return repro.run(g);
    throw UsageError("unknown subcommand " + name);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace xmodal::cli
