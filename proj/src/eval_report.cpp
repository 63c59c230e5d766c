#include "xmodal/eval_report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <utility>

#include "xmodal/error.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

namespace {

double choose2(double n) { return n * (n - 1.0) / 2.0; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

PairType pair_type(Modality a, Modality b) {
  if (a != b) return PairType::vis_ir;
  return a == Modality::vis ? PairType::vis_vis : PairType::ir_ir;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double ari(std::span<const int> pred, std::span<const std::uint32_t> truth) {
  if (pred.size() != truth.size()) throw UsageError("ari: prediction and truth lengths differ");
  const std::size_t n = pred.size();
  if (n < 2) return 1.0;
  // Give every noise point its own label.
  std::vector<long long> p(n);
  long long next_singleton = -1;
  for (std::size_t i = 0; i < n; ++i) p[i] = pred[i] < 0 ? next_singleton-- : pred[i];

  std::map<std::pair<long long, std::uint32_t>, double> cells;
  std::map<long long, double> rows;
  std::map<std::uint32_t, double> cols;
  for (std::size_t i = 0; i < n; ++i) {
    cells[{p[i], truth[i]}] += 1.0;
    rows[p[i]] += 1.0;
    cols[truth[i]] += 1.0;
  }
  double index = 0.0;
  for (const auto& [k, c] : cells) index += choose2(c);
  double sum_rows = 0.0;
  for (const auto& [k, c] : rows) sum_rows += choose2(c);
  double sum_cols = 0.0;
  for (const auto& [k, c] : cols) sum_cols += choose2(c);
  const double expected = sum_rows * sum_cols / choose2(static_cast<double>(n));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double ari(const ClusterAssignment& pred, std::span<const std::uint32_t> truth) {
  if (!pred.source_indices) return ari(pred.labels, truth);
  std::vector<std::uint32_t> sub(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred.parent_row(i);
    if (p >= truth.size()) throw UsageError("ari: assignment refers to rows outside the truth vector");
    sub[i] = truth[p];
  }
  return ari(pred.labels, sub);
}

RetrievalResult cmc_map(const EmbeddingSet& query_in, const EmbeddingSet& gallery_in, int max_rank) {
  if (max_rank < 1) throw UsageError("max_rank must be >= 1");
  if (query_in.dim() != gallery_in.dim()) throw UsageError("query and gallery dimensions differ");
  if (!query_in.true_id() || !gallery_in.true_id()) throw DataError("retrieval needs ground-truth identities");
  const EmbeddingSet query = ensure_normalized(query_in, "cmc_map");
  const EmbeddingSet gallery = ensure_normalized(gallery_in, "cmc_map");
  const auto& qid = *query.true_id();
  const auto& gid = *gallery.true_id();
  const std::size_t nq = query.size();
  const std::size_t ng = gallery.size();

  const RowMatrixD sims = query.features().cast<double>() * gallery.features().cast<double>().transpose();
  std::vector<long long> first_hit(nq, -1);
  std::vector<double> ap(nq, 0.0);
  parallel_for(0, nq, [&](std::size_t q) {
    std::vector<std::size_t> order(ng);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto row = sims.row(static_cast<Eigen::Index>(q));
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = 1.0 - row(static_cast<Eigen::Index>(a));
      const double db = 1.0 - row(static_cast<Eigen::Index>(b));
      return da < db || (da == db && a < b);
    });
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < ng; ++r) {
      if (gid[order[r]] != qid[q]) continue;
      if (hits == 0) first_hit[q] = static_cast<long long>(r);
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits > 0) ap[q] = precision_sum / static_cast<double>(hits);
  });

  RetrievalResult out;
  out.query_modality = query.modality(0);
  out.gallery_modality = gallery.modality(0);
  out.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  for (std::size_t q = 0; q < nq; ++q) {
    if (first_hit[q] < 0) {
      ++out.excluded;
      continue;
    }
    ++out.num_queries;
    out.map_score += ap[q];
    for (auto r = static_cast<std::size_t>(first_hit[q]); r < out.cmc.size(); ++r) out.cmc[r] += 1.0;
  }
  if (out.num_queries > 0) {
    for (double& c : out.cmc) c /= static_cast<double>(out.num_queries);
    out.map_score /= static_cast<double>(out.num_queries);
  }
  return out;
}

std::string_view to_string(PairType t) {
  switch (t) {
    case PairType::vis_vis: return "vis-vis";
    case PairType::ir_ir: return "ir-ir";
    case PairType::vis_ir: return "vis-ir";
  }
  return "vis-vis";
}

double DistanceBundle::intra_mean() const {
  const auto& a = (*this)[PairType::vis_vis];
  const auto& b = (*this)[PairType::ir_ir];
  const auto n = a.total + b.total;
  return n == 0 ? 0.0 : (a.sum + b.sum) / static_cast<double>(n);
}

std::optional<double> DistanceBundle::gap() const {
  const auto& x = (*this)[PairType::vis_ir];
  if (x.total == 0) return std::nullopt;
  return x.mean() - intra_mean();
}

std::vector<double> uniform_edges(double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw UsageError("histogram needs bins >= 1 and hi > lo");
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
  return edges;
}

DistanceBundle distance_distribution(const EmbeddingSet& set, const DistanceMatrix& d, std::span<const int> groups,
                                     const std::vector<double>& edges) {
  if (groups.size() != set.size()) throw DataError("group labels do not cover the set");
  if (d.size() != set.size()) throw UsageError("distance matrix size does not match the set");
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) throw UsageError("histogram edges must be ascending");
  DistanceBundle out;
  for (std::size_t t = 0; t < 3; ++t) {
    out.hist[t].type = static_cast<PairType>(t);
    out.hist[t].edges = edges;
    out.hist[t].counts.assign(edges.size() - 1, 0);
  }
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] >= 0) members[groups[i]].push_back(i);
  }
  const std::size_t bins = edges.size() - 1;
  for (const auto& [g, rows] : members) {
    for (std::size_t a = 0; a < rows.size(); ++a) {
      for (std::size_t b = a + 1; b < rows.size(); ++b) {
        const double v = d(rows[a], rows[b]);
        auto& h = out.hist[static_cast<std::size_t>(pair_type(set.modality(rows[a]), set.modality(rows[b])))];
        const auto it = std::upper_bound(edges.begin(), edges.end(), v);
        const auto bin = std::clamp<std::ptrdiff_t>(it - edges.begin() - 1, 0, static_cast<std::ptrdiff_t>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(bin)];
        ++h.total;
        h.sum += v;
      }
    }
  }
  return out;
}

DistanceBundle distance_distribution(const EmbeddingSet& set, const DistanceMatrix& d, GroupBy group_by,
                                     const ClusterAssignment* predicted, const std::vector<double>& edges) {
  std::vector<int> groups(set.size(), -1);
  if (group_by == GroupBy::true_class) {
    if (!set.true_id()) throw DataError("true-class grouping needs identities");
    for (std::size_t i = 0; i < set.size(); ++i) groups[i] = static_cast<int>((*set.true_id())[i]);
  } else {
    if (predicted == nullptr) throw DataError("predicted-cluster grouping needs an assignment");
    groups = predicted->parent_labels(set.size());
  }
  return distance_distribution(set, d, groups, edges);
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"stage", r.stage},
          {"loss", r.loss},
          {"ari", r.ari},
          {"clusters_vis", r.clusters_vis},
          {"clusters_ir", r.clusters_ir},
          {"clusters_global", r.clusters_global},
          {"mixed_rate", r.mixed_rate},
          {"rank1", r.rank1},
          {"map", r.map_score}};
}

nlohmann::json to_json(const RetrievalResult& r) {
  return {{"rank1", r.rank1()},
          {"map", r.map_score},
          {"cmc", r.cmc},
          {"query_modality", std::string(to_string(r.query_modality))},
          {"gallery_modality", std::string(to_string(r.gallery_modality))},
          {"num_queries", r.num_queries},
          {"excluded", r.excluded}};
}

nlohmann::json to_json(const DistanceBundle& b) {
  nlohmann::json j;
  for (const auto& h : b.hist) {
    j[std::string(to_string(h.type))] = {{"pairs", h.total}, {"mean", h.mean()}};
  }
  j["intra_mean"] = b.intra_mean();
  j["gap"] = b.gap() ? nlohmann::json(*b.gap()) : nlohmann::json(nullptr);
  return j;
}

std::vector<std::filesystem::path> emit_report(const ReportArtifacts& artifacts, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  nlohmann::json summary = artifacts.summary;

  if (artifacts.retrieval) {
    std::string csv = "rank,cmc\n";
    for (std::size_t r = 0; r < artifacts.retrieval->cmc.size(); ++r) {
      csv += std::to_string(r + 1) + "," + format_double(artifacts.retrieval->cmc[r]) + "\n";
    }
    write_text(out_dir / "cmc.csv", csv);
    written.push_back(out_dir / "cmc.csv");
    summary["retrieval"] = to_json(*artifacts.retrieval);
  }
  for (const auto& [name, bundle] : artifacts.distributions) {
    std::string csv = "bin_lo,bin_hi,count,pair_type\n";
    for (const auto& h : bundle.hist) {
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        csv += format_double(h.edges[b]) + "," + format_double(h.edges[b + 1]) + "," + std::to_string(h.counts[b]) +
               "," + std::string(to_string(h.type)) + "\n";
      }
    }
    const auto path = out_dir / ("dist_" + name + ".csv");
    write_text(path, csv);
    written.push_back(path);
    summary["distributions"][name] = to_json(bundle);
  }
  if (!artifacts.history.empty()) {
    std::string epochs = "epoch,ari,clusters_vis,clusters_ir,clusters_global\n";
    std::string loss = "epoch,stage,loss\n";
    for (const auto& r : artifacts.history) {
      epochs += std::to_string(r.epoch) + "," + format_double(r.ari) + "," + std::to_string(r.clusters_vis) + "," +
                std::to_string(r.clusters_ir) + "," + std::to_string(r.clusters_global) + "\n";
      loss += std::to_string(r.epoch) + "," + std::to_string(r.stage) + "," + format_double(r.loss) + "\n";
    }
    write_text(out_dir / "epochs.csv", epochs);
    write_text(out_dir / "loss.csv", loss);
    written.push_back(out_dir / "epochs.csv");
    written.push_back(out_dir / "loss.csv");
    summary["history"] = nlohmann::json::array();
    for (const auto& r : artifacts.history) summary["history"].push_back(to_json(r));
  }
  summary["files"] = nlohmann::json::array();
  for (const auto& p : written) summary["files"].push_back(p.filename().string());
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  written.insert(written.begin(), out_dir / "summary.json");
  return written;
}

}  // namespace xmodal
