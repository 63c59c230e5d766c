#include "xmodal/prototype_memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include <json.hpp>

#include "xmodal/error.hpp"
#include "xmodal/log.hpp"

namespace xmodal {

namespace {

Eigen::RowVectorXd mean_of(const EmbeddingSet& set, const ClusterAssignment& a, const std::vector<std::size_t>& local) {
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(set.dim()));
  for (std::size_t l : local) {
    const auto r = set.row(a.parent_row(l));
    for (std::size_t k = 0; k < r.size(); ++k) sum(static_cast<Eigen::Index>(k)) += r[k];
  }
  const double norm = sum.norm();
  if (!(norm > 0.0)) throw NumericError("cluster mean has zero norm");
  return sum / norm;
}

void check_assignment(const EmbeddingSet& set, const ClusterAssignment& a) {
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a.parent_row(l) >= set.size()) throw UsageError("assignment refers to rows outside the set");
  }
}

ProtoTag tag_of(Modality m) { return m == Modality::vis ? ProtoTag::vis : ProtoTag::ir; }

struct BankBuilder {
  std::vector<Eigen::RowVectorXd> rows;
  PrototypeBank bank;

  std::size_t add(Eigen::RowVectorXd v, ProtoTag tag, int cluster) {
    rows.push_back(std::move(v));
    bank.modality_tag.push_back(tag);
    bank.owner_cluster.push_back(cluster);
    bank.positives[static_cast<std::size_t>(cluster)].push_back(rows.size() - 1);
    return rows.size() - 1;
  }

  PrototypeBank finish(std::size_t dim) {
    bank.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows.size(); ++i) bank.vectors.row(static_cast<Eigen::Index>(i)) = rows[i];
    if (rows.empty()) log::warn("prototype bank is empty: every sample was labeled noise");
    return std::move(bank);
  }
};

BankBuilder start(const ClusterAssignment& a, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw UsageError("mu must be in [0, 1]");
  BankBuilder b;
  b.bank.mu = mu;
  b.bank.positives.resize(static_cast<std::size_t>(a.num_clusters));
  return b;
}

}  // namespace

std::string_view to_string(ProtoTag t) {
  switch (t) {
    case ProtoTag::vis: return "VIS";
    case ProtoTag::ir: return "IR";
    case ProtoTag::none: return "NONE";
  }
  return "NONE";
}

ProtoTag proto_tag_from_string(std::string_view s) {
  if (s == "VIS") return ProtoTag::vis;
  if (s == "IR") return ProtoTag::ir;
  if (s == "NONE") return ProtoTag::none;
  throw DataError("unknown prototype tag '" + std::string(s) + "'");
}

std::size_t PrototypeBank::prototype_for(int cluster, Modality m) const {
  if (cluster < 0 || static_cast<std::size_t>(cluster) >= positives.size()) {
    throw UsageError("cluster id out of range: " + std::to_string(cluster));
  }
  const auto& list = positives[static_cast<std::size_t>(cluster)];
  if (list.size() == 1) return list.front();
  for (std::size_t p : list) {
    if (modality_tag[p] == tag_of(m)) return p;
  }
  throw DataError("cluster " + std::to_string(cluster) + " has no prototype for " + std::string(to_string(m)));
}

void PrototypeBank::validate(double tol) const {
  const std::size_t c = size();
  if (modality_tag.size() != c || owner_cluster.size() != c) throw DataError("prototype metadata length mismatch");
  if (!(mu >= 0.0 && mu <= 1.0)) throw DataError("mu outside [0, 1]");
  for (std::size_t i = 0; i < c; ++i) {
    const double n = vectors.row(static_cast<Eigen::Index>(i)).norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > tol) {
      throw DataError("prototype " + std::to_string(i) + " is not unit norm");
    }
  }
  std::vector<int> seen(c, 0);
  for (std::size_t z = 0; z < positives.size(); ++z) {
    const auto& list = positives[z];
    if (list.empty() || list.size() > 2) throw DataError("cluster " + std::to_string(z) + " must own 1 or 2 prototypes");
    for (std::size_t p : list) {
      if (p >= c || owner_cluster[p] != static_cast<int>(z)) throw DataError("positives map is inconsistent");
      ++seen[p];
    }
  }
  if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; })) {
    throw DataError("positives map does not partition the prototypes");
  }
}

PrototypeBank build_intra_bank(const EmbeddingSet& set, const ClusterAssignment& assignment, double mu) {
  check_assignment(set, assignment);
  BankBuilder b = start(assignment, mu);
  for (int z = 0; z < assignment.num_clusters; ++z) {
    const auto& members = assignment.members[static_cast<std::size_t>(z)];
    const Modality first = set.modality(assignment.parent_row(members.front()));
    const bool uniform = std::all_of(members.begin(), members.end(), [&](std::size_t l) {
      return set.modality(assignment.parent_row(l)) == first;
    });
    b.add(mean_of(set, assignment, members), uniform ? tag_of(first) : ProtoTag::none, z);
  }
  return b.finish(set.dim());
}

PrototypeBank build_global_bank_split(const EmbeddingSet& set, const ClusterAssignment& global, double mu) {
  check_assignment(set, global);
  BankBuilder b = start(global, mu);
  for (int z = 0; z < global.num_clusters; ++z) {
    std::vector<std::size_t> by_modality[2];
    for (std::size_t l : global.members[static_cast<std::size_t>(z)]) {
      by_modality[static_cast<int>(set.modality(global.parent_row(l)))].push_back(l);
    }
    for (const Modality m : {Modality::vis, Modality::ir}) {
      const auto& part = by_modality[static_cast<int>(m)];
      if (!part.empty()) b.add(mean_of(set, global, part), tag_of(m), z);
    }
  }
  return b.finish(set.dim());
}

PrototypeBank build_global_bank_unified(const EmbeddingSet& set, const ClusterAssignment& global, double mu) {
  check_assignment(set, global);
  BankBuilder b = start(global, mu);
  for (int z = 0; z < global.num_clusters; ++z) {
    b.add(mean_of(set, global, global.members[static_cast<std::size_t>(z)]), ProtoTag::none, z);
  }
  return b.finish(set.dim());
}

void ema_update(PrototypeBank& bank, std::size_t index, std::span<const double> feature) {
  if (index >= bank.size()) throw UsageError("prototype index out of range: " + std::to_string(index));
  if (feature.size() != bank.dim()) throw UsageError("feature dimension does not match the bank");
  double fnorm = 0.0;
  for (double x : feature) fnorm += x * x;
  if (std::abs(std::sqrt(fnorm) - 1.0) > 1e-5) throw UsageError("ema_update expects a unit feature");
  auto v = bank.vectors.row(static_cast<Eigen::Index>(index));
  for (std::size_t k = 0; k < feature.size(); ++k) {
    v(static_cast<Eigen::Index>(k)) = bank.mu * v(static_cast<Eigen::Index>(k)) + (1.0 - bank.mu) * feature[k];
  }
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("prototype collapsed to zero in ema_update");
  v /= n;
}

std::vector<std::size_t> hard_negatives(const PrototypeBank& bank, std::span<const double> query,
                                        std::span<const std::size_t> exclude, std::size_t k_neg) {
  if (query.size() != bank.dim()) throw UsageError("query dimension does not match the bank");
  std::vector<char> excluded(bank.size(), 0);
  std::size_t n_excluded = 0;
  for (std::size_t e : exclude) {
    if (e >= bank.size()) throw UsageError("excluded prototype index out of range");
    n_excluded += excluded[e] ? 0 : 1;
    excluded[e] = 1;
  }
  if (k_neg > bank.size() - n_excluded) {
    throw UsageError("k_neg = " + std::to_string(k_neg) + " exceeds the " + std::to_string(bank.size() - n_excluded) +
                     " available negatives");
  }
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(bank.size() - n_excluded);
  const Eigen::Map<const Eigen::RowVectorXd> q(query.data(), static_cast<Eigen::Index>(query.size()));
  for (std::size_t j = 0; j < bank.size(); ++j) {
    if (!excluded[j]) scored.emplace_back(bank.vectors.row(static_cast<Eigen::Index>(j)).dot(q), j);
  }
  const auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k_neg), scored.end(), better);
  std::vector<std::size_t> out(k_neg);
  for (std::size_t i = 0; i < k_neg; ++i) out[i] = scored[i].second;
  return out;
}

void save_bank(const PrototypeBank& bank, const std::filesystem::path& path) {
  bank.validate(1e-5);
  nlohmann::json meta;
  meta["count"] = bank.size();
  meta["dim"] = bank.dim();
  meta["mu"] = bank.mu;
  meta["modality_tag"] = nlohmann::json::array();
  for (ProtoTag t : bank.modality_tag) meta["modality_tag"].push_back(to_string(t));
  meta["owner_cluster"] = bank.owner_cluster;
  meta["positives"] = bank.positives;
  if (bank.size() > 0) {
    RowMatrixF f = bank.vectors.cast<float>();
    std::vector<Modality> m;
    m.reserve(bank.size());
    for (ProtoTag t : bank.modality_tag) m.push_back(t == ProtoTag::ir ? Modality::ir : Modality::vis);
    save(EmbeddingSet(std::move(f), std::move(m)), path, FileFormat::binary);
  }
  std::filesystem::path side = path;
  side += ".json";
  std::ofstream out(side);
  if (!out) throw DataError("cannot write " + side.string());
  out << meta.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + side.string());
}

PrototypeBank load_bank(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw DataError("cannot read " + side.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed bank sidecar " + side.string() + ": " + e.what());
  }
  PrototypeBank bank;
  try {
    bank.mu = meta.at("mu").get<double>();
    for (const auto& t : meta.at("modality_tag")) bank.modality_tag.push_back(proto_tag_from_string(t.get<std::string>()));
    bank.owner_cluster = meta.at("owner_cluster").get<std::vector<int>>();
    bank.positives = meta.at("positives").get<std::vector<std::vector<std::size_t>>>();
    const auto count = meta.at("count").get<std::size_t>();
    const auto dim = meta.at("dim").get<std::size_t>();
    if (count > 0) {
      const EmbeddingSet set = load(path, FileFormat::binary);
      if (set.size() != count || set.dim() != dim) throw DataError("bank vectors disagree with sidecar shape");
      bank.vectors = set.features().cast<double>();
      // Rows were rounded to f32 on save; restore exact unit length.
      bank.vectors.rowwise().normalize();
    } else {
      bank.vectors.resize(0, static_cast<Eigen::Index>(dim));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed bank sidecar " + side.string() + ": " + e.what());
  }
  bank.validate();
  return bank;
}

}  // namespace xmodal
