#include "xmodal/distance.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "xmodal/error.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

namespace {

constexpr std::array<char, 4> kDistMagic = {'X', 'M', 'D', '1'};

struct Candidate {
  double dist;
  std::uint32_t index;
};

constexpr auto kByDistanceThenIndex = [](const Candidate& a, const Candidate& b) {
  return a.dist < b.dist || (a.dist == b.dist && a.index < b.index);
};

// Moves the `k` smallest candidates to the front, sorted.
void select_smallest(std::vector<Candidate>& c, std::size_t k) {
  if (k < c.size()) {
    std::nth_element(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(),
                     kByDistanceThenIndex);
  }
  std::sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(std::min(k, c.size())),
            kByDistanceThenIndex);
}

void require_even(int k, const char* name) {
  if (k < 2 || k % 2 != 0) {
    throw UsageError(std::string(name) + " must be a positive even number, got " + std::to_string(k));
  }
}

void require_modality_population(std::span<const Modality> modality, int half, const char* name) {
  std::size_t vis = 0;
  for (Modality m : modality) vis += (m == Modality::vis) ? 1 : 0;
  const std::size_t ir = modality.size() - vis;
  const auto need = static_cast<std::size_t>(half) + 1;
  if (vis < need || ir < need) {
    throw DataError("insufficient rows for modality-balanced neighbors with " + std::string(name) +
                    " = " + std::to_string(2 * half) + ": need " + std::to_string(need) +
                    " per modality, have VIS=" + std::to_string(vis) + ", IR=" + std::to_string(ir));
  }
}

bool in_prefix(const NeighborList& nb, std::size_t row, std::size_t k, std::uint32_t target) {
  const auto list = nb.neighbors(row);
  for (std::size_t p = 0; p < k; ++p) {
    if (list[p] == target) return true;
  }
  return false;
}

// {i} plus the neighbors j among the first k of list i that hold i among their first k.
std::vector<std::uint32_t> mutual_set(const NeighborList& nb, std::size_t i, std::size_t k) {
  std::vector<std::uint32_t> out{static_cast<std::uint32_t>(i)};
  const auto list = nb.neighbors(i);
  for (std::size_t p = 0; p < k; ++p) {
    if (in_prefix(nb, list[p], k, static_cast<std::uint32_t>(i))) out.push_back(list[p]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t intersection_size(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::size_t count = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++count;
      ++ia;
      ++ib;
    }
  }
  return count;
}

// Averages the rows of V listed in `sources` (in order) into one sparse row.
struct RowAverager {
  std::vector<double> acc;
  std::vector<char> touched;
  std::vector<std::uint32_t> cols;

  void average(const SparseRows& v, std::span<const std::uint32_t> sources,
               std::vector<std::uint32_t>& out_index, std::vector<double>& out_value) {
    if (acc.size() != v.cols) {
      acc.assign(v.cols, 0.0);
      touched.assign(v.cols, 0);
    }
    cols.clear();
    for (std::uint32_t s : sources) {
      const auto idx = v.row_index(s);
      const auto val = v.row_value(s);
      for (std::size_t p = 0; p < idx.size(); ++p) {
        if (!touched[idx[p]]) {
          touched[idx[p]] = 1;
          cols.push_back(idx[p]);
        }
        acc[idx[p]] += val[p];
      }
    }
    std::sort(cols.begin(), cols.end());
    const double scale = 1.0 / static_cast<double>(sources.size());
    out_index.assign(cols.begin(), cols.end());
    out_value.resize(cols.size());
    for (std::size_t p = 0; p < cols.size(); ++p) {
      out_value[p] = acc[cols[p]] * scale;
      acc[cols[p]] = 0.0;
      touched[cols[p]] = 0;
    }
  }
};

SparseRows assemble(std::size_t cols, std::vector<std::vector<std::uint32_t>>& idx,
                    std::vector<std::vector<double>>& val) {
  SparseRows out;
  out.cols = cols;
  out.offsets.resize(idx.size() + 1, 0);
  for (std::size_t i = 0; i < idx.size(); ++i) out.offsets[i + 1] = out.offsets[i] + idx[i].size();
  out.index.reserve(out.offsets.back());
  out.value.reserve(out.offsets.back());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.index.insert(out.index.end(), idx[i].begin(), idx[i].end());
    out.value.insert(out.value.end(), val[i].begin(), val[i].end());
  }
  return out;
}

SparseRows expand_rows(const SparseRows& v, const std::vector<std::vector<std::uint32_t>>& sources) {
  const std::size_t n = v.rows();
  std::vector<std::vector<std::uint32_t>> idx(n);
  std::vector<std::vector<double>> val(n);
  parallel_for(0, n, [&](std::size_t i) {
    thread_local RowAverager averager;
    averager.average(v, sources[i], idx[i], val[i]);
  });
  return assemble(v.cols, idx, val);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                 static_cast<char>((v >> 16) & 0xff),
                                 static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("truncated distance file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::cosine:
      return "cosine";
    case Metric::jaccard_vanilla:
      return "jaccard";
    case Metric::jaccard_modality_aware:
      return "ma-jaccard";
  }
  return "unknown";
}

DistanceMatrix::DistanceMatrix(std::size_t n, Metric metric, std::optional<JaccardParams> params)
    : n_(n), values_(n * n, 0.0), metric_(metric), params_(params) {}

DistanceMatrix::DistanceMatrix(std::size_t n, std::vector<double> values, Metric metric,
                               std::optional<JaccardParams> params)
    : n_(n), values_(std::move(values)), metric_(metric), params_(params) {
  if (values_.size() != n * n) throw DataError("distance matrix is not square");
}

void DistanceMatrix::validate(double tol) const {
  const double hi = metric_ == Metric::cosine ? 2.0 : 1.0;
  for (std::size_t i = 0; i < n_; ++i) {
    if (std::abs((*this)(i, i)) > tol) {
      throw NumericError("distance matrix diagonal is nonzero at row " + std::to_string(i));
    }
    for (std::size_t j = i + 1; j < n_; ++j) {
      const double a = (*this)(i, j);
      if (!std::isfinite(a)) throw NumericError("non-finite distance");
      if (std::abs(a - (*this)(j, i)) > tol) throw NumericError("distance matrix is not symmetric");
      if (a < -tol || a > hi + tol) throw NumericError("distance outside metric range");
    }
  }
}

void save_distance(const DistanceMatrix& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kDistMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(d.size()));
  out.put(static_cast<char>(d.metric()));
  for (double v : d.values()) {
    const auto f = static_cast<float>(v);
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof(bits));
    put_u32(out, bits);
  }
  if (!out) throw DataError("I/O failure writing " + path.string());
}

DistanceMatrix load_distance(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kDistMagic) throw DataError("bad distance file magic");
  const std::uint32_t n = get_u32(in);
  char metric = 0;
  if (!in.get(metric) || metric < 0 || metric > 2) throw DataError("bad distance metric byte");
  std::vector<double> values(static_cast<std::size_t>(n) * n);
  for (double& v : values) {
    const std::uint32_t bits = get_u32(in);
    float f = 0.0f;
    std::memcpy(&f, &bits, sizeof(f));
    v = f;
  }
  return DistanceMatrix(n, std::move(values), static_cast<Metric>(metric));
}

double SparseRows::at(std::size_t i, std::size_t j) const {
  const auto idx = row_index(i);
  const auto it = std::lower_bound(idx.begin(), idx.end(), static_cast<std::uint32_t>(j));
  if (it == idx.end() || *it != j) return 0.0;
  return row_value(i)[static_cast<std::size_t>(it - idx.begin())];
}

DistanceMatrix cosine_distance(const EmbeddingSet& input) {
  const EmbeddingSet set = ensure_normalized(input, "cosine_distance");
  const std::size_t n = set.size();
  const RowMatrixD f = set.features().cast<double>();
  DistanceMatrix out(n, Metric::cosine);
  constexpr std::size_t kBlock = 64;
  const std::size_t blocks = (n + kBlock - 1) / kBlock;
  parallel_for(0, blocks, [&](std::size_t b) {
    const std::size_t lo = b * kBlock;
    const std::size_t rows = std::min(kBlock, n - lo);
    const RowMatrixD g = f.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(rows)) *
                         f.transpose();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t i = lo + r;
      for (std::size_t j = i + 1; j < n; ++j) {
        out(i, j) = std::clamp(1.0 - g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)), 0.0, 2.0);
      }
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i) = 0.0;
    for (std::size_t j = 0; j < i; ++j) out(i, j) = out(j, i);
  }
  return out;
}

NeighborList knn(const DistanceMatrix& d, int k) {
  const std::size_t n = d.size();
  if (k < 1 || static_cast<std::size_t>(k) >= n) {
    throw UsageError("knn requires 1 <= k < N (k = " + std::to_string(k) + ", N = " + std::to_string(n) + ")");
  }
  NeighborList out;
  out.n = n;
  out.k = k;
  out.index.resize(n * static_cast<std::size_t>(k));
  out.distance.resize(n * static_cast<std::size_t>(k));
  parallel_for(0, n, [&](std::size_t i) {
    thread_local std::vector<Candidate> cand;
    cand.clear();
    const auto row = d.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cand.push_back({row[j], static_cast<std::uint32_t>(j)});
    }
    select_smallest(cand, static_cast<std::size_t>(k));
    for (std::size_t p = 0; p < static_cast<std::size_t>(k); ++p) {
      out.index[i * static_cast<std::size_t>(k) + p] = cand[p].index;
      out.distance[i * static_cast<std::size_t>(k) + p] = cand[p].dist;
    }
  });
  return out;
}

NeighborList knn_modality_balanced(const DistanceMatrix& d, std::span<const Modality> modality,
                                   int k1) {
  require_even(k1, "k1");
  const std::size_t n = d.size();
  if (modality.size() != n) throw UsageError("modality vector length does not match distance matrix");
  const int half = k1 / 2;
  require_modality_population(modality, half, "k");
  const auto k = static_cast<std::size_t>(k1);
  NeighborList out;
  out.n = n;
  out.k = k1;
  out.balanced = true;
  out.index.resize(n * k);
  out.distance.resize(n * k);
  parallel_for(0, n, [&](std::size_t i) {
    thread_local std::vector<Candidate> intra;
    thread_local std::vector<Candidate> inter;
    intra.clear();
    inter.clear();
    const auto row = d.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (modality[j] == modality[i] ? intra : inter).push_back({row[j], static_cast<std::uint32_t>(j)});
    }
    select_smallest(intra, static_cast<std::size_t>(half));
    select_smallest(inter, static_cast<std::size_t>(half));
    thread_local std::vector<Candidate> merged;
    merged.clear();
    std::merge(intra.begin(), intra.begin() + half, inter.begin(), inter.begin() + half,
               std::back_inserter(merged), kByDistanceThenIndex);
    for (std::size_t p = 0; p < k; ++p) {
      out.index[i * k + p] = merged[p].index;
      out.distance[i * k + p] = merged[p].dist;
    }
  });
  return out;
}

ReciprocalSet reciprocal_expand(const NeighborList& neighbors, int k1) {
  require_even(k1, "k1");
  if (neighbors.k < k1) {
    throw UsageError("reciprocal_expand needs neighbor lists of length >= k1");
  }
  const std::size_t n = neighbors.n;
  const auto full_k = static_cast<std::size_t>(k1);
  const auto half_k = static_cast<std::size_t>(k1 / 2);
  std::vector<std::vector<std::uint32_t>> full(n);
  std::vector<std::vector<std::uint32_t>> half(n);
  parallel_for(0, n, [&](std::size_t i) {
    full[i] = mutual_set(neighbors, i, full_k);
    half[i] = mutual_set(neighbors, i, half_k);
  });
  ReciprocalSet out;
  out.members.resize(n);
  parallel_for(0, n, [&](std::size_t i) {
    const auto& base = full[i];
    std::vector<std::uint32_t> expanded = base;
    for (std::uint32_t c : base) {
      const auto& cand = half[c];
      if (3 * intersection_size(cand, base) > 2 * cand.size()) {
        expanded.insert(expanded.end(), cand.begin(), cand.end());
      }
    }
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
    out.members[i] = std::move(expanded);
  });
  return out;
}

SparseRows v_encode(const DistanceMatrix& d, const ReciprocalSet& reciprocal) {
  const std::size_t n = d.size();
  if (reciprocal.members.size() != n) throw UsageError("reciprocal sets do not match distance matrix");
  std::vector<std::vector<std::uint32_t>> idx(n);
  std::vector<std::vector<double>> val(n);
  parallel_for(0, n, [&](std::size_t i) {
    const auto& members = reciprocal.members[i];
    idx[i] = members;
    val[i].resize(members.size());
    double total = 0.0;
    for (std::size_t p = 0; p < members.size(); ++p) {
      val[i][p] = std::exp(-d(i, members[p]));
      total += val[i][p];
    }
    for (double& w : val[i]) w /= total;
  });
  return assemble(n, idx, val);
}

SparseRows local_query_expansion(const SparseRows& v, const NeighborList& neighbors, int k2) {
  if (k2 < 1) throw UsageError("k2 must be >= 1");
  if (neighbors.k < k2 - 1) throw UsageError("neighbor lists shorter than k2 - 1");
  const std::size_t n = v.rows();
  std::vector<std::vector<std::uint32_t>> sources(n);
  for (std::size_t i = 0; i < n; ++i) {
    sources[i].push_back(static_cast<std::uint32_t>(i));
    const auto list = neighbors.neighbors(i);
    sources[i].insert(sources[i].end(), list.begin(), list.begin() + (k2 - 1));
  }
  return expand_rows(v, sources);
}

namespace {

SparseRows balanced_lqe_from(const SparseRows& v, const NeighborList& balanced,
                             std::span<const Modality> modality, int k2) {
  const std::size_t n = v.rows();
  const auto half = static_cast<std::size_t>(k2 / 2);
  std::vector<std::vector<std::uint32_t>> sources(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& src = sources[i];
    src.push_back(static_cast<std::uint32_t>(i));
    std::size_t intra = 1;  // the query fills one intra-modality slot
    std::size_t inter = 0;
    for (std::uint32_t j : balanced.neighbors(i)) {
      if (modality[j] == modality[i]) {
        if (intra < half) {
          src.push_back(j);
          ++intra;
        }
      } else if (inter < half) {
        src.push_back(j);
        ++inter;
      }
    }
    if (intra != half || inter != half) {
      throw UsageError("balanced neighbor list too short for k2 = " + std::to_string(k2));
    }
  }
  return expand_rows(v, sources);
}

}  // namespace

SparseRows balanced_lqe(const SparseRows& v, const DistanceMatrix& d, std::span<const Modality> modality,
                        int k2) {
  require_even(k2, "k2");
  return balanced_lqe_from(v, knn_modality_balanced(d, modality, k2), modality, k2);
}

DistanceMatrix jaccard_from_v(const SparseRows& v, Metric tag, std::optional<JaccardParams> params) {
  const std::size_t n = v.rows();
  for (double w : v.value) {
    if (w < 0.0) throw UsageError("jaccard_from_v requires non-negative weights");
  }
  struct Entry {
    std::uint32_t row;
    double value;
  };
  std::vector<std::vector<Entry>> inverted(v.cols);
  std::vector<double> row_sum(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = v.row_index(i);
    const auto val = v.row_value(i);
    for (std::size_t p = 0; p < idx.size(); ++p) {
      inverted[idx[p]].push_back({static_cast<std::uint32_t>(i), val[p]});
      row_sum[i] += val[p];
    }
  }
  DistanceMatrix out(n, std::vector<double>(n * n, 1.0), tag, params);
  parallel_for(0, n, [&](std::size_t i) {
    thread_local std::vector<double> shared;
    shared.assign(n, 0.0);
    const auto idx = v.row_index(i);
    const auto val = v.row_value(i);
    for (std::size_t p = 0; p < idx.size(); ++p) {
      for (const Entry& e : inverted[idx[p]]) shared[e.row] += std::min(val[p], e.value);
    }
    auto row = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (shared[j] == 0.0) continue;
      const double denom = row_sum[i] + row_sum[j] - shared[j];
      row[j] = denom > 0.0 ? std::clamp(1.0 - shared[j] / denom, 0.0, 1.0) : 0.0;
    }
    row[i] = 0.0;
  });
  return out;
}

DistanceMatrix jaccard_distance(const EmbeddingSet& input, const JaccardConfig& config) {
  const EmbeddingSet set = ensure_normalized(input, "jaccard_distance");
  const int k1 = config.params.k1;
  const int k2 = config.params.k2;
  require_even(k1, "k1");
  if (k2 < 1) throw UsageError("k2 must be >= 1");
  if (config.cosine_mix < 0.0 || config.cosine_mix > 1.0) throw UsageError("cosine_mix must be in [0, 1]");
  const DistanceMatrix base = cosine_distance(set);
  const auto& modality = set.modality();

  DistanceMatrix out(0, Metric::jaccard_vanilla);
  if (config.mode == JaccardMode::vanilla) {
    const NeighborList nb = knn(base, std::max(k1, k2 - 1));
    const SparseRows v = v_encode(base, reciprocal_expand(nb, k1));
    const SparseRows vq = k2 > 1 ? local_query_expansion(v, nb, k2) : v;
    out = jaccard_from_v(vq, Metric::jaccard_vanilla, config.params);
  } else {
    require_even(k2, "k2");
    require_modality_population(modality, std::max(k1, k2) / 2, "k");
    const NeighborList nb = knn_modality_balanced(base, modality, k1);
    const SparseRows v = v_encode(base, reciprocal_expand(nb, k1));
    // The k1 list already holds the k1/2 nearest rows of each modality in
    // order, so it serves the expansion step whenever k2 <= k1.
    const SparseRows vq = k2 <= k1 ? balanced_lqe_from(v, nb, modality, k2)
                                   : balanced_lqe(v, base, modality, k2);
    out = jaccard_from_v(vq, Metric::jaccard_modality_aware, config.params);
  }
  if (config.cosine_mix > 0.0) {
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out(i, j) = (1.0 - config.cosine_mix) * out(i, j) + config.cosine_mix * 0.5 * base(i, j);
      }
    }
  }
  return out;
}

Composition knn_composition(const NeighborList& neighbors, std::span<const Modality> modality) {
  if (modality.size() != neighbors.n) throw UsageError("modality vector length does not match neighbor list");
  Composition out;
  out.inter_fraction.resize(neighbors.n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < neighbors.n; ++i) {
    std::size_t inter = 0;
    for (std::uint32_t j : neighbors.neighbors(i)) inter += (modality[j] != modality[i]) ? 1 : 0;
    out.inter_fraction[i] = neighbors.k > 0 ? static_cast<double>(inter) / neighbors.k : 0.0;
    total += out.inter_fraction[i];
  }
  out.mean = neighbors.n > 0 ? total / static_cast<double>(neighbors.n) : 0.0;
  return out;
}

}  // namespace xmodal
