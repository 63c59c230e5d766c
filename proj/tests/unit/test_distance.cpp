#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/error.hpp"
#include "xmodal/synth_data.hpp"

using namespace xmodal;

namespace {

DistanceMatrix from_dense(const std::vector<std::vector<double>>& v, Metric m = Metric::cosine) {
  DistanceMatrix d(v.size(), m);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) d(i, j) = v[i][j];
  return d;
}

// Points on a line; distance is the gap scaled into [0, 2].
DistanceMatrix line(const std::vector<double>& x) {
  std::vector<std::vector<double>> v(x.size(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) v[i][j] = std::abs(x[i] - x[j]) / 100.0;
  return from_dense(v);
}

SparseRows sparse(const std::vector<std::vector<double>>& dense) {
  SparseRows s;
  s.cols = dense.front().size();
  for (const auto& row : dense) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] != 0.0) {
        s.index.push_back(static_cast<std::uint32_t>(j));
        s.value.push_back(row[j]);
      }
    }
    s.offsets.push_back(s.index.size());
  }
  return s;
}

double max_diff(const DistanceMatrix& a, const oracle::Dense& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a(i, j) - b[i][j]));
  return m;
}

EmbeddingSet small_corpus(std::uint64_t seed, double gap = 0.8) {
  SynthConfig c;
  c.num_ids = 4;
  c.imgs_per_id_vis = 15;
  c.imgs_per_id_ir = 10;
  c.num_test_ids = 0;
  c.modality_gap = gap;
  c.seed = seed;
  return generate(c).train_embed();
}

}  // namespace

TEST_CASE("cosine distance basics") {
  RowMatrixF f(4, 2);
  f << 1, 0, 1, 0, 0, 1, -1, 0;
  const auto d = cosine_distance(EmbeddingSet(f, {Modality::vis, Modality::vis, Modality::ir, Modality::ir}));
  CHECK(d(0, 1) == 0.0);
  CHECK(d(0, 2) == doctest::Approx(1.0));
  CHECK(d(0, 3) == doctest::Approx(2.0));
  d.validate();
}

TEST_CASE("knn tie goes to the lower index") {
  const auto d = line({0, 5, 6, 1, 8, 9, 7, -1});
  CHECK(knn(d, 1).neighbors(0)[0] == 3);
}

TEST_CASE("knn ordering and ties") {
  const auto d = line({0, 5, 5, 9, 1, 4, 2, 4});
  // Rows 5 and 7 sit at equal distance from row 1; the lower index wins.
  const auto nb = knn(d, 1);
  CHECK(nb.neighbors(1)[0] == 2);
  CHECK(nb.neighbors(2)[0] == 1);
  const auto nb2 = knn(d, 3);
  CHECK(nb2.neighbors(1)[1] == 5);
  CHECK(nb2.neighbors(1)[2] == 7);
  const auto all = knn(d, 7);
  for (std::size_t i = 0; i < 8; ++i) {
    std::set<std::uint32_t> seen(all.neighbors(i).begin(), all.neighbors(i).end());
    CHECK(seen.size() == 7);
    CHECK(seen.count(static_cast<std::uint32_t>(i)) == 0);
  }
  CHECK_THROWS_AS(knn(d, 8), UsageError);
}

TEST_CASE("modality-balanced knn") {
  // Query 0 (VIS); intra candidates at .1 .2 .3, inter at .5 .6 .7.
  const auto d = line({0, 10, 20, 30, 50, 60, 70});
  const std::vector<Modality> m{Modality::vis, Modality::vis, Modality::vis, Modality::vis,
                                Modality::ir,  Modality::ir,  Modality::ir};
  const auto nb = knn_modality_balanced(d, m, 4);
  const auto l = nb.neighbors(0);
  CHECK(std::vector<std::uint32_t>(l.begin(), l.end()) == std::vector<std::uint32_t>{1, 2, 4, 5});
  CHECK(nb.balanced);
  CHECK(knn_composition(nb, m).mean == 0.5);

  const std::vector<Modality> few{Modality::vis, Modality::vis, Modality::vis, Modality::vis,
                                  Modality::vis, Modality::ir,  Modality::ir};
  CHECK_THROWS_AS(knn_modality_balanced(d, few, 4), DataError);
  CHECK_THROWS_AS(knn_modality_balanced(d, m, 3), UsageError);
}

TEST_CASE("reciprocal sets on a hand instance") {
  // Row 5 is a hub-side outlier: its nearest row does not reciprocate.
  const auto d = line({0, 1, 2, 10, 11, 30});
  const auto r = reciprocal_expand(knn(d, 2), 2);
  using V = std::vector<std::uint32_t>;
  CHECK(r.members[0] == V{0, 1, 2});
  CHECK(r.members[1] == V{0, 1, 2});
  CHECK(r.members[2] == V{0, 1, 2});
  CHECK(r.members[3] == V{3, 4});
  CHECK(r.members[4] == V{3, 4});
  CHECK(r.members[5] == V{5});
  const auto v = v_encode(d, r);
  CHECK(v.at(5, 5) == 1.0);
  CHECK(v.row_index(5).size() == 1);
}

TEST_CASE("expansion adds an overlapping half-neighborhood") {
  // Every member is the query itself or reciprocal with some member.
  const auto d = line({0, 1, 2, 3, 3.5, 40, 41, 42});
  const auto nb = knn(d, 4);
  const auto r = reciprocal_expand(nb, 4);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(std::binary_search(r.members[i].begin(), r.members[i].end(), static_cast<std::uint32_t>(i)));
  }
  // Every member is reciprocal at the full or half level.
  for (std::size_t i = 0; i < 8; ++i) {
    for (auto j : r.members[i]) {
      if (j == i) continue;
      bool linked = false;
      for (auto c : r.members[i]) {
        const auto lc = nb.neighbors(c);
        const auto lj = nb.neighbors(j);
        const bool cj = std::find(lc.begin(), lc.end(), j) != lc.end();
        const bool jc = std::find(lj.begin(), lj.end(), c) != lj.end();
        linked = linked || (cj && jc) || c == j;
      }
      CHECK(linked);
    }
  }
}

TEST_CASE("v_encode weights") {
  const std::vector<std::vector<double>> dv{
      {0, 0.2, 0.9, 0.5}, {0.2, 0, 0.4, 0.3}, {0.9, 0.4, 0, 0.7}, {0.5, 0.3, 0.7, 0}};
  const auto d = from_dense(dv);
  ReciprocalSet r;
  r.members = {{0, 1, 3}, {1}, {0, 2, 3}, {1, 2, 3}};
  const auto v = v_encode(d, r);
  CHECK(v.at(0, 0) == doctest::Approx(0.4123266855795784).epsilon(1e-12));
  CHECK(v.at(0, 1) == doctest::Approx(0.33758453779871644).epsilon(1e-12));
  CHECK(v.at(0, 3) == doctest::Approx(0.25008877662170526).epsilon(1e-12));
  CHECK(v.at(0, 2) == 0.0);
  CHECK(v.at(1, 1) == 1.0);

  const auto eq = from_dense({{0, 0.3, 0.3}, {0.3, 0, 0.3}, {0.3, 0.3, 0}});
  ReciprocalSet all;
  all.members = {{0, 1, 2}, {0, 1, 2}, {0, 1, 2}};
  const auto ve = v_encode(eq, all);
  // Self weight exp(0) differs from exp(-0.3); only off-self weights tie.
  CHECK(ve.at(0, 1) == doctest::Approx(ve.at(0, 2)));
}

TEST_CASE("v_encode with equal distances to every member including self") {
  const auto zero = from_dense({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  ReciprocalSet all;
  all.members = {{0, 1, 2}, {0, 1, 2}, {0, 1, 2}};
  const auto v = v_encode(zero, all);
  for (std::uint32_t j = 0; j < 3; ++j) CHECK(v.at(0, j) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("jaccard_from_v") {
  const auto v = sparse({{0.5, 0.5, 0}, {0.5, 0, 0.5}, {0, 0, 1}, {0.5, 0.5, 0}});
  const auto d = jaccard_from_v(v);
  CHECK(d(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(d(0, 2) == 1.0);
  CHECK(d(1, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(d(0, 3) == 0.0);
  d.validate();
  auto neg = sparse({{0.5, -0.5}, {1, 0}});
  CHECK_THROWS_AS(jaccard_from_v(neg), UsageError);
}

TEST_CASE("query expansion") {
  const auto d = line({0, 1, 50, 51});
  const std::vector<Modality> m{Modality::vis, Modality::vis, Modality::ir, Modality::ir};
  const auto v = sparse({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  // k2 = 2: the query fills the intra half, its nearest IR row the other.
  const auto b = balanced_lqe(v, d, m, 2);
  CHECK(b.at(0, 0) == 0.5);
  CHECK(b.at(0, 2) == 0.5);
  CHECK(b.at(0, 1) == 0.0);

  const auto same = sparse({{0.25, 0.75, 0, 0}, {0.25, 0.75, 0, 0}, {0.25, 0.75, 0, 0}, {0.25, 0.75, 0, 0}});
  const auto fixed = balanced_lqe(same, d, m, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(fixed.at(i, 0) == doctest::Approx(0.25));
    CHECK(fixed.at(i, 1) == doctest::Approx(0.75));
  }
}

TEST_CASE("pipeline equals the direct definition") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto set = oracle::random_set(100, 8, seed, 0.4);
    const JaccardParams p{10, 4};
    CHECK(max_diff(jaccard_distance(set, {p, JaccardMode::vanilla, 0.0}), oracle::jaccard(set, 10, 4, false)) < 1e-6);
    CHECK(max_diff(jaccard_distance(set, {p, JaccardMode::modality_aware, 0.0}), oracle::jaccard(set, 10, 4, true)) <
          1e-6);
    const auto corpus = small_corpus(seed);
    const JaccardParams q{30, 6};
    CHECK(max_diff(jaccard_distance(corpus, {q, JaccardMode::vanilla, 0.0}), oracle::jaccard(corpus, 30, 6, false)) <
          1e-6);
    CHECK(max_diff(jaccard_distance(corpus, {q, JaccardMode::modality_aware, 0.0}),
                   oracle::jaccard(corpus, 30, 6, true)) < 1e-6);
  }
}

TEST_CASE("distance matrix invariants") {
  const auto set = small_corpus(4);
  for (auto mode : {JaccardMode::vanilla, JaccardMode::modality_aware}) {
    const auto d = jaccard_distance(set, {JaccardParams{}, mode, 0.0});
    d.validate(1e-9);
    CHECK(d.metric() == (mode == JaccardMode::vanilla ? Metric::jaccard_vanilla : Metric::jaccard_modality_aware));
  }
  cosine_distance(set).validate(1e-9);
}

TEST_CASE("modality-aware distance needs both modalities") {
  const auto set = small_corpus(0);
  const auto vis = subset_view(set, rows_of(set, Modality::vis)).set;
  CHECK_THROWS_AS(jaccard_distance(vis, {JaccardParams{}, JaccardMode::modality_aware, 0.0}), DataError);
  CHECK_NOTHROW(jaccard_distance(vis, {JaccardParams{}, JaccardMode::vanilla, 0.0}));
}

TEST_CASE("odd neighborhood sizes are rejected") {
  const auto set = small_corpus(0);
  CHECK_THROWS_AS(jaccard_distance(set, {JaccardParams{29, 6}, JaccardMode::vanilla, 0.0}), UsageError);
  CHECK_THROWS_AS(jaccard_distance(set, {JaccardParams{30, 5}, JaccardMode::modality_aware, 0.0}), UsageError);
}

TEST_CASE("without a gap the two Jaccard variants nearly agree") {
  const auto set = small_corpus(2, 0.0);
  const auto a = jaccard_distance(set, {JaccardParams{}, JaccardMode::vanilla, 0.0});
  const auto b = jaccard_distance(set, {JaccardParams{}, JaccardMode::modality_aware, 0.0});
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) sum += std::abs(a(i, j) - b(i, j));
  CHECK(sum / static_cast<double>(a.size() * a.size()) < 0.02);
}

TEST_CASE("cosine mixing") {
  const auto set = small_corpus(1);
  const auto pure = jaccard_distance(set, {JaccardParams{}, JaccardMode::vanilla, 0.0});
  const auto mixed = jaccard_distance(set, {JaccardParams{}, JaccardMode::vanilla, 0.3});
  const auto cos = cosine_distance(set);
  CHECK(mixed(3, 40) == doctest::Approx(0.7 * pure(3, 40) + 0.15 * cos(3, 40)));
  mixed.validate(1e-9);
}

TEST_CASE("distance file round trip") {
  const auto d = cosine_distance(small_corpus(0));
  const auto p = std::filesystem::temp_directory_path() / "xmodal_unit_dist.bin";
  save_distance(d, p);
  const auto back = load_distance(p);
  REQUIRE(back.size() == d.size());
  CHECK(back.metric() == Metric::cosine);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.size(); ++j) CHECK(back(i, j) == static_cast<double>(static_cast<float>(d(i, j))));
}
