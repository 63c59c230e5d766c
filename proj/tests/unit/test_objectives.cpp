#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xmodal/error.hpp"
#include "xmodal/objectives.hpp"

using namespace xmodal;

namespace {

RowMatrixD unit_rows(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrixD m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) m(i, k) = normal(rng);
    m.row(i).normalize();
  }
  return m;
}

PrototypeBank paired_bank(Eigen::Index clusters, Eigen::Index d, std::mt19937_64& rng) {
  PrototypeBank b;
  b.vectors = unit_rows(2 * clusters, d, rng);
  for (Eigen::Index z = 0; z < clusters; ++z) {
    b.modality_tag.push_back(ProtoTag::vis);
    b.modality_tag.push_back(ProtoTag::ir);
    b.owner_cluster.push_back(static_cast<int>(z));
    b.owner_cluster.push_back(static_cast<int>(z));
    b.positives.push_back({static_cast<std::size_t>(2 * z), static_cast<std::size_t>(2 * z + 1)});
  }
  return b;
}

PrototypeBank single_bank(const RowMatrixD& v) {
  PrototypeBank b;
  b.vectors = v;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    b.modality_tag.push_back(ProtoTag::none);
    b.owner_cluster.push_back(static_cast<int>(i));
    b.positives.push_back({static_cast<std::size_t>(i)});
  }
  return b;
}

// -mean positive logit + log-sum-exp over every prototype.
double full_denominator_loss(const RowMatrixD& f, std::span<const int> z, const PrototypeBank& b, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    double lse = 0.0;
    for (Eigen::Index j = 0; j < b.vectors.rows(); ++j) lse += std::exp(f.row(i).dot(b.vectors.row(j)) / tau);
    double pos = 0.0;
    const auto& p = b.positives[static_cast<std::size_t>(z[static_cast<std::size_t>(i)])];
    for (auto j : p) pos += f.row(i).dot(b.vectors.row(static_cast<Eigen::Index>(j))) / tau;
    total += std::log(lse) - pos / static_cast<double>(p.size());
  }
  return 0.5 * total;
}

}  // namespace

TEST_CASE("single prototype gives zero loss and gradient") {
  std::mt19937_64 rng(0);
  const auto bank = single_bank(unit_rows(1, 6, rng));
  const auto f = unit_rows(4, 6, rng);
  const std::vector<std::size_t> labels(4, 0);
  const auto out = intra_infonce(f, labels, bank, 0.05);
  CHECK(out.value == 0.0);
  CHECK(out.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("feature on its prototype with a distant negative") {
  RowMatrixD v(2, 2);
  v << 1, 0, -1, 0;
  const auto bank = single_bank(v);
  RowMatrixD f(1, 2);
  f << 1, 0;
  const std::vector<std::size_t> labels{0};
  CHECK(intra_infonce(f, labels, bank, 0.05).value < 1e-6);
}

TEST_CASE("intra loss gradient matches finite differences") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto bank = single_bank(unit_rows(5, 12, rng));
    const auto f = unit_rows(8, 12, rng);
    std::vector<std::size_t> labels(8);
    for (std::size_t i = 0; i < 8; ++i) labels[i] = (i * 3 + static_cast<std::size_t>(t)) % 5;
    const auto out = intra_infonce(f, labels, bank, 0.05);
    const auto num = oracle::finite_difference(
        [&](const RowMatrixD& x) { return intra_infonce(x, labels, bank, 0.05).value; }, f, 1e-4);
    CHECK(oracle::max_relative_error(out.grad, num) < 1e-4);
  }
}

TEST_CASE("global loss gradient matches finite differences") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto bank = paired_bank(4, 12, rng);
    const auto f = unit_rows(8, 12, rng);
    std::vector<int> z(8);
    for (std::size_t i = 0; i < 8; ++i) z[i] = static_cast<int>((i + static_cast<std::size_t>(t)) % 4);
    const auto out = multi_positive_global(f, z, bank, 0.05, 3);
    const auto num = oracle::finite_difference(
        [&](const RowMatrixD& x) { return multi_positive_global(x, z, bank, 0.05, 3).value; }, f, 1e-4);
    CHECK(oracle::max_relative_error(out.grad, num) < 1e-4);
  }
}

TEST_CASE("global loss with single positives reduces to the intra loss") {
  std::mt19937_64 rng(3);
  const auto bank = single_bank(unit_rows(5, 8, rng));
  const auto f = unit_rows(6, 8, rng);
  const std::vector<int> z{0, 1, 2, 3, 4, 0};
  const std::vector<std::size_t> y{0, 1, 2, 3, 4, 0};
  const auto g = multi_positive_global(f, z, bank, 0.1, 4);
  const auto l = intra_infonce(f, y, bank, 0.1);
  CHECK(g.value == doctest::Approx(0.5 * l.value).epsilon(1e-12));
  CHECK((g.grad - 0.5 * l.grad).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("exhaustive negatives equal the full denominator") {
  std::mt19937_64 rng(4);
  const auto bank = paired_bank(5, 10, rng);
  const auto f = unit_rows(7, 10, rng);
  const std::vector<int> z{0, 1, 2, 3, 4, 0, 2};
  const double got = multi_positive_global(f, z, bank, 0.05, 8).value;
  CHECK(std::abs(got - full_denominator_loss(f, z, bank, 0.05)) < 1e-9);
}

TEST_CASE("equidistant positives contribute symmetrically") {
  PrototypeBank b;
  b.vectors = RowMatrixD(3, 3);
  b.vectors << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  b.modality_tag = {ProtoTag::vis, ProtoTag::ir, ProtoTag::vis};
  b.owner_cluster = {0, 0, 1};
  b.positives = {{0, 1}, {2}};
  RowMatrixD f(1, 3);
  f << 1, 1, 0.3;
  f.row(0).normalize();
  const std::vector<int> z{0};
  const auto out = multi_positive_global(f, z, b, 0.05, 1);
  CHECK(std::abs(out.grad(0, 0) - out.grad(0, 1)) < 1e-12);

  PrototypeBank swapped = b;
  swapped.vectors.row(0).swap(swapped.vectors.row(1));
  CHECK(multi_positive_global(f, z, swapped, 0.05, 1).value == doctest::Approx(out.value).epsilon(1e-14));
}

TEST_CASE("gradient through normalization") {
  RowMatrixD x(1, 3);
  x << 2, 0, 0;
  RowMatrixD parallel(1, 3);
  parallel << 5, 0, 0;
  CHECK(grad_through_normalization(parallel, x).cwiseAbs().maxCoeff() < 1e-15);
  RowMatrixD unit(1, 3);
  unit << 1, 0, 0;
  RowMatrixD ortho(1, 3);
  ortho << 0, 0.3, -0.7;
  CHECK((grad_through_normalization(ortho, unit) - ortho).cwiseAbs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    RowMatrixD p(4, 6), g(4, 6);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p.data()[i] = 2.0 * normal(rng);
      g.data()[i] = normal(rng);
    }
    const auto num = oracle::finite_difference(
        [&](const RowMatrixD& z) {
          double s = 0.0;
          for (Eigen::Index i = 0; i < z.rows(); ++i) s += g.row(i).dot(z.row(i) / z.row(i).norm());
          return s;
        },
        p, 1e-5);
    CHECK(oracle::max_relative_error(grad_through_normalization(g, p), num) < 1e-4);
  }
}

TEST_CASE("argument validation") {
  std::mt19937_64 rng(6);
  const auto bank = paired_bank(2, 4, rng);
  const auto f = unit_rows(2, 4, rng);
  const std::vector<int> z{0, 1};
  CHECK_THROWS_AS(multi_positive_global(f, z, bank, 0.05, 3), UsageError);
  CHECK_THROWS_AS(multi_positive_global(f, z, bank, 0.0, 1), UsageError);
  const std::vector<std::size_t> y{0, 9};
  CHECK_THROWS_AS(intra_infonce(f, y, bank, 0.05), UsageError);
}
