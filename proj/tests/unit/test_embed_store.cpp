#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "xmodal/embed_store.hpp"
#include "xmodal/error.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "xmodal_unit_embed";
  fs::create_directories(dir);
  return dir / name;
}

EmbeddingSet four_rows() {
  RowMatrixF f(4, 8);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 8; ++k) f(i, k) = static_cast<float>(i + 1) * 0.25f + static_cast<float>(k) * 0.01f;
  return EmbeddingSet(f, {Modality::vis, Modality::vis, Modality::ir, Modality::ir},
                      std::vector<std::uint32_t>{0, 1, 0, 1}, std::vector<std::uint32_t>{1, 1, 2, 2});
}

}  // namespace

TEST_CASE("binary round trip keeps every field") {
  const auto set = four_rows();
  const auto p = temp_path("four.xma");
  save(set, p, FileFormat::binary);
  const auto back = load(p, FileFormat::binary);
  CHECK(back.size() == 4);
  CHECK(back.dim() == 8);
  CHECK(back == set);
}

TEST_CASE("csv round trip and absent identity column") {
  RowMatrixF f(3, 2);
  f << 1, 0, 0, 1, 0.5f, 0.5f;
  const EmbeddingSet set(f, {Modality::vis, Modality::ir, Modality::ir});
  const auto p = temp_path("no_id.csv");
  save(set, p, FileFormat::csv);
  const auto back = load(p, FileFormat::csv);
  CHECK_FALSE(back.true_id().has_value());
  CHECK(back == set);
}

TEST_CASE("csv row-length mismatch is rejected") {
  const auto p = temp_path("short.csv");
  {
    std::ofstream out(p);
    out << "f0,f1,f2,f3,f4,f5,f6,f7,modality\n";
    out << "1,2,3,4,5,6,7,VIS\n";
  }
  CHECK_THROWS_AS(load(p, FileFormat::csv), DataError);
}

TEST_CASE("NaN feature is rejected") {
  const auto p = temp_path("nan.csv");
  {
    std::ofstream out(p);
    out << "f0,f1,modality\n1,nan,IR\n";
  }
  CHECK_THROWS_AS(load(p, FileFormat::csv), DataError);
  RowMatrixF f(1, 2);
  f << 1.0f, std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(EmbeddingSet(f, {Modality::vis}), DataError);
}

TEST_CASE("empty set and unknown modality tag are rejected") {
  CHECK_THROWS_AS(EmbeddingSet(RowMatrixF(0, 4), {}), DataError);
  CHECK_THROWS_AS(modality_from_string("UV"), DataError);
  const auto p = temp_path("tag.csv");
  {
    std::ofstream out(p);
    out << "f0,f1,modality\n1,0,THERMAL\n";
  }
  CHECK_THROWS_AS(load(p, FileFormat::csv), DataError);
}

TEST_CASE("l2_normalize") {
  RowMatrixF f(2, 2);
  f << 3, 4, 0, 1;
  const auto n = l2_normalize(EmbeddingSet(f, {Modality::vis, Modality::ir}));
  CHECK(n.features()(0, 0) == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(n.features()(0, 1) == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(n.normalized());
  const auto again = l2_normalize(n);
  CHECK((again.features() - n.features()).cwiseAbs().maxCoeff() <= 1e-7f);

  RowMatrixF z(2, 2);
  z << 1, 0, 0, 0;
  try {
    (void)l2_normalize(EmbeddingSet(z, {Modality::vis, Modality::ir}));
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("subset_view") {
  RowMatrixF f(3, 2);
  f << 1, 0, 0, 1, 1, 1;
  const EmbeddingSet set(f, {Modality::vis, Modality::ir, Modality::vis});
  const std::vector<std::size_t> idx{2, 0};
  const auto view = subset_view(set, idx);
  CHECK(view.set.size() == 2);
  CHECK(view.parent_index == idx);
  CHECK(view.set.features().row(0) == set.features().row(2));
  CHECK(view.set.modality(0) == Modality::vis);

  const std::vector<std::size_t> all{0, 1, 2};
  CHECK(subset_view(set, all).set == set);
  const std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(subset_view(set, bad), UsageError);
}

TEST_CASE("round trip over random sets") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto set = oracle::random_set(37, 6, seed, 0.3, 5);
    for (const auto* ext : {".xma", ".csv"}) {
      const auto p = temp_path("rand" + std::to_string(seed) + ext);
      save(set, p, format_from_path(p));
      const auto back = load(p, format_from_path(p));
      CHECK(back.modality() == set.modality());
      CHECK(back.true_id() == set.true_id());
      CHECK((back.features() - set.features()).cwiseAbs().maxCoeff() == 0.0f);
    }
  }
}
