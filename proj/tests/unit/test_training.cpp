#include <doctest.h>

#include <filesystem>
#include <map>
#include <random>

#include "xmodal/error.hpp"
#include "xmodal/parallel.hpp"
#include "xmodal/training.hpp"

using namespace xmodal;

namespace {

SynthCorpus small_corpus(std::uint64_t seed = 0) {
  SynthConfig c;
  c.num_ids = 20;
  c.num_test_ids = 20;
  c.seed = seed;
  return generate(c);
}

TrainConfig short_run(int e1, int e2) {
  TrainConfig t;
  t.epochs_stage1 = e1;
  t.epochs_stage2 = e2;
  t.batch_instances = 8;
  return t;
}

}  // namespace

TEST_CASE("pk sampling") {
  std::mt19937_64 rng(0);
  const auto a = ClusterAssignment::from_labels({0, 0, 0, 0, 0, 1, 1, 1, 1, 1, -1});
  const auto batch = pk_sample(a, 2, 3, rng);
  CHECK(batch.size() == 6);
  std::map<int, int> per;
  for (auto i : batch) per[a.labels[i]]++;
  CHECK(per[0] == 3);
  CHECK(per[1] == 3);

  const auto single = ClusterAssignment::from_labels({-1, 0, -1});
  const auto rep = pk_sample(single, 1, 16, rng);
  CHECK(rep == std::vector<std::size_t>(16, 1));
  CHECK_THROWS_AS(pk_sample(a, 3, 2, rng), DataError);
}

TEST_CASE("zero learning rate leaves the encoder unchanged") {
  const auto corpus = small_corpus();
  auto cfg = short_run(2, 1);
  cfg.lr = 0.0;
  const auto r = train(corpus, cfg);
  CHECK(r.encoder.weight == initial_encoder(corpus).weight);
}

TEST_CASE("identical inputs collapse to one cluster per modality with zero loss") {
  SynthConfig c;
  c.num_ids = 1;
  c.imgs_per_id_vis = 80;
  c.imgs_per_id_ir = 40;
  c.intra_noise = 0.0;
  c.num_test_ids = 2;
  const auto corpus = generate(c);
  auto cfg = short_run(1, 0);
  cfg.batch_ids = 1;
  const auto r = train_stage1(corpus, cfg);
  REQUIRE(r.history.size() == 1);
  CHECK(r.history[0].clusters_vis == 1);
  CHECK(r.history[0].clusters_ir == 1);
  CHECK(r.history[0].loss == 0.0);
}

TEST_CASE("training is deterministic and thread-count independent") {
  const auto corpus = small_corpus(3);
  const auto cfg = short_run(2, 2);
  set_num_threads(1);
  const auto a = train(corpus, cfg);
  const auto b = train(corpus, cfg);
  set_num_threads(4);
  const auto c = train(corpus, cfg);
  set_num_threads(0);
  CHECK(a.encoder.weight == b.encoder.weight);
  CHECK((a.encoder.weight - c.encoder.weight).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(a.final_retrieval.rank1() == b.final_retrieval.rank1());
}

TEST_CASE("reusing a stage-1 result matches a full run") {
  const auto corpus = small_corpus(4);
  const auto cfg = short_run(2, 2);
  const auto full = train(corpus, cfg);
  const auto s1 = train_stage1(corpus, cfg);
  const auto s2 = train_stage2(corpus, cfg, s1);
  CHECK(full.encoder.weight == s2.encoder.weight);
  CHECK(full.history.size() == 4);
  CHECK(full.history[2].stage == 2);
  CHECK(full.history[2].clusters_global > 0);
}

TEST_CASE("encoder output rows are unit norm and checkpoints round trip") {
  const auto corpus = small_corpus();
  const auto enc = initial_encoder(corpus);
  const auto out = enc.encode(corpus.train_raw());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double n = 0.0;
    for (float v : out.row(i)) n += double(v) * double(v);
    CHECK(std::abs(n - 1.0) < 1e-5);
  }
  const auto p = std::filesystem::temp_directory_path() / "xmodal_unit_encoder.xma";
  enc.save(p);
  const auto back = ToyEncoder::load(p);
  CHECK((back.weight - enc.weight).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("config validation and json") {
  TrainConfig t;
  t.tau = 0.0;
  CHECK_THROWS_AS(t.validate(), UsageError);
  t = TrainConfig{};
  t.batch_ids = 100;
  CHECK_THROWS(train_stage1(small_corpus(), t));
  TrainConfig u;
  u.lr = 0.25;
  u.split_global_memory = false;
  const nlohmann::json j = u;
  const auto back = j.get<TrainConfig>();
  CHECK(back.lr == 0.25);
  CHECK_FALSE(back.split_global_memory);
}
