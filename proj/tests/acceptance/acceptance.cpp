// Acceptance run: one PASS/FAIL line per criterion.
//
// Exit status is nonzero when a criterion fails that is not listed in
// kKnownFailures. Known failures still print FAIL; the analysis lives in the
// project notes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "experiments.hpp"
#include "oracles.hpp"
#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/embed_store.hpp"
#include "xmodal/eval_report.hpp"
#include "xmodal/log.hpp"
#include "xmodal/objectives.hpp"
#include "xmodal/parallel.hpp"
#include "xmodal/synth_data.hpp"
#include "xmodal/training.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

// Subset clustering accuracy is not flat over ratios 0.3 to 0.7 on the
// generator; see the notes for the measured sweep.
const std::set<int> kKnownFailures{6};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

SynthConfig default_config(std::uint64_t seed) {
  SynthConfig c;
  c.seed = seed;
  return c;
}

// ------------------------------------------------------------------ 1

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthConfig c;
    c.num_ids = 8;
    c.imgs_per_id_vis = 15;
    c.imgs_per_id_ir = 10;
    c.num_test_ids = 0;
    c.seed = seed;
    const auto set = generate(c).train_embed();
    for (const bool balanced : {false, true}) {
      const auto got = jaccard_distance(
          set, {JaccardParams{}, balanced ? JaccardMode::modality_aware : JaccardMode::vanilla, 0.0});
      const auto want = oracle::jaccard(set, 30, 6, balanced);
      for (std::size_t i = 0; i < set.size(); ++i)
        for (std::size_t j = 0; j < set.size(); ++j) worst = std::max(worst, std::abs(got(i, j) - want[i][j]));
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 10.0, "N=200, 10 seeds, both modes: max |diff| " + sci(worst) + ", " +
                                          num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 2

RowMatrixD unit_rows(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrixD m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) m(i, k) = normal(rng);
    m.row(i).normalize();
  }
  return m;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double intra_err = 0.0;
  double global_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    PrototypeBank single;
    single.vectors = unit_rows(5, 16, rng);
    for (int i = 0; i < 5; ++i) {
      single.modality_tag.push_back(ProtoTag::none);
      single.owner_cluster.push_back(i);
      single.positives.push_back({static_cast<std::size_t>(i)});
    }
    const auto f = unit_rows(8, 16, rng);
    std::vector<std::size_t> y(8);
    std::uniform_int_distribution<int> pick5(0, 4);
    for (auto& v : y) v = static_cast<std::size_t>(pick5(rng));
    const auto a = intra_infonce(f, y, single, 0.05);
    const auto na = oracle::finite_difference([&](const RowMatrixD& x) { return intra_infonce(x, y, single, 0.05).value; },
                                              f, 1e-4);
    intra_err = std::max(intra_err, oracle::max_relative_error(a.grad, na));

    PrototypeBank paired;
    paired.vectors = unit_rows(8, 16, rng);
    for (int z = 0; z < 4; ++z) {
      paired.modality_tag.insert(paired.modality_tag.end(), {ProtoTag::vis, ProtoTag::ir});
      paired.owner_cluster.insert(paired.owner_cluster.end(), {z, z});
      paired.positives.push_back({static_cast<std::size_t>(2 * z), static_cast<std::size_t>(2 * z + 1)});
    }
    std::vector<int> zl(8);
    std::uniform_int_distribution<int> pick4(0, 3);
    for (auto& v : zl) v = pick4(rng);
    const auto g = multi_positive_global(f, zl, paired, 0.05, 3);
    const auto ng = oracle::finite_difference(
        [&](const RowMatrixD& x) { return multi_positive_global(x, zl, paired, 0.05, 3).value; }, f, 1e-4);
    global_err = std::max(global_err, oracle::max_relative_error(g.grad, ng));
  }
  const double t = seconds_since(t0);
  return {intra_err < 1e-4 && global_err < 1e-4 && t < 5.0,
          "max relative error intra " + sci(intra_err) + ", global " + sci(global_err) + ", " +
              num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 3

Outcome composition_guarantee() {
  const auto t0 = Clock::now();
  const auto r = experiments::composition(default_config(0), JaccardParams{});
  // Exactly one half for any even k on an arbitrary set as well.
  bool exact = r.balanced_inter == 0.5;
  const auto rs = oracle::random_set(120, 8, 1, 0.3);
  const auto d = cosine_distance(rs);
  for (int k : {2, 4, 10, 30}) exact = exact && knn_composition(knn_modality_balanced(d, rs.modality(), k), rs.modality()).mean == 0.5;
  const double t = seconds_since(t0);
  return {exact && r.cosine_inter < 0.3 && t < 10.0,
          "balanced fraction exactly 0.5: " + std::string(exact ? "yes" : "no") + "; cosine top-30 inter fraction " +
              num(r.cosine_inter) + ", " + num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 4

Outcome distance_gap() {
  const auto t0 = Clock::now();
  double cos = 0.0, van = 0.0, ma = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    for (const auto& row : experiments::distance_gaps(default_config(s), JaccardParams{}, uniform_edges(0.0, 2.0, 40))) {
      const double g = row.gap / 5.0;
      if (row.metric == Metric::cosine) cos += g;
      if (row.metric == Metric::jaccard_vanilla) van += g;
      if (row.metric == Metric::jaccard_modality_aware) ma += g;
    }
  }
  const double t = seconds_since(t0);
  return {ma < van && van < cos && t < 60.0, "mean gap cosine " + num(cos) + ", jaccard " + num(van) +
                                                  ", ma-jaccard " + num(ma) + " (5 seeds), " + num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 5

Outcome clustering_gain() {
  const auto t0 = Clock::now();
  double van = 0.0, ma = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    van += experiments::global_ari(default_config(s), ClusterConfig{}, JaccardMode::vanilla, JaccardParams{}).ari / 5.0;
    ma += experiments::global_ari(default_config(s), ClusterConfig{}, JaccardMode::modality_aware, JaccardParams{}).ari /
          5.0;
  }
  const double t = seconds_since(t0);
  return {ma - van >= 0.05 && t < 120.0, "mean ARI ma-jaccard " + num(ma) + " vs jaccard " + num(van) + " (+" +
                                              num(ma - van) + "), " + num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 6

Outcome subset_clustering() {
  const auto t0 = Clock::now();
  const std::vector<double> ratios{0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> mean_ari(ratios.size(), 0.0);
  bool closer = true;
  std::string counts;
  for (std::uint64_t s = 0; s < 3; ++s) {
    ClusterConfig cc;
    cc.seed = s;
    const auto synth = experiments::subset_corpus_config(s);
    const auto full = experiments::subset_clustering(synth, cc, 1.0, JaccardParams{});
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      const auto row = experiments::subset_clustering(synth, cc, ratios[r], JaccardParams{});
      mean_ari[r] += row.ari / 3.0;
      if (ratios[r] == 0.5) {
        closer = closer && std::abs(row.clusters - row.true_ids) < std::abs(full.clusters - full.true_ids);
        counts += (counts.empty() ? "" : " ") + std::to_string(row.clusters) + "/" + std::to_string(full.clusters);
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(mean_ari.begin(), mean_ari.end());
  const double spread = *hi - *lo;
  std::string aris;
  for (std::size_t r = 0; r < ratios.size(); ++r) aris += (r ? " " : "") + num(ratios[r], 1) + ":" + num(mean_ari[r], 3);
  const double t = seconds_since(t0);
  return {closer && spread <= 0.05 && t < 60.0,
          "clusters at 0.5 vs full (30 true): " + counts + " -> " + (closer ? "closer" : "not closer") +
              "; mean ARI by ratio " + aris + ", spread " + num(spread, 3) + " (limit 0.05), " + num(t, 1) + " s"};
}

// ------------------------------------------------------------------ 7

Outcome training_direction() {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto corpus = generate(default_config(s));
    TrainConfig cfg;
    cfg.seed = s;
    const auto s1 = train_stage1(corpus, cfg);
    const auto full = train_stage2(corpus, cfg, s1);
    TrainConfig vanilla = cfg;
    vanilla.modality_aware_global = false;
    const auto m5 = train_stage2(corpus, vanilla, s1);
    TrainConfig unified = cfg;
    unified.split_global_memory = false;
    const auto m4 = train_stage2(corpus, unified, s1);
    const double r1 = s1.stage1_retrieval.rank1();
    const double rf = full.final_retrieval.rank1();
    const double r5 = m5.final_retrieval.rank1();
    const double r4 = m4.final_retrieval.rank1();
    pass = pass && rf - r1 >= 0.10 && r5 < rf && r4 < rf;
    detail += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + " stage1 " + num(r1, 3) + " full " +
              num(rf, 3) + " vanilla-global " + num(r5, 3) + " no-split " + num(r4, 3);
  }
  const double t = seconds_since(t0);
  return {pass && t < 1200.0, "Rank-1 " + detail + ", " + num(t, 0) + " s"};
}

// ------------------------------------------------------------------ 8

double time_jaccard(const EmbeddingSet& set, JaccardMode mode) {
  double best = 1e300;
  for (int rep = 0; rep < 2; ++rep) {
    const auto t0 = Clock::now();
    const auto d = jaccard_distance(set, {JaccardParams{}, mode, 0.0});
    best = std::min(best, seconds_since(t0));
    if (d.size() != set.size()) std::abort();
  }
  return best;
}

Outcome performance() {
  const auto t0 = Clock::now();
  const auto set_for = [](int ids) {
    SynthConfig c;
    c.num_ids = ids;
    c.imgs_per_id_vis = 20;
    c.imgs_per_id_ir = 20;
    c.num_test_ids = 0;
    return generate(c).train_embed();
  };
  const auto small = set_for(50);
  const auto large = set_for(100);
  const double v2 = time_jaccard(small, JaccardMode::vanilla);
  const double m2 = time_jaccard(small, JaccardMode::modality_aware);
  const double v4 = time_jaccard(large, JaccardMode::vanilla);
  const double m4 = time_jaccard(large, JaccardMode::modality_aware);
  const double ratio2 = m2 / v2, ratio4 = m4 / v4, growth = m4 / m2;
  const double t = seconds_since(t0);
  return {ratio2 <= 2.0 && ratio4 <= 2.0 && growth <= 4.4 && t < 300.0,
          "ma/vanilla " + num(ratio2, 2) + " (N=2000), " + num(ratio4, 2) + " (N=4000); N doubling x" +
              num(growth, 2) + "; ma " + num(m2, 2) + " s / " + num(m4, 2) + " s, " + num(t, 0) + " s total"};
}

// ------------------------------------------------------------------ 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::string(",\n:{}[]\" ").find(ch) != std::string::npos) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

bool close_text(const std::string& a, const std::string& b) {
  const auto ta = tokens(a), tb = tokens(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i] == tb[i]) continue;
    char* ea = nullptr;
    char* eb = nullptr;
    const double x = std::strtod(ta[i].c_str(), &ea);
    const double y = std::strtod(tb[i].c_str(), &eb);
    if (*ea != '\0' || *eb != '\0' || std::abs(x - y) > 1e-6) return false;
  }
  return true;
}

bool close_file(const fs::path& a, const fs::path& b) {
  const auto ext = a.extension().string();
  if (ext == ".xma") {
    const auto x = load(a, FileFormat::binary), y = load(b, FileFormat::binary);
    return x.modality() == y.modality() && x.size() == y.size() && x.dim() == y.dim() &&
           (x.features() - y.features()).cwiseAbs().maxCoeff() <= 1e-6f;
  }
  if (ext == ".bin") {
    const auto x = load_distance(a), y = load_distance(b);
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.values().size(); ++i)
      if (std::abs(x.values()[i] - y.values()[i]) > 1e-6) return false;
    return true;
  }
  return close_text(slurp(a), slurp(b));
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

// Runs the whole workflow in `dir` with the given thread count.
bool workflow(const fs::path& dir, int threads) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const char* name) { return (dir / name).string(); };
  const std::string th = std::to_string(threads);
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--ids", "20", "--test-ids", "10", "--out", p("c.xma")},
      {"distance", "--input", p("c.embed.xma"), "--metric", "ma-jaccard", "--out", p("d.bin")},
      {"cluster", "--input", p("c.embed.xma"), "--out", p("labels.csv")},
      {"train", "--corpus", p("c.xma"), "--epochs1", "2", "--epochs2", "2", "--out-dir", p("train")},
      {"gradcheck", "--instances", "3", "--out", p("gradcheck.json")},
      {"eval", "--corpus", p("c.xma"), "--encoder", p("train/final.xma"), "--out-dir", p("eval")},
      {"report", "--corpus", p("c.xma"), "--out-dir", p("report")},
      {"repro", "--experiment", "composition", "--seeds", "1", "--out-dir", p("repro")},
  };
  for (auto args : steps) {
    args.insert(args.begin(), {"xmodal", "--seed", "7", "--threads", th, "-q"});
    if (cli::dispatch(args) != 0) return false;
  }
  return true;
}

Outcome determinism() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "xmodal_acceptance_det";
  if (!workflow(root / "a", 1) || !workflow(root / "b", 1) || !workflow(root / "c", 4)) {
    return {false, "a CLI step failed"};
  }
  const auto fa = files_under(root / "a");
  std::size_t identical = 0, close = 0;
  bool pass = fa == files_under(root / "b") && fa == files_under(root / "c");
  for (const auto& f : fa) {
    if (slurp(root / "a" / f) == slurp(root / "b" / f)) ++identical;
    if (close_file(root / "a" / f, root / "c" / f)) ++close;
  }
  pass = pass && identical == fa.size() && close == fa.size();
  set_num_threads(0);
  const double t = seconds_since(t0);
  return {pass, std::to_string(identical) + "/" + std::to_string(fa.size()) +
                    " files byte-identical at 1 thread, " + std::to_string(close) + "/" + std::to_string(fa.size()) +
                    " within 1e-6 at 4 threads, 8 subcommands, " + num(t, 0) + " s"};
}

}  // namespace

int main() {
  log::set_level(log::Level::error);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"gradient correctness", gradient_correctness},
      {"composition guarantee", composition_guarantee},
      {"distance-gap mitigation", distance_gap},
      {"clustering gain", clustering_gain},
      {"subset clustering", subset_clustering},
      {"end-to-end training direction", training_direction},
      {"performance envelope", performance},
      {"determinism", determinism},
  };
  int unexpected = 0;
  int passed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    passed += o.pass ? 1 : 0;
    const bool known = kKnownFailures.count(id) > 0;
    if (!o.pass && !known) ++unexpected;
    std::printf("criterion %d %s: %s | %s%s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), !o.pass && known ? " | known failure" : "");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", passed, criteria.size());
  return unexpected == 0 ? 0 : 1;
}
