#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "cli.hpp"
#include "xmodal/cluster.hpp"
#include "xmodal/distance.hpp"
#include "xmodal/embed_store.hpp"
#include "xmodal/error.hpp"
#include "xmodal/eval_report.hpp"
#include "xmodal/objectives.hpp"
#include "xmodal/synth_data.hpp"
#include "xmodal/training.hpp"

namespace py = pybind11;
using namespace xmodal;
using nlohmann::json;

namespace {

using Features = Eigen::Ref<const RowMatrixF>;

std::vector<Modality> to_modality(const std::vector<int>& tags) {
  std::vector<Modality> out;
  out.reserve(tags.size());
  for (int t : tags) {
    if (t != 0 && t != 1) throw UsageError("modality tags must be 0 (VIS) or 1 (IR)");
    out.push_back(static_cast<Modality>(t));
  }
  return out;
}

EmbeddingSet make_set(const Features& f, const std::vector<int>& modality,
                      const std::optional<std::vector<std::uint32_t>>& ids = std::nullopt) {
  return l2_normalize(EmbeddingSet(RowMatrixF(f), to_modality(modality), ids));
}

py::array_t<double> to_numpy(const DistanceMatrix& d) {
  py::array_t<double> out({d.size(), d.size()});
  std::copy(d.values().begin(), d.values().end(), out.mutable_data());
  return out;
}

JaccardMode parse_mode(const std::string& mode) {
  if (mode == "vanilla") return JaccardMode::vanilla;
  if (mode == "modality_aware") return JaccardMode::modality_aware;
  throw UsageError("mode must be 'vanilla' or 'modality_aware'");
}

std::vector<int> modality_ints(const EmbeddingSet& set) {
  std::vector<int> out;
  for (auto m : set.modality()) out.push_back(static_cast<int>(m));
  return out;
}

// JSON values cross the boundary as Python objects through their text form.
py::object from_json(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json to_json_value(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_xmodal, m) {
  m.doc() = "Cross-modality association toolkit";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "generate",
      [](const py::dict& config) {
        SynthConfig c = to_json_value(config).get<SynthConfig>();
        const SynthCorpus corpus = generate(c);
        py::dict out;
        out["config"] = from_json(json(corpus.config));
        out["raw"] = corpus.raw.features();
        out["embed"] = corpus.oracle_embed.features();
        out["modality"] = modality_ints(corpus.raw);
        out["ids"] = *corpus.raw.true_id();
        out["train"] = corpus.split.train;
        out["query"] = corpus.split.query;
        out["gallery"] = corpus.split.gallery;
        out["projection"] = corpus.projection;
        out["bias"] = from_json(to_json(bias_report(corpus)));
        return out;
      },
      py::arg("config") = py::dict(), "Generate a synthetic corpus from a dict of generator settings.");

  m.def(
      "cosine_distance",
      [](const Features& f, const std::vector<int>& modality) { return to_numpy(cosine_distance(make_set(f, modality))); },
      py::arg("features"), py::arg("modality"));

  m.def(
      "jaccard_distance",
      [](const Features& f, const std::vector<int>& modality, int k1, int k2, const std::string& mode,
         double cosine_mix) {
        return to_numpy(jaccard_distance(make_set(f, modality), {JaccardParams{k1, k2}, parse_mode(mode), cosine_mix}));
      },
      py::arg("features"), py::arg("modality"), py::arg("k1") = 30, py::arg("k2") = 6,
      py::arg("mode") = "modality_aware", py::arg("cosine_mix") = 0.0);

  m.def(
      "knn_composition",
      [](const Features& f, const std::vector<int>& modality, int k, bool balanced) {
        const auto set = make_set(f, modality);
        const auto d = cosine_distance(set);
        return knn_composition(balanced ? knn_modality_balanced(d, set.modality(), k) : knn(d, k), set.modality()).mean;
      },
      py::arg("features"), py::arg("modality"), py::arg("k") = 30, py::arg("balanced") = false);

  m.def(
      "dbscan",
      [](const Eigen::Ref<const RowMatrixD>& d, double eps, int min_samples) {
        if (d.rows() != d.cols()) throw UsageError("distance matrix must be square");
        const auto n = static_cast<std::size_t>(d.rows());
        DistanceMatrix dm(n, std::vector<double>(d.data(), d.data() + n * n), Metric::cosine);
        return dbscan(dm, {eps, min_samples, 1.0, 0}).labels;
      },
      py::arg("distance"), py::arg("eps") = 0.6, py::arg("min_samples") = 4);

  m.def(
      "cluster_global",
      [](const Features& f, const std::vector<int>& modality, const std::string& mode, double eps, int min_samples,
         int k1, int k2) {
        return cluster_global(make_set(f, modality), {eps, min_samples, 1.0, 0}, parse_mode(mode), {k1, k2}).labels;
      },
      py::arg("features"), py::arg("modality"), py::arg("mode") = "modality_aware", py::arg("eps") = 0.6,
      py::arg("min_samples") = 4, py::arg("k1") = 30, py::arg("k2") = 6);

  m.def(
      "ari", [](const std::vector<int>& pred, const std::vector<std::uint32_t>& truth) { return ari(pred, truth); },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "cmc_map",
      [](const Features& query, const std::vector<std::uint32_t>& query_ids, const Features& gallery,
         const std::vector<std::uint32_t>& gallery_ids, int max_rank) {
        const auto q = make_set(query, std::vector<int>(static_cast<std::size_t>(query.rows()), 1), query_ids);
        const auto g = make_set(gallery, std::vector<int>(static_cast<std::size_t>(gallery.rows()), 0), gallery_ids);
        return from_json(to_json(cmc_map(q, g, max_rank)));
      },
      py::arg("query"), py::arg("query_ids"), py::arg("gallery"), py::arg("gallery_ids"), py::arg("max_rank") = 20);

  m.def(
      "train",
      [](const py::dict& synth, const py::dict& config) {
        const SynthCorpus corpus = generate(to_json_value(synth).get<SynthConfig>());
        const TrainConfig tc = to_json_value(config).get<TrainConfig>();
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(corpus, tc);
        }
        py::dict out(from_json(to_json(r)));
        out["weight"] = r.encoder.weight;
        return out;
      },
      py::arg("synth") = py::dict(), py::arg("config") = py::dict(),
      "Two-stage training on a generated corpus; returns metrics, history and the final weight.");

  m.def(
      "intra_infonce",
      [](const RowMatrixD& features, const std::vector<std::size_t>& labels, const RowMatrixD& prototypes, double tau) {
        PrototypeBank bank;
        bank.vectors = prototypes;
        for (Eigen::Index i = 0; i < prototypes.rows(); ++i) {
          bank.modality_tag.push_back(ProtoTag::none);
          bank.owner_cluster.push_back(static_cast<int>(i));
          bank.positives.push_back({static_cast<std::size_t>(i)});
        }
        const auto out = intra_infonce(features, labels, bank, tau);
        return py::make_tuple(out.value, out.grad);
      },
      py::arg("features"), py::arg("labels"), py::arg("prototypes"), py::arg("tau") = 0.05);

  m.def(
      "main",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "xmodal");
        py::gil_scoped_release release;
        return cli::dispatch(args);
      },
      py::arg("args"), "Run the command-line tool with the given arguments; returns the exit code.");
}
