// Python bindings: the pipeline commands plus a few numeric building blocks.

#include "cityloc/pipeline.hpp"
#include "cityloc/rng.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace cityloc;

namespace {

using Matrix = py::array_t<double, py::array::c_style | py::array::forcecast>;

ng::Array to_array(const Matrix& m) {
  if (m.ndim() != 2) throw py::value_error("expected a 2-D array");
  ng::Array a({static_cast<std::size_t>(m.shape(0)), static_cast<std::size_t>(m.shape(1))});
  std::copy(m.data(), m.data() + m.size(), a.values().begin());
  return a;
}

Matrix to_numpy(const ng::Array& a) {
  Matrix out({a.rows(), a.cols()});
  std::copy(a.values().begin(), a.values().end(), out.mutable_data());
  return out;
}

// Python dicts come in with str, int, float or bool values.
cli::RunConfig make_config(const std::optional<py::dict>& overrides) {
  cli::RunConfig c;
  if (!overrides) return c;
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : *overrides) kv[py::str(k)] = py::str(v);
  c.apply(kv);
  return c;
}

lang::Level level_of(const std::string& name) {
  const auto l = lang::level_from_name(name);
  if (!l) throw py::value_error("unknown level '" + name + "'");
  return *l;
}

std::vector<lang::Level> levels_of(const std::optional<std::vector<std::string>>& names,
                                   std::vector<lang::Level> fallback) {
  if (!names) return fallback;
  std::vector<lang::Level> out;
  for (const auto& n : *names) out.push_back(level_of(n));
  return out;
}

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

coarse::RetrievalIndex make_index(const Matrix& descriptors, const std::vector<int>& ids) {
  coarse::RetrievalIndex idx;
  idx.descriptors = to_array(descriptors);
  idx.ids = ids;
  if (idx.ids.size() != idx.descriptors.rows()) throw py::value_error("one id per descriptor row");
  return idx;
}

}  // namespace

PYBIND11_MODULE(_cityloc, m) {
  m.doc() = "cityloc core";
  py::register_exception<cli::PipelineError>(m, "PipelineError", PyExc_RuntimeError);
  py::register_exception<io::IoError>(m, "IoError", PyExc_OSError);

  m.def("version", &cli::version);
  m.def("default_config", [] { return to_python(cli::RunConfig{}.to_json()); });
  m.def(
      "resolve_config", [](const std::optional<py::dict>& overrides) { return to_python(make_config(overrides).to_json()); },
      py::arg("overrides") = py::none());

  m.def(
      "gen",
      [](const std::filesystem::path& out, std::uint64_t seed, const std::optional<std::vector<std::string>>& levels,
         const std::optional<py::dict>& config) {
        cli::GenOptions o;
        o.out = out;
        o.seed = seed;
        o.levels = levels_of(levels, cli::kAllLevels);
        o.config = make_config(config);
        const auto s = cli::cmd_gen(o);
        py::dict d;
        d["instances"] = s.instances;
        d["submaps"] = s.submaps;
        d["pairs"] = s.pairs;
        d["fine_pairs"] = s.fine_pairs;
        return d;
      },
      py::arg("out"), py::arg("seed") = 0, py::arg("levels") = py::none(), py::arg("config") = py::none());

  m.def(
      "train",
      [](const std::string& stage, const std::filesystem::path& data, const std::filesystem::path& out,
         const std::optional<std::string>& level, const std::optional<std::filesystem::path>& frozen,
         std::optional<std::size_t> epochs, std::uint64_t seed, const std::optional<py::dict>& config) {
        cli::TrainOptions o;
        const auto st = cli::stage_from_name(stage);
        if (!st) throw py::value_error("unknown stage '" + stage + "'");
        o.stage = *st;
        o.data = data;
        o.out = out;
        o.level = level ? level_of(*level)
                        : (o.stage == cli::Stage::kDistill ? lang::Level::kComplex : lang::Level::kSimple);
        o.frozen = frozen;
        o.epochs = epochs;
        o.seed = seed;
        o.config = make_config(config);
        cli::TrainSummary s;
        {
          py::gil_scoped_release release;
          s = cli::cmd_train(o);
        }
        py::dict d;
        d["checkpoint"] = s.checkpoint;
        d["loss_csv"] = s.loss_csv;
        d["digest"] = s.digest;
        d["epoch_loss"] = s.epoch_loss;
        return d;
      },
      py::arg("stage"), py::arg("data"), py::arg("out"), py::arg("level") = py::none(),
      py::arg("frozen") = py::none(), py::arg("epochs") = py::none(), py::arg("seed") = 0,
      py::arg("config") = py::none());

  m.def(
      "evaluate",
      [](const std::string& mode, const std::filesystem::path& data, const std::filesystem::path& out,
         const std::filesystem::path& coarse, const std::optional<std::filesystem::path>& student,
         const std::optional<std::filesystem::path>& fine, const std::optional<std::vector<std::string>>& levels,
         std::uint64_t seed, const std::optional<py::dict>& config) {
        cli::EvalOptions o;
        const auto md = cli::mode_from_name(mode);
        if (!md) throw py::value_error("unknown mode '" + mode + "'");
        o.mode = *md;
        o.data = data;
        o.out = out;
        o.coarse = coarse;
        o.student = student;
        o.fine = fine;
        o.levels = levels_of(levels, {});
        o.seed = seed;
        o.config = make_config(config);
        nlohmann::json summary;
        {
          py::gil_scoped_release release;
          summary = cli::cmd_eval(o);
        }
        return to_python(summary);
      },
      py::arg("mode"), py::arg("data"), py::arg("out"), py::arg("coarse"), py::arg("student") = py::none(),
      py::arg("fine") = py::none(), py::arg("levels") = py::none(), py::arg("seed") = 0,
      py::arg("config") = py::none());

  m.def("report", [](const std::filesystem::path& dir) { return cli::cmd_report(dir); }, py::arg("dir"));

  m.def("tokenize", [](const std::string& text) { return lang::tokenize(text); }, py::arg("text"));
  m.def("fnv1a64", [](const std::string& s) { return fnv1a64(s); }, py::arg("text"));
  m.def(
      "token_vector",
      [](const std::string& token, std::size_t width) {
        const auto v = lang::Featurizer(width).token_vector(token);
        return std::vector<double>(v.values().begin(), v.values().end());
      },
      py::arg("token"), py::arg("width") = lang::kDefaultTextWidth);

  m.def(
      "retrieve_topk",
      [](const std::vector<double>& query, const Matrix& descriptors, const std::vector<int>& ids, std::size_t k) {
        const auto idx = make_index(descriptors, ids);
        ng::Array q({query.size()}, query);
        std::vector<std::pair<int, double>> out;
        for (const auto& r : coarse::retrieve_topk(q, idx, k)) out.emplace_back(r.id, r.score);
        return out;
      },
      py::arg("query"), py::arg("descriptors"), py::arg("ids"), py::arg("k"));
  m.def(
      "recall_at_k",
      [](const Matrix& queries, const std::vector<int>& truth, const Matrix& descriptors, const std::vector<int>& ids,
         const std::vector<std::size_t>& ks) {
        return coarse::recall_at_k(to_array(queries), truth, make_index(descriptors, ids), ks);
      },
      py::arg("queries"), py::arg("truth"), py::arg("descriptors"), py::arg("ids"),
      py::arg("ks") = coarse::kRecallKs);
  m.def(
      "localization_recall",
      [](const std::vector<std::vector<double>>& errors) {
        const auto t = fine::localization_recall(errors);
        py::dict d;
        d["epsilons"] = t.epsilons;
        d["ks"] = t.ks;
        d["recall"] = t.recall;
        return d;
      },
      py::arg("errors"));
  m.def(
      "l2_normalize_rows",
      [](const Matrix& x) {
        ng::Tape t;
        return to_numpy(ng::l2_normalize_rows(t.constant(to_array(x))).value());
      },
      py::arg("x"));
}
