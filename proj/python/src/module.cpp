#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "wuglab/analysis.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/hbm.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/pipeline.hpp"
#include "wuglab/stats.hpp"
#include "wuglab/tokenizer.hpp"

namespace py = pybind11;
using namespace wuglab;

namespace {

// Structured results cross the boundary as plain dicts.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

stats::Alternative parse_alternative(const std::string& s) {
  if (s == "two-sided") return stats::Alternative::TwoSided;
  if (s == "greater") return stats::Alternative::Greater;
  if (s == "less") return stats::Alternative::Less;
  throw py::value_error("alternative must be two-sided, greater or less");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the wuglab C++ core";

  py::class_<corpus::Corpus>(m, "Corpus")
      .def_property_readonly("condition", [](const corpus::Corpus& c) { return std::string(corpus::to_string(c.spec.condition)); })
      .def_property_readonly("seed", [](const corpus::Corpus& c) { return c.spec.seed; })
      .def_property_readonly("fraction", [](const corpus::Corpus& c) { return c.spec.fraction; })
      .def_readonly("sentences", &corpus::Corpus::sentences)
      .def_readonly("md5", &corpus::Corpus::md5)
      .def("text", &corpus::Corpus::text)
      .def("whitespace_vocab_size", &corpus::Corpus::whitespace_vocab_size)
      .def("token_frequencies", &corpus::Corpus::token_frequencies)
      .def("metadata", [](const corpus::Corpus& c) { return to_py(c.metadata_json()); })
      .def("save", &corpus::Corpus::save, py::arg("dir"))
      .def_static("load", &corpus::Corpus::load, py::arg("dir"))
      .def("__len__", [](const corpus::Corpus& c) { return c.sentences.size(); });

  m.def(
      "generate_corpus",
      [](const std::string& condition, std::uint64_t seed, double fraction) {
        return corpus::generate_corpus(corpus::make_spec(corpus::parse_condition(condition), seed, fraction));
      },
      py::arg("condition"), py::arg("seed"), py::arg("fraction") = 1.0);
  m.def("manipulation_check", [](const corpus::Corpus& c) { return to_py(corpus::manipulation_check(c).to_json()); });
  m.def("conditions", [] {
    std::vector<std::string> out;
    for (auto c : corpus::kAllConditions) out.emplace_back(corpus::to_string(c));
    return out;
  });

  py::class_<tok::BpeModel>(m, "BpeModel")
      .def_property_readonly("vocab_size", &tok::BpeModel::vocab_size)
      .def("encode", [](const tok::BpeModel& b, const std::string& s) { return b.encode(s); })
      .def("encode_sentence", [](const tok::BpeModel& b, const std::string& s) { return b.encode_sentence(s); })
      .def("decode", [](const tok::BpeModel& b, const std::vector<int>& ids) { return py::bytes(b.decode(ids)); })
      .def("piece", [](const tok::BpeModel& b, int id) { return py::bytes(b.piece(id)); })
      .def("save", &tok::BpeModel::save, py::arg("path"))
      .def_static("load", &tok::BpeModel::load, py::arg("path"));
  m.def("fit_bpe", [](const corpus::Corpus& c, int merges) { return tok::fit_bpe(c, merges); }, py::arg("corpus"),
        py::arg("num_merges") = tok::kDefaultMerges);

  m.def(
      "binomial_test",
      [](int k, int n, double p0, const std::string& alt) {
        return to_py(stats::binomial_test(k, n, p0, parse_alternative(alt)).to_json());
      },
      py::arg("successes"), py::arg("n"), py::arg("p0") = 0.5, py::arg("alternative") = "two-sided");
  m.def(
      "mann_whitney_u",
      [](const std::vector<double>& a, const std::vector<double>& b, bool exact) {
        return to_py(stats::mann_whitney_u({"a", a}, {"b", b}, exact).to_json());
      },
      py::arg("a"), py::arg("b"), py::arg("exact") = true);
  m.def(
      "jonckheere_terpstra",
      [](const std::vector<std::vector<double>>& groups, bool exact) {
        std::vector<stats::SampleGroup> g;
        for (std::size_t i = 0; i < groups.size(); ++i) g.push_back({std::to_string(i), groups[i]});
        return to_py(stats::jonckheere_terpstra(g, exact).to_json());
      },
      py::arg("groups"), py::arg("exact") = true);
  m.def(
      "tost_equivalence",
      [](const std::vector<double>& v, double center, double bound_pp) {
        return to_py(stats::tost_equivalence(v, center, bound_pp).to_json());
      },
      py::arg("values"), py::arg("center") = 0.5, py::arg("bound_pp") = stats::kTostBoundPp);
  m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) {
    return stats::kl_divergence(p, q).nats;
  });

  m.def("log_marginal_likelihood",
        [](const std::vector<std::vector<int>>& rows, double alpha, const std::vector<double>& beta) {
          hbm::CountMatrix cm;
          cm.n_values = static_cast<int>(beta.size());
          for (std::size_t i = 0; i < rows.size(); ++i) cm.kind_ids.push_back(static_cast<int>(i));
          cm.rows = rows;
          return hbm::log_marginal_likelihood(cm, alpha, beta);
        },
        py::arg("rows"), py::arg("alpha"), py::arg("beta"));
  m.def(
      "hbm_posterior",
      [](const corpus::Corpus& c, int exemplars_seen) {
        return to_py(hbm::run_for_corpus(c, exemplars_seen).posterior.to_json());
      },
      py::arg("corpus"), py::arg("exemplars_seen") = 1);

  m.def("gradient_check", [] {
    const auto r = lm::gradient_check(lm::gradcheck_config());
    return py::dict(py::arg("max_rel_error") = r.max_rel_error, py::arg("worst_param") = r.worst_param,
                    py::arg("checked") = r.checked);
  });

  m.def(
      "run_matrix",
      [](const py::object& config) {
        const auto cfg = pipeline::MatrixConfig::from_json(from_py(config));
        pipeline::Registry reg(cfg.data_dir);
        pipeline::MatrixReport rep;
        {
          py::gil_scoped_release release;
          rep = pipeline::run_matrix(cfg, reg);
        }
        return py::dict(py::arg("executed") = rep.executed, py::arg("skipped") = rep.skipped,
                        py::arg("failed") = rep.failed, py::arg("failed_runs") = rep.failed_runs);
      },
      py::arg("config"));
  m.def(
      "emit_reports",
      [](const std::filesystem::path& data_dir, const std::filesystem::path& out_dir) {
        pipeline::Registry reg(data_dir);
        const auto b = pipeline::emit_reports(reg, out_dir);
        return py::dict(py::arg("dir") = b.dir.string(), py::arg("files") = b.files, py::arg("errors") = b.errors);
      },
      py::arg("data_dir"), py::arg("out_dir"));
  m.attr("CONFIG_SCHEMA") = pipeline::kConfigSchema;
}
