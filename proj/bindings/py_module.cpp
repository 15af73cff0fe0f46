// Python bindings for the core operations: gold labeling, data generation,
// program execution, extraction passes and emission. Programs cross the
// boundary as their canonical JSON text.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tp/extract.hpp"
#include "tp/interp.hpp"
#include "tp/ir.hpp"
#include "tp/model.hpp"
#include "tp/tasks.hpp"
#include "tp/train.hpp"

namespace py = pybind11;
using namespace tprog;

namespace {

ir::Program parse_program(const std::string& text) { return ir::deserialize(text); }

}  // namespace

PYBIND11_MODULE(_tprog, m) {
    m.doc() = "Gated sequence models that decompile into discrete programs";

    // --- tasks ---------------------------------------------------------------
    m.def("gold", &tasks::gold, py::arg("task"), py::arg("tokens"),
          "Gold labels over content tokens for a named task");
    m.def(
        "gen_dataset",
        [](const std::string& task, int vocab, int len, int n, uint64_t seed,
           const std::string& out_dir) {
            tasks::Dataset d;
            if (task == "icl") {
                d = tasks::gen_icl(n, len, seed);
            } else {
                tasks::TaskSpec spec;
                spec.name = task;
                spec.vocab_size = vocab;
                spec.max_len = len;
                spec.n_samples = n;
                spec.n_val = n / 10;
                spec.n_test = n / 10;
                spec.seed = seed;
                d = tasks::gen_rasp(spec);
            }
            tasks::save_dataset(d, out_dir);
            return py::make_tuple(d.train.size(), d.val.size(), d.test.size());
        },
        py::arg("task"), py::arg("vocab"), py::arg("len"), py::arg("n"), py::arg("seed"),
        py::arg("out_dir"));

    // --- interpreter primitives ------------------------------------------------
    m.def(
        "select_closest",
        [](const std::vector<int>& keys, const std::vector<int>& queries,
           const std::vector<int>& mapping, bool causal, int max_len) {
            ir::Predicate p;
            p.mapping = mapping;
            return interp::select_closest(keys, queries, p, causal, max_len);
        },
        py::arg("keys"), py::arg("queries"), py::arg("mapping"), py::arg("causal") = false,
        py::arg("max_len") = 64);
    m.def(
        "select",
        [](const std::vector<int>& keys, const std::vector<int>& queries,
           const std::vector<int>& mapping, bool causal) {
            ir::Predicate p;
            p.mapping = mapping;
            auto rows = interp::select(keys, queries, p, causal);
            std::vector<std::vector<bool>> out;
            for (const auto& row : rows) out.emplace_back(row.begin(), row.end());
            return out;
        },
        py::arg("keys"), py::arg("queries"), py::arg("mapping"), py::arg("causal") = false);
    m.def("aggregate",
          [](const std::vector<int>& indices, const std::vector<std::string>& values) {
              return interp::aggregate(indices, values);
          });
    m.def("aggregate_sum", [](const std::vector<std::vector<bool>>& matrix,
                              const std::vector<int64_t>& values) {
        std::vector<std::vector<uint8_t>> rows;
        for (const auto& row : matrix) rows.emplace_back(row.begin(), row.end());
        return interp::aggregate_sum(rows, values);
    });

    // --- programs -------------------------------------------------------------
    m.def("validate_program", [](const std::string& text) {
        auto violations = ir::validate_program(parse_program(text));
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& v : violations) out.emplace_back(v.element, v.message);
        return out;
    });
    m.def("canonicalize_program",
          [](const std::string& text) { return ir::serialize(parse_program(text)); });
    m.def("run_program", [](const std::string& text, const std::vector<std::string>& tokens) {
        return interp::run_program(parse_program(text), tokens).labels;
    });
    m.def(
        "emit_source",
        [](const std::string& text, const std::string& dialect, bool compress) {
            extract::EmissionOptions opts;
            if (!compress) opts = extract::EmissionOptions::none();
            opts.dialect = dialect;
            opts.weights_file = "";  // inline: self-contained source
            auto p = parse_program(text);
            return extract::emit_source(compress ? extract::apply_passes(p, opts) : p, opts);
        },
        py::arg("program_json"), py::arg("dialect") = "py3", py::arg("compress") = true);
    m.def("program_line_counts", [](const std::string& text) {
        auto stats = extract::program_stats_with_lines(parse_program(text));
        return py::make_tuple(stats.line_count_full, stats.line_count_pruned);
    });

    // --- model/checkpoint surface ----------------------------------------------
    m.def("discretize_checkpoint", [](const std::string& ckpt_path) {
        auto ckpt = model::load_checkpoint(ckpt_path);
        return ir::serialize(model::discretize(ckpt.params));
    });
    m.def(
        "verify_checkpoint",
        [](const std::string& ckpt_path, const std::string& program_json,
           const std::string& data_dir, const std::string& split) {
            auto ckpt = model::load_checkpoint(ckpt_path);
            auto program = parse_program(program_json);
            auto data = tasks::load_dataset(data_dir);
            auto report = extract::verify_equivalence(ckpt.params, program, data.split(split));
            return py::make_tuple(report.match_rate, report.passed);
        },
        py::arg("checkpoint"), py::arg("program_json"), py::arg("data_dir"),
        py::arg("split") = "test");
    m.def(
        "evaluate_program",
        [](const std::string& program_json, const std::string& data_dir, const std::string& split,
           const std::string& metric) {
            auto data = tasks::load_dataset(data_dir);
            return train::evaluate_program(parse_program(program_json), data, split,
                                           train::metric_from_string(metric));
        },
        py::arg("program_json"), py::arg("data_dir"), py::arg("split") = "test",
        py::arg("metric") = "token-accuracy");

    m.attr("__version__") = "0.1.0";
}
