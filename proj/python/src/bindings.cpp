#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mitst/evaluation.hpp"
#include "mitst/pipeline.hpp"
#include "mitst/service.hpp"
#include "mitst/synthgen.hpp"

namespace py = pybind11;
using namespace mitst;

namespace {

// Dicts cross the boundary as JSON text.
json to_json(const py::object& o) {
    return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object from_json(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::vector<double> doubles(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

std::vector<int> ints(const py::array_t<int, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

py::object optional_value(const std::optional<double>& v) { return v ? py::cast(*v) : py::none(); }

class PyPipeline {
   public:
    PyPipeline(const std::string& out, const std::string& config, const std::vector<std::string>& overrides,
               std::optional<std::uint64_t> seed)
        : pipeline_(load_pipeline_config(config, overrides, seed), out) {}

    py::object run(const std::string& command) {
        RunResult r;
        {
            py::gil_scoped_release release;
            if (command == "generate") r = pipeline_.generate();
            else if (command == "preprocess") r = pipeline_.preprocess();
            else if (command == "train") r = pipeline_.train();
            else if (command == "evaluate") r = pipeline_.evaluate();
            else if (command == "predict") r = pipeline_.predict();
            else if (command == "finetune") r = pipeline_.finetune();
            else throw UsageError("unknown command '" + command + "'");
        }
        return from_json(r.manifest);
    }

    py::object config() const { return from_json(pipeline_.config().to_json()); }
    std::string config_hash() const { return pipeline_.config().hash(); }

   private:
    Pipeline pipeline_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Hierarchical attention over multi-source irregular time series";
    m.attr("__version__") = "0.1.0";

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const RequestError& e) {
            PyErr_SetString(PyExc_ValueError, e.to_json().dump().c_str());
        }
    });

    m.def("classify", [](double value) { return std::string(class_name(classify_target(value))); }, py::arg("value"));
    m.def(
        "auroc", [](py::array_t<double> s, py::array_t<int> y) { return optional_value(auroc(doubles(s), ints(y))); },
        py::arg("scores"), py::arg("truths"));
    m.def(
        "auprc", [](py::array_t<double> s, py::array_t<int> y) { return optional_value(auprc(doubles(s), ints(y))); },
        py::arg("scores"), py::arg("truths"));
    m.def(
        "select_cutpoint",
        [](py::array_t<double> s, py::array_t<int> y) {
            const auto c = select_cutpoint(doubles(s), ints(y));
            return py::make_tuple(c.threshold, c.sensitivity, c.specificity);
        },
        py::arg("scores"), py::arg("truths"));
    m.def(
        "time_encoding",
        [](const std::vector<double>& offsets, int width, double min_period, double max_period) {
            const Matrix e = time_encoding(offsets, width, min_period, max_period);
            py::array_t<double> out({e.rows(), e.cols()});
            std::copy(e.data(), e.data() + e.size(), out.mutable_data());
            return out;
        },
        py::arg("offsets"), py::arg("width"), py::arg("min_period") = 2.0, py::arg("max_period") = 100000.0);
    m.def(
        "generate_manifest",
        [](const py::object& config) {
            const auto c = GeneratorConfig::from_json(to_json(config));
            json manifest;
            {
                py::gil_scoped_release release;
                manifest = generate_cohort(c).manifest.to_json();
            }
            return from_json(manifest);
        },
        py::arg("config"));

    py::class_<PyPipeline>(m, "Pipeline")
        .def(py::init<const std::string&, const std::string&, const std::vector<std::string>&,
                      std::optional<std::uint64_t>>(),
             py::arg("out"), py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{},
             py::arg("seed") = py::none())
        .def("run", &PyPipeline::run, py::arg("command"))
        .def_property_readonly("config", &PyPipeline::config)
        .def_property_readonly("config_hash", &PyPipeline::config_hash);

    py::class_<Predictor, std::shared_ptr<Predictor>>(m, "Predictor")
        .def_static(
            "load", [](const std::string& path) { return std::const_pointer_cast<Predictor>(Predictor::load(path)); },
            py::arg("checkpoint"))
        .def("predict", [](const Predictor& p, const py::object& req) { return from_json(p.predict(to_json(req))); },
             py::arg("request"))
        .def("bounds", [](const Predictor& p) { return from_json(p.bounds()); })
        .def("request_schema", [](const Predictor& p) { return from_json(request_json_schema(p.model().schema())); })
        .def_property_readonly("model_hash", &Predictor::model_hash)
        .def_property_readonly("config_hash", &Predictor::config_hash);
}
