#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/glyphgen.hpp"
#include "dlra/model.hpp"
#include "dlra/trainer.hpp"

namespace py = pybind11;
using namespace dlra;

namespace {

// Single-task convenience entry: init a fresh backbone, attach adapters per
// the config mode, train, optionally fold the adapters back in, then score
// the held-out set. Seed handling matches the sequential trainer's task 0.
py::dict train_single(const GlyphDataset& train, const GlyphDataset& test, TrainConfig cfg) {
    cfg.validate();
    if (train.n_classes != test.n_classes)
        throw ConfigError("train has " + std::to_string(train.n_classes) +
                          " classes but test has " + std::to_string(test.n_classes));

    GlyphTransformerConfig arch;
    arch.n_classes = train.n_classes;
    const std::uint64_t task_seed = mix_seed(cfg.seed, 0x7461736b00ull);
    auto m = init_params<float>(arch, task_seed);
    attach_adapters_for(m, cfg, task_seed);

    auto r = train_task(m, cfg, train, task_seed);
    if (cfg.merge_after_task) m.merge_all();
    auto ev = evaluate(m, test);

    std::size_t pruned = 0;
    for (const auto& rep : r.prunes) pruned += rep.pruned.size();

    py::dict out;
    out["accuracy"] = ev.accuracy;
    out["macro_recall"] = ev.macro_recall;
    out["macro_f1"] = ev.macro_f1;
    out["final_active_rank"] = r.final_active_rank;
    out["pruned_directions"] = pruned;
    out["trainable_params"] = r.trainable_params;
    out["adapter_params"] = r.adapter_params;
    out["epochs_run"] = r.epochs_run;
    out["best_epoch"] = r.best_epoch;
    out["train_loss"] = r.epoch_train_loss.empty() ? 0.0 : r.epoch_train_loss.back();
    out["seconds"] = r.seconds;
    return out;
}

py::bytes dataset_image(const GlyphDataset& ds, std::size_t i) {
    if (i >= ds.size()) throw py::index_error("image index out of range");
    return py::bytes(reinterpret_cast<const char*>(ds.image(i)),
                     static_cast<std::size_t>(ds.height) * ds.width);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "dynamic low-rank adapter core";
    m.attr("__version__") = "0.1.0";

    auto err = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", err);
    py::register_exception<DataError>(m, "DataError", err);
    py::register_exception<FormatError>(m, "FormatError", err);
    py::register_exception<NumericError>(m, "NumericError", err);

    py::class_<ScriptFamily>(m, "ScriptFamily")
        .def_readonly("id", &ScriptFamily::id)
        .def_readonly("n_classes", &ScriptFamily::n_classes)
        .def_readonly("complexity", &ScriptFamily::complexity)
        .def_property_readonly("tag", [](const ScriptFamily& f) { return std::string(f.tag); })
        .def("__repr__", [](const ScriptFamily& f) {
            return "ScriptFamily(id=" + std::to_string(f.id) + ", tag='" + f.tag + "')";
        });

    py::class_<GlyphDataset>(m, "GlyphDataset")
        .def(py::init<>())
        .def_readonly("height", &GlyphDataset::height)
        .def_readonly("width", &GlyphDataset::width)
        .def_readonly("n_classes", &GlyphDataset::n_classes)
        .def_readonly("family", &GlyphDataset::family)
        .def_readonly("labels", &GlyphDataset::labels)
        .def("__len__", &GlyphDataset::size)
        .def("image", &dataset_image, py::arg("i"),
             "raw pixels of glyph i as height*width bytes");

    m.attr("num_families") = kNumFamilies;
    m.def("family_info", [](int family) { return family_info(family); },
          py::arg("family"), py::return_value_policy::copy);
    m.def("generate_dataset", &generate_dataset,
          py::arg("family"), py::arg("per_class"), py::arg("seed"));
    m.def("write_gly1", &write_gly1, py::arg("dataset"), py::arg("path"));
    m.def("read_gly1", &read_gly1, py::arg("path"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("clip_norm", &TrainConfig::clip_norm)
        .def_readwrite("micro_batch", &TrainConfig::micro_batch)
        .def_readwrite("accumulation_steps", &TrainConfig::accumulation_steps)
        .def_readwrite("max_epochs", &TrainConfig::max_epochs)
        .def_readwrite("patience", &TrainConfig::patience)
        .def_readwrite("lambda_", &TrainConfig::lambda)
        .def_readwrite("prune_epsilon", &TrainConfig::prune_epsilon)
        .def_readwrite("rank", &TrainConfig::rank)
        .def_readwrite("alpha", &TrainConfig::alpha)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("merge_after_task", &TrainConfig::merge_after_task)
        .def_readwrite("augment", &TrainConfig::augment)
        .def_readwrite("train_importance", &TrainConfig::train_importance)
        .def_readwrite("adapt_attention", &TrainConfig::adapt_attention)
        .def_readwrite("adapt_mlp", &TrainConfig::adapt_mlp)
        .def_property("mode",
                      [](const TrainConfig& c) { return mode_name(c.mode); },
                      [](TrainConfig& c, const std::string& s) { c.mode = parse_mode(s); })
        .def("validate", &TrainConfig::validate);

    m.def("train_single", &train_single,
          py::arg("train"), py::arg("test"), py::arg("config"),
          "train one task from scratch and score it on the held-out set");
}
