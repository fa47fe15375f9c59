#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hl/guidance.hpp"
#include "hl/json_io.hpp"
#include "hl/probe.hpp"

namespace py = pybind11;

namespace {

py::object to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(hl::dump_json(j));
}

hl::Tensor2D to_tensor(const std::vector<std::vector<float>>& rows) { return hl::Tensor2D::from_rows(rows); }

std::vector<std::vector<float>> to_rows(const hl::Tensor2D& t) {
    std::vector<std::vector<float>> out;
    for (std::size_t r = 0; r < t.rows(); ++r) out.emplace_back(t.row(r).begin(), t.row(r).end());
    return out;
}

std::vector<hl::ByteRange> to_ranges(const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
    std::vector<hl::ByteRange> out;
    for (const auto& [a, b] : spans) out.push_back({a, b});
    return out;
}

hl::GuidanceConfig make_params(float alpha, float beta, float beta_qformer, float gamma, std::size_t max_new_tokens,
                               const std::string& rescale) {
    hl::GuidanceConfig g;
    g.alpha = alpha;
    g.beta = beta;
    g.beta_qformer = beta_qformer;
    g.gamma = gamma;
    g.max_new_tokens = max_new_tokens;
    g.rescale = hl::rescale_from_string(rescale);
    return g;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Highlight-guided decoding engine";

    py::register_exception<hl::Error>(m, "HighlighterError");

    py::class_<hl::ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("d_model", &hl::ModelConfig::d_model)
        .def_readwrite("n_layers", &hl::ModelConfig::n_layers)
        .def_readwrite("n_heads", &hl::ModelConfig::n_heads)
        .def_readwrite("d_ff", &hl::ModelConfig::d_ff)
        .def_readwrite("max_seq", &hl::ModelConfig::max_seq)
        .def_readwrite("n_patches", &hl::ModelConfig::n_patches)
        .def_readwrite("n_queries", &hl::ModelConfig::n_queries)
        .def_readwrite("d_k", &hl::ModelConfig::d_k)
        .def_readwrite("patch_dim", &hl::ModelConfig::patch_dim)
        .def_readonly("vocab", &hl::ModelConfig::vocab)
        .def("validate", &hl::ModelConfig::validate)
        .def("to_dict", [](const hl::ModelConfig& c) { return to_py(nlohmann::json(c)); })
        .def(py::self == py::self);

    py::class_<hl::Model, std::shared_ptr<hl::Model>>(m, "Model")
        .def_static(
            "from_seed",
            [](std::uint64_t seed, std::optional<hl::ModelConfig> cfg) {
                const auto c = cfg.value_or(hl::ModelConfig{});
                return std::make_shared<hl::Model>(c, hl::seeded_init(c, seed));
            },
            py::arg("seed"), py::arg("config") = py::none())
        .def_static(
            "load",
            [](const std::filesystem::path& path) {
                auto lw = hl::load_weights(path);
                return std::make_shared<hl::Model>(lw.config, std::move(lw.weights));
            },
            py::arg("path"))
        .def("save", [](const hl::Model& mdl, const std::filesystem::path& path) {
            hl::save_weights(mdl.weights(), mdl.config(), path);
        })
        .def_property_readonly("config", &hl::Model::config);

    m.def("encode", [](const std::string& text) {
        const auto enc = hl::encode(text);
        std::vector<std::pair<std::size_t, std::size_t>> offsets;
        for (const auto& o : enc.offsets) offsets.emplace_back(o.start, o.end);
        return py::make_tuple(enc.ids, offsets);
    });
    m.def("decode", [](const std::vector<hl::TokenId>& ids) { return py::bytes(hl::decode(ids)); });
    m.def(
        "align_span",
        [](const std::vector<std::pair<std::size_t, std::size_t>>& offsets, std::size_t a, std::size_t b) {
            std::vector<hl::ByteOffset> offs;
            for (const auto& [s, e] : offsets) offs.push_back({s, e});
            const auto span = hl::align_span(offs, a, b);
            return py::make_tuple(span.token_start, span.token_end);
        },
        py::arg("offsets"), py::arg("char_start"), py::arg("char_end"));

    m.def(
        "build_uncond",
        [](const std::vector<std::vector<float>>& s, const std::vector<std::uint8_t>& mask, float alpha) {
            return to_rows(hl::build_uncond(to_tensor(s), mask, alpha));
        },
        py::arg("embeddings"), py::arg("mask"), py::arg("alpha"));
    m.def(
        "combine_logits",
        [](const std::vector<float>& c, const std::vector<float>& u, float gamma, const std::string& rescale) {
            return hl::combine_logits(c, u, gamma, hl::rescale_from_string(rescale));
        },
        py::arg("cond"), py::arg("uncond"), py::arg("gamma"), py::arg("rescale") = "logsoftmax");
    m.def(
        "attention_bias",
        [](const std::vector<std::uint8_t>& mask, float beta, bool unconditional) {
            return hl::make_bias(hl::HighlightMask(mask), beta,
                                 unconditional ? hl::Branch::Unconditional : hl::Branch::Normal)
                .values;
        },
        py::arg("mask"), py::arg("beta"), py::arg("unconditional") = false);
    m.def(
        "activated_softmax",
        [](const std::vector<float>& scores, const std::vector<float>& bias) {
            const hl::Tensor2D s(1, scores.size(), scores);
            const auto p = hl::apply_bias(s, bias, false);
            return std::vector<float>(p.row(0).begin(), p.row(0).end());
        },
        py::arg("scores"), py::arg("bias"));

    m.def(
        "generate",
        [](const hl::Model& model, const std::string& text, const std::vector<std::pair<std::size_t, std::size_t>>& highlights,
           float alpha, float beta, float beta_qformer, float gamma, std::size_t max_new_tokens, bool vanilla,
           const std::string& rescale, bool probe) {
            const auto g = make_params(alpha, beta, beta_qformer, gamma, max_new_tokens, rescale);
            const auto ranges = to_ranges(highlights);
            hl::ProbedGeneration run;
            {
                py::gil_scoped_release release;
                const auto prompt = hl::build_prompt(model, text, ranges);
                run = hl::decode_with_probe(model, prompt.input, g, vanilla);
                run.result.spans = prompt.spans;
            }
            py::dict out = to_py(nlohmann::json(run.result));
            if (probe) out["probe"] = to_py(hl::probe_report(run.snapshot));
            return out;
        },
        py::arg("model"), py::arg("text"), py::arg("highlights") = std::vector<std::pair<std::size_t, std::size_t>>{},
        py::arg("alpha") = 0.01f, py::arg("beta") = 2.0f, py::arg("beta_qformer") = 20.0f, py::arg("gamma") = 1.3f,
        py::arg("max_new_tokens") = 64, py::arg("vanilla") = false, py::arg("rescale") = "logsoftmax",
        py::arg("probe") = false);

    m.def(
        "band_gap",
        [](const std::vector<std::vector<float>>& map, std::size_t context_len, bool exclude_sink) {
            const auto g = hl::band_gap(to_tensor(map), context_len, exclude_sink);
            return py::make_tuple(g.gx, g.gy, g.ratio());
        },
        py::arg("map"), py::arg("context_len"), py::arg("exclude_sink") = true);
    m.def(
        "contribution",
        [](const std::vector<std::vector<float>>& map, std::size_t context_len, const std::vector<std::uint8_t>& mask) {
            return hl::contribution(to_tensor(map), context_len, mask).per_row;
        },
        py::arg("map"), py::arg("context_len"), py::arg("mask"));
    m.def("probe_report", [](const std::filesystem::path& path) { return to_py(hl::probe_report(hl::load_snapshot_any(path))); });
}
