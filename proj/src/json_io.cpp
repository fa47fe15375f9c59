#include "hl/json_io.hpp"

#include <set>

namespace hl {

using nlohmann::json;

namespace {
const std::set<std::string> kConfigKeys{"d_model",   "n_layers",  "n_heads",   "d_ff",
                                        "max_seq",   "vocab",     "n_patches", "n_queries",
                                        "d_k",       "patch_dim", "layernorm_eps"};
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"d_model", c.d_model},     {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
             {"d_ff", c.d_ff},           {"max_seq", c.max_seq},     {"vocab", c.vocab},
             {"n_patches", c.n_patches}, {"n_queries", c.n_queries}, {"d_k", c.d_k},
             {"patch_dim", c.patch_dim}, {"layernorm_eps", c.layernorm_eps}};
}

void from_json(const json& j, ModelConfig& c) {
    if (!j.is_object()) throw json::type_error::create(302, "model config must be an object", &j);
    for (const auto& [key, _] : j.items()) {
        if (!kConfigKeys.count(key)) throw json::other_error::create(501, "unknown config key '" + key + "'", &j);
    }
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("max_seq").get_to(c.max_seq);
    j.at("vocab").get_to(c.vocab);
    j.at("n_patches").get_to(c.n_patches);
    j.at("n_queries").get_to(c.n_queries);
    j.at("d_k").get_to(c.d_k);
    j.at("patch_dim").get_to(c.patch_dim);
    j.at("layernorm_eps").get_to(c.layernorm_eps);
}

void to_json(json& j, const TokenSpan& s) {
    j = json{{"token_start", s.token_start},
             {"token_end", s.token_end},
             {"char_start", s.char_start},
             {"char_end", s.char_end}};
}

void to_json(json& j, const ByteRange& r) {
    j = json{{"char_start", r.char_start}, {"char_end", r.char_end}};
}

void from_json(const json& j, ByteRange& r) {
    j.at("char_start").get_to(r.char_start);
    j.at("char_end").get_to(r.char_end);
}

const char* to_string(Rescale r) {
    return r == Rescale::LogSoftmax ? "logsoftmax" : "softmax";
}

Rescale rescale_from_string(const std::string& s) {
    if (s == "logsoftmax") return Rescale::LogSoftmax;
    if (s == "softmax") return Rescale::Softmax;
    throw ParamError("rescale must be 'logsoftmax' or 'softmax'");
}

const char* to_string(VisualMapping m) {
    switch (m) {
    case VisualMapping::Direct: return "direct";
    case VisualMapping::QFormer: return "qformer";
    default: return "none";
    }
}

VisualMapping mapping_from_string(const std::string& s) {
    if (s == "direct") return VisualMapping::Direct;
    if (s == "qformer") return VisualMapping::QFormer;
    throw ParamError("mapping must be 'direct' or 'qformer'");
}

void to_json(json& j, const GuidanceConfig& c) {
    j = json{{"alpha", c.alpha},
             {"beta", c.beta},
             {"beta_qformer", c.beta_qformer},
             {"gamma", c.gamma},
             {"delta", c.delta()},
             {"max_new_tokens", c.max_new_tokens},
             {"rescale", to_string(c.rescale)}};
}

void from_json(const json& j, GuidanceConfig& c) {
    if (!j.is_object()) throw json::type_error::create(302, "params must be an object", &j);
    if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
    if (j.contains("beta")) j.at("beta").get_to(c.beta);
    if (j.contains("beta_qformer")) j.at("beta_qformer").get_to(c.beta_qformer);
    if (j.contains("gamma")) j.at("gamma").get_to(c.gamma);
    if (j.contains("max_new_tokens")) j.at("max_new_tokens").get_to(c.max_new_tokens);
    if (j.contains("rescale")) c.rescale = rescale_from_string(j.at("rescale").get<std::string>());
}

void to_json(json& j, const ScoredToken& t) {
    j = json{{"id", t.id}, {"value", t.value}};
}

void to_json(json& j, const StepRecord& s) {
    j = json{{"chosen", s.chosen},
             {"top_cond", s.top_cond},
             {"top_uncond", s.top_uncond},
             {"top_combined", s.top_combined}};
}

void to_json(json& j, const GenerationResult& r) {
    j = json{{"text", r.text},
             {"tokens", r.tokens},
             {"steps", r.steps},
             {"params", r.params},
             {"vanilla", r.vanilla},
             {"stopped_at_eos", r.stopped_at_eos},
             {"context_len", r.context_len},
             {"spans", r.spans}};
}

Tensor2D patches_from_json(const json& j) {
    const auto grid = j.at("grid").get<std::size_t>();
    const auto rows = j.at("features").get<std::vector<std::vector<float>>>();
    if (rows.size() != grid * grid) {
        throw ShapeError("features has " + std::to_string(rows.size()) + " rows, grid " + std::to_string(grid) +
                         " needs " + std::to_string(grid * grid));
    }
    return Tensor2D::from_rows(rows);
}

json patches_to_json(const Tensor2D& features, std::size_t grid) {
    json rows = json::array();
    for (std::size_t r = 0; r < features.rows(); ++r) {
        rows.push_back(std::vector<float>(features.row(r).begin(), features.row(r).end()));
    }
    return json{{"grid", grid}, {"features", rows}};
}

std::string dump_json(const json& j, int indent) {
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

} // namespace hl
