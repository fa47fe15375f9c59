#pragma once

// JSON mappings for the engine's wire and file types.

#include "json.hpp"

#include "hl/guidance.hpp"
#include "hl/model.hpp"
#include "hl/tokenizer.hpp"

namespace hl {

void to_json(nlohmann::json& j, const ModelConfig& c);
// Every field is required; unknown keys are rejected.
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const TokenSpan& s);
void to_json(nlohmann::json& j, const ByteRange& r);
void from_json(const nlohmann::json& j, ByteRange& r);

void to_json(nlohmann::json& j, const GuidanceConfig& c);
// Missing fields keep their defaults.
void from_json(const nlohmann::json& j, GuidanceConfig& c);

void to_json(nlohmann::json& j, const ScoredToken& t);
void to_json(nlohmann::json& j, const StepRecord& s);
void to_json(nlohmann::json& j, const GenerationResult& r);

const char* to_string(Rescale r);
Rescale rescale_from_string(const std::string& s);
const char* to_string(VisualMapping m);
VisualMapping mapping_from_string(const std::string& s);

// {"grid": P, "features": [[...], ...]} → N×patch_dim tensor.
Tensor2D patches_from_json(const nlohmann::json& j);
nlohmann::json patches_to_json(const Tensor2D& features, std::size_t grid);

// Dumps with invalid UTF-8 replaced (generated bytes may split code points).
std::string dump_json(const nlohmann::json& j, int indent = -1);

} // namespace hl
