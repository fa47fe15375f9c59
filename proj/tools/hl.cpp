// hl: command-line front end for highlighted generation.
//
// Exit codes: 0 ok, 1 other failure, 2 usage, 3 model/file format,
// 4 capacity (context does not fit max_seq).

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hl/guidance.hpp"
#include "hl/json_io.hpp"
#include "hl/probe.hpp"
#include "serve_options.hpp"

namespace {

using nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitCapacity = 4;

class UsageError : public hl::Error {
public:
    using hl::Error::Error;
};

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw hl::FormatError("cannot open '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw hl::FormatError("'" + path + "': " + e.what());
    }
}

hl::ByteRange parse_highlight(const std::string& s, std::size_t text_len) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError("--highlight expects A:B, got '" + s + "'");
    try {
        const std::size_t a = std::stoul(s.substr(0, colon));
        const std::size_t b = std::stoul(s.substr(colon + 1));
        if (a >= b || b > text_len) throw UsageError("--highlight " + s + " is outside the prompt");
        return {a, b};
    } catch (const std::logic_error&) {
        throw UsageError("--highlight expects byte offsets A:B, got '" + s + "'");
    }
}

// {"bits": [...]} or {"rect": [x0, y0, x1, y1], "image_dims": [w, h], "threshold": 0.5 | "any"}
std::vector<std::uint8_t> read_region(const std::string& path, std::size_t grid) {
    const json j = read_json_file(path);
    try {
        if (j.contains("bits")) {
            auto bits = j.at("bits").get<std::vector<std::uint8_t>>();
            if (bits.size() != grid * grid) throw UsageError("region bits must have " + std::to_string(grid * grid) + " entries");
            return bits;
        }
        const auto r = j.at("rect").get<std::vector<std::size_t>>();
        const auto dims = j.at("image_dims").get<std::vector<std::size_t>>();
        if (r.size() != 4 || dims.size() != 2) throw UsageError("rect needs 4 values and image_dims 2");
        double threshold = hl::kPatchCoverageThreshold;
        if (j.contains("threshold")) {
            threshold = j.at("threshold").is_string() && j.at("threshold") == "any" ? hl::kAnyOverlap
                                                                                      : j.at("threshold").get<double>();
        }
        return hl::downsample_region(hl::PatchRegion::rectangle({r[0], r[1], r[2], r[3]}), {dims[0], dims[1]}, grid,
                                     threshold);
    } catch (const json::exception& e) {
        throw hl::FormatError("'" + path + "': " + e.what());
    }
}

struct GenArgs {
    std::string model;
    std::string prompt;
    std::vector<std::string> highlights;
    std::string image;
    std::string region;
    std::string mapping = "direct";
    float alpha = 0.01f, beta = 2.0f, beta_qformer = 20.0f, gamma = 1.3f;
    std::size_t max_tokens = 64;
    std::string rescale = "logsoftmax";
    bool vanilla = false;
    std::string probe;
    bool json_out = false;
};

int run_gen(const GenArgs& a) {
    hl::LoadedWeights loaded = hl::load_weights(a.model);
    const hl::Model model(loaded.config, std::move(loaded.weights));

    std::vector<hl::ByteRange> ranges;
    for (const auto& h : a.highlights) ranges.push_back(parse_highlight(h, a.prompt.size()));

    std::optional<hl::ImageInput> image;
    if (!a.image.empty()) {
        hl::ImageInput img;
        try {
            img.features = hl::patches_from_json(read_json_file(a.image));
        } catch (const json::exception& e) {
            throw hl::FormatError("'" + a.image + "': " + e.what());
        }
        img.mapping = hl::mapping_from_string(a.mapping);
        if (!a.region.empty()) img.patch_mask = read_region(a.region, model.config().patch_grid());
        image = std::move(img);
    } else if (!a.region.empty()) {
        throw UsageError("--region requires --image");
    }

    hl::GuidanceConfig cfg;
    cfg.alpha = a.alpha;
    cfg.beta = a.beta;
    cfg.beta_qformer = a.beta_qformer;
    cfg.gamma = a.gamma;
    cfg.max_new_tokens = a.max_tokens;
    cfg.rescale = hl::rescale_from_string(a.rescale);

    const hl::Prompt prompt = hl::build_prompt(model, a.prompt, ranges, image);
    hl::ProbedGeneration run = hl::decode_with_probe(model, prompt.input, cfg, a.vanilla);
    run.result.spans = prompt.spans;
    if (!a.probe.empty()) hl::write_snapshot(run.snapshot, a.probe);

    if (a.json_out) {
        std::cout << hl::dump_json(json(run.result)) << '\n';
    } else {
        std::cout << run.result.text << '\n';
    }
    return 0;
}

int run_init_weights(const std::string& config, std::uint64_t seed, const std::string& out) {
    const hl::ModelConfig cfg = config.empty() ? hl::ModelConfig{} : hl::load_config(config);
    hl::save_weights(hl::seeded_init(cfg, seed), cfg, out);
    return 0;
}

int run_probe(const std::string& in, bool as_json) {
    const hl::AttentionSnapshot snap = hl::load_snapshot_any(in);
    const json report = hl::probe_report(snap);
    if (as_json) {
        std::cout << report.dump(2) << '\n';
        return 0;
    }
    auto show = [&](const char* label, const char* key) {
        std::cout << label << ": ";
        if (report.contains(key) && !report.at(key).is_null()) {
            std::cout << report.at(key).get<double>();
        } else {
            std::cout << "n/a";
        }
        std::cout << '\n';
    };
    std::cout << "context_len: " << snap.context_len << '\n' << "generated: " << snap.generated << '\n';
    show("G_x", "gx");
    show("G_y", "gy");
    show("G_x/G_y", "ratio");
    show("contribution_mean", "contribution_mean");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Highlighted-prompt generation with a desk-scale transformer"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "generate text, optionally with highlighted spans or patches");
    gen_cmd->add_option("--model", gen.model, "THW1 weight file")->required();
    gen_cmd->add_option("--prompt", gen.prompt, "prompt text")->required();
    gen_cmd->add_option("--highlight", gen.highlights, "byte range A:B of the prompt to highlight (repeatable)");
    gen_cmd->add_option("--image", gen.image, "patch features JSON {\"grid\", \"features\"}");
    gen_cmd->add_option("--region", gen.region, "patch selection JSON {\"bits\"} or {\"rect\", \"image_dims\"}");
    gen_cmd->add_option("--mapping", gen.mapping, "visual token mapping")
        ->check(CLI::IsMember({"direct", "qformer"}))
        ->capture_default_str();
    gen_cmd->add_option("--alpha", gen.alpha, "embedding rescale of highlighted tokens")->capture_default_str();
    gen_cmd->add_option("--beta", gen.beta, "attention activation factor")->capture_default_str();
    gen_cmd->add_option("--beta-qformer", gen.beta_qformer, "Q-Former activation factor")->capture_default_str();
    gen_cmd->add_option("--gamma", gen.gamma, "guidance strength")->capture_default_str();
    gen_cmd->add_option("--max-tokens", gen.max_tokens, "generation limit")->capture_default_str();
    gen_cmd->add_option("--rescale", gen.rescale, "branch normalization")
        ->check(CLI::IsMember({"logsoftmax", "softmax"}))
        ->capture_default_str();
    gen_cmd->add_flag("--vanilla", gen.vanilla, "plain greedy decoding, guidance ignored");
    gen_cmd->add_option("--probe", gen.probe, "write the attention snapshot here");
    gen_cmd->add_flag("--json", gen.json_out, "print the full generation result as JSON");

    std::string init_config, init_out;
    std::uint64_t init_seed = 0;
    auto* init_cmd = app.add_subcommand("init-weights", "write deterministic seeded weights");
    init_cmd->add_option("--config", init_config, "model config JSON (defaults to the built-in config)");
    init_cmd->add_option("--seed", init_seed, "64-bit seed")->required();
    init_cmd->add_option("--out", init_out, "output weight file")->required();

    std::string probe_in;
    bool probe_report_flag = false, probe_json = false;
    auto* probe_cmd = app.add_subcommand("probe", "summarize an attention snapshot");
    probe_cmd->add_option("--in", probe_in, "snapshot (HLS1 binary or JSON)")->required();
    probe_cmd->add_flag("--report", probe_report_flag, "print G_x, G_y, their ratio and the contribution mean");
    probe_cmd->add_flag("--json", probe_json, "print the report as JSON");

    hl::tools::ServeArgs serve;
    auto* serve_cmd = app.add_subcommand("serve", "run the HTTP service");
    hl::tools::add_serve_options(*serve_cmd, serve);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e, std::cerr, std::cerr);
        return kExitUsage;
    }

    try {
        if (*gen_cmd) return run_gen(gen);
        if (*init_cmd) return run_init_weights(init_config, init_seed, init_out);
        if (*probe_cmd) return run_probe(probe_in, probe_json);
        if (*serve_cmd) return hl::tools::run_serve(serve);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const hl::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitFormat;
    } catch (const hl::CapacityError& e) {
        std::cerr << "capacity error: " << e.what() << '\n';
        return kExitCapacity;
    } catch (const hl::BoundsError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const hl::ParamError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
