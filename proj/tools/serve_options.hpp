#pragma once

#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "hl/model.hpp"
#include "hl/service.hpp"

namespace hl::tools {

struct ServeArgs {
    std::string model;
    std::string config;
    std::string host = "127.0.0.1";
    int port = 7878;
    std::size_t max_sessions = 32;
};

inline void add_serve_options(CLI::App& app, ServeArgs& a) {
    app.add_option("--model", a.model, "THW1 weight file")->required();
    app.add_option("--config", a.config, "model config JSON; must match the weight file");
    app.add_option("--host", a.host, "bind address")->capture_default_str();
    app.add_option("--port", a.port, "TCP port")->capture_default_str()->check(CLI::Range(1, 65535));
    app.add_option("--max-sessions", a.max_sessions, "concurrent session limit")->capture_default_str();
}

inline int run_serve(const ServeArgs& a) {
    init_logging();
    LoadedWeights loaded = a.config.empty() ? load_weights(a.model) : load_weights(a.model, load_config(a.config));
    auto model = std::make_shared<const Model>(loaded.config, std::move(loaded.weights));
    ServiceOptions opts;
    opts.max_sessions = a.max_sessions;
    Service service(model, opts);
    return service.run(a.host, a.port) ? 0 : 1;
}

} // namespace hl::tools
