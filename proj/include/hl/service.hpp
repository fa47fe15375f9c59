#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "hl/model.hpp"

namespace hl {

struct ServiceOptions {
    std::size_t max_sessions = 32;
    std::size_t max_tokenize_body = 64 * 1024;
    // Sleep after each streamed token. Only useful for exercising the busy
    // path in tests.
    std::chrono::milliseconds step_delay{0};
};

// HTTP front end:
//   GET  /v1/config
//   POST /v1/tokenize                    {text} -> {tokens, offsets}
//   POST /v1/sessions                    -> {id}
//   POST /v1/sessions/{id}/generate      -> text/event-stream of token/done/error
//   GET  /v1/sessions/{id}/attention     -> downsampled map + probe statistics
//   POST /v1/sessions/{id}/reset         -> clears the conversation
//   DELETE /v1/sessions/{id}
class Service {
public:
    Service(std::shared_ptr<const Model> model, ServiceOptions opts = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and serves on a background thread; returns the bound port
    // (pass port 0 for an ephemeral one). Throws Error if binding fails.
    int start(const std::string& host, int port);
    // Binds and serves on the calling thread until stop().
    bool run(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SseEvent {
    std::string event;
    std::string data;
};

std::string format_sse(std::string_view event, std::string_view data);
// Parses a complete event stream; incomplete trailing events are dropped.
std::vector<SseEvent> parse_sse(std::string_view stream);

// Sets the global log level from HL_LOG (trace, debug, info, warn, error,
// off); defaults to info.
void init_logging();

// Deterministic stand-in patch features for clients that select patches
// without supplying an image.
Tensor2D placeholder_patches(const ModelConfig& cfg);

} // namespace hl
