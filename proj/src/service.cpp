#include "hl/service.hpp"

#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "hl/guidance.hpp"
#include "hl/json_io.hpp"
#include "hl/probe.hpp"

namespace hl {

using nlohmann::json;

std::string format_sse(std::string_view event, std::string_view data) {
    std::string out = "event: ";
    out += event;
    out += "\ndata: ";
    out += data;
    out += "\n\n";
    return out;
}

std::vector<SseEvent> parse_sse(std::string_view stream) {
    std::vector<SseEvent> out;
    SseEvent cur;
    bool has_field = false;
    std::size_t pos = 0;
    while (pos < stream.size()) {
        const std::size_t nl = stream.find('\n', pos);
        if (nl == std::string_view::npos) break;
        const std::string_view line = stream.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) {
            if (has_field) out.push_back(std::move(cur));
            cur = {};
            has_field = false;
        } else if (line.starts_with("event: ")) {
            cur.event = line.substr(7);
            has_field = true;
        } else if (line.starts_with("data: ")) {
            if (!cur.data.empty()) cur.data += '\n';
            cur.data += line.substr(6);
            has_field = true;
        }
    }
    return out;
}

void init_logging() {
    const char* env = std::getenv("HL_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

Tensor2D placeholder_patches(const ModelConfig& cfg) {
    Xoshiro256 rng(0);
    Tensor2D t(cfg.n_patches, cfg.patch_dim);
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    return t;
}

namespace {

struct Session {
    std::mutex mu; // guards conv and last_* while not streaming
    std::atomic<bool> busy{false};
    Conversation conv;
    bool has_image = false;
    std::optional<AttentionSnapshot> last_snapshot;
};

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(dump_json(body), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, json{{"error", msg}});
}

// Range checks for request parameters; the library accepts wider values.
void check_param_ranges(const GuidanceConfig& c, const ModelConfig& mc) {
    if (!(c.alpha >= 0.0f && c.alpha <= 1.0f)) throw ParamError("alpha must be in [0, 1]");
    if (!(c.beta > 0.0f && c.beta <= 64.0f)) throw ParamError("beta must be in (0, 64]");
    if (!(c.beta_qformer > 0.0f && c.beta_qformer <= 64.0f)) throw ParamError("beta_qformer must be in (0, 64]");
    if (!(c.gamma >= 0.5f && c.gamma <= 4.0f)) throw ParamError("gamma must be in [0.5, 4]");
    if (c.max_new_tokens == 0 || c.max_new_tokens >= mc.max_seq) throw ParamError("max_new_tokens out of range");
}

} // namespace

struct Service::Impl {
    std::shared_ptr<const Model> model;
    ServiceOptions opts;
    httplib::Server server;
    std::thread thread;
    std::mutex sessions_mu;
    std::map<std::string, std::shared_ptr<Session>> sessions;
    std::mt19937_64 id_rng{std::random_device{}()};

    Impl(std::shared_ptr<const Model> m, ServiceOptions o) : model(std::move(m)), opts(o) { routes(); }

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard lock(sessions_mu);
        auto it = sessions.find(id);
        return it == sessions.end() ? nullptr : it->second;
    }

    std::string new_id() {
        static constexpr char kHex[] = "0123456789abcdef";
        std::string id;
        const std::uint64_t v = id_rng();
        for (int i = 0; i < 16; ++i) id += kHex[(v >> (4 * i)) & 0xf];
        return id;
    }

    void routes() {
        server.set_payload_max_length(8 * 1024 * 1024);

        server.Get("/v1/config", [this](const httplib::Request&, httplib::Response& res) {
            json j = model->config();
            j["patch_grid"] = model->config().patch_grid();
            send_json(res, 200, j);
        });

        server.Post("/v1/tokenize", [this](const httplib::Request& req, httplib::Response& res) {
            if (req.body.size() > opts.max_tokenize_body) return send_error(res, 413, "body exceeds 64 KiB");
            json body;
            try {
                body = json::parse(req.body);
                const auto text = body.at("text").get<std::string>();
                const Encoding enc = encode(text);
                json offsets = json::array();
                for (const auto& o : enc.offsets) offsets.push_back({o.start, o.end});
                send_json(res, 200, json{{"tokens", enc.ids}, {"offsets", offsets}});
            } catch (const json::exception& e) {
                send_error(res, 400, std::string("bad JSON: ") + e.what());
            }
        });

        server.Post("/v1/sessions", [this](const httplib::Request&, httplib::Response& res) {
            std::lock_guard lock(sessions_mu);
            if (sessions.size() >= opts.max_sessions) return send_error(res, 429, "session limit reached");
            std::string id = new_id();
            while (sessions.count(id)) id = new_id();
            sessions.emplace(id, std::make_shared<Session>());
            spdlog::info("session {} created", id);
            send_json(res, 201, json{{"id", id}});
        });

        server.Delete(R"(/v1/sessions/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(sessions_mu);
            auto it = sessions.find(req.matches[1]);
            if (it == sessions.end()) return send_error(res, 404, "unknown session");
            if (it->second->busy) return send_error(res, 409, "session busy");
            sessions.erase(it);
            send_json(res, 200, json{{"deleted", true}});
        });

        server.Post(R"(/v1/sessions/([0-9a-f]+)/reset)", [this](const httplib::Request& req, httplib::Response& res) {
            auto s = find(req.matches[1]);
            if (!s) return send_error(res, 404, "unknown session");
            if (s->busy) return send_error(res, 409, "session busy");
            std::lock_guard lock(s->mu);
            s->conv = Conversation();
            s->has_image = false;
            s->last_snapshot.reset();
            send_json(res, 200, json{{"reset", true}});
        });

        server.Post(R"(/v1/sessions/([0-9a-f]+)/generate)",
                    [this](const httplib::Request& req, httplib::Response& res) { generate(req, res); });

        server.Get(R"(/v1/sessions/([0-9a-f]+)/attention)", [this](const httplib::Request& req, httplib::Response& res) {
            auto s = find(req.matches[1]);
            if (!s) return send_error(res, 404, "unknown session");
            if (s->busy) return send_error(res, 409, "session busy");
            std::lock_guard lock(s->mu);
            if (!s->last_snapshot) return send_error(res, 404, "no completed generation");
            const auto& snap = *s->last_snapshot;
            json j = probe_report(snap);
            const Tensor2D small = downsample_map(snap.average);
            json rows = json::array();
            for (std::size_t r = 0; r < small.rows(); ++r)
                rows.push_back(std::vector<float>(small.row(r).begin(), small.row(r).end()));
            j["map"] = rows;
            j["rows"] = small.rows();
            j["cols"] = small.cols();
            j["length"] = snap.length();
            send_json(res, 200, j);
        });
    }

    void generate(const httplib::Request& req, httplib::Response& res) {
        auto session = find(req.matches[1]);
        if (!session) return send_error(res, 404, "unknown session");

        json body;
        try {
            body = json::parse(req.body);
            if (!body.is_object()) throw json::type_error::create(302, "body must be an object", &body);
        } catch (const json::exception& e) {
            return send_error(res, 400, std::string("bad JSON: ") + e.what());
        }

        GuidanceConfig cfg;
        std::string text;
        std::vector<ByteRange> spans;
        std::optional<std::vector<std::uint8_t>> patch_mask;
        std::optional<Tensor2D> features;
        VisualMapping mapping = VisualMapping::Direct;
        bool vanilla = false, keep_previous = false;
        try {
            text = body.at("text").get<std::string>();
            if (body.contains("spans")) spans = body.at("spans").get<std::vector<ByteRange>>();
            if (body.contains("patch_mask") && !body.at("patch_mask").is_null())
                patch_mask = body.at("patch_mask").get<std::vector<std::uint8_t>>();
            if (body.contains("image") && !body.at("image").is_null()) features = patches_from_json(body.at("image"));
            if (body.contains("mapping")) mapping = mapping_from_string(body.at("mapping").get<std::string>());
            if (body.contains("params") && !body.at("params").is_null()) cfg = body.at("params").get<GuidanceConfig>();
            vanilla = body.value("vanilla", false);
            keep_previous = body.value("keep_previous", false);
        } catch (const json::exception& e) {
            return send_error(res, 400, std::string("bad request: ") + e.what());
        } catch (const Error& e) {
            return send_error(res, 422, e.what());
        }

        try {
            cfg.validate();
            check_param_ranges(cfg, model->config());
        } catch (const Error& e) {
            return send_error(res, 422, e.what());
        }

        if (session->busy.exchange(true)) return send_error(res, 409, "session busy");

        // Validate the grown conversation on a copy before committing to a stream.
        std::unique_lock lock(session->mu);
        try {
            Conversation trial = session->conv;
            if (features || patch_mask) {
                if (!trial.rounds().empty() && features) throw ParamError("image can only be set in the first round");
                if (!session->has_image && trial.rounds().empty()) {
                    ImageInput img{features ? *features : placeholder_patches(model->config()), mapping, {}};
                    trial = Conversation(std::move(img));
                } else if (!session->has_image) {
                    throw ParamError("conversation has no image");
                }
                if (patch_mask) trial.set_patch_mask(*patch_mask);
            }
            trial.add_user_turn(text, spans, keep_previous);
            const Prompt prompt = trial.build(*model);
            if (prompt.input.tokens.size() + cfg.max_new_tokens > model->config().max_seq) {
                throw CapacityError("conversation too long for max_seq");
            }
            // Commit the image/patch mask; the user turn is added by continue_round.
            if (features || patch_mask) {
                if (!session->has_image && session->conv.rounds().empty()) {
                    ImageInput img{features ? *features : placeholder_patches(model->config()), mapping, {}};
                    session->conv = Conversation(std::move(img));
                    session->has_image = true;
                }
                if (patch_mask) session->conv.set_patch_mask(*patch_mask);
            }
        } catch (const Error& e) {
            lock.unlock();
            session->busy = false;
            return send_error(res, 422, e.what());
        }
        lock.unlock();

        spdlog::debug("session {} generate ({} bytes, gamma={}, beta={})", std::string(req.matches[1]), text.size(),
                      cfg.gamma, cfg.beta);

        res.set_header("Cache-Control", "no-cache");
        auto finished = std::make_shared<bool>(false);
        res.set_chunked_content_provider(
            "text/event-stream",
            [this, session, finished, cfg, text, spans, vanilla, keep_previous](std::size_t, httplib::DataSink& sink) {
                std::lock_guard guard(session->mu);
                std::string last;
                try {
                    ProbeRecorder recorder(model->config());
                    DecodeHooks hooks;
                    hooks.cond_observer = &recorder.observer();
                    hooks.on_token = [&](std::size_t step, const StepRecord& rec) {
                        if (rec.chosen == vocab::kEos) return true;
                        const json ev{{"index", step}, {"id", rec.chosen}, {"text", token_text(rec.chosen)}};
                        const std::string chunk = format_sse("token", dump_json(ev));
                        if (!sink.write(chunk.data(), chunk.size())) return false;
                        if (opts.step_delay.count() > 0) std::this_thread::sleep_for(opts.step_delay);
                        return true;
                    };
                    const GenerationResult result = continue_round(*model, session->conv, text, spans, cfg,
                                                                   keep_previous, vanilla, hooks);
                    const Prompt prompt = session->conv.build(*model);
                    // The prompt now includes the reply; mask bits of the
                    // context prefix are what the decode saw.
                    std::vector<std::uint8_t> mask(prompt.input.mask.bits().begin(),
                                                   prompt.input.mask.bits().begin() +
                                                       static_cast<std::ptrdiff_t>(result.context_len));
                    session->last_snapshot = recorder.snapshot(result.context_len, result.steps.size(), mask);
                    last = format_sse("done", dump_json(json(result)));
                } catch (const std::exception& e) {
                    spdlog::warn("generation failed: {}", e.what());
                    last = format_sse("error", dump_json(json{{"error", e.what()}}));
                }
                // Released before the final event goes out.
                *finished = true;
                session->busy = false;
                sink.write(last.data(), last.size());
                sink.done();
                return true;
            },
            [session, finished](bool) {
                if (!*finished) session->busy = false;
            });
    }
};

Service::Service(std::shared_ptr<const Model> model, ServiceOptions opts)
    : impl_(std::make_unique<Impl>(std::move(model), opts)) {}

Service::~Service() {
    stop();
}

int Service::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    spdlog::info("listening on {}:{}", host, bound);
    return bound;
}

bool Service::run(const std::string& host, int port) {
    spdlog::info("listening on {}:{}", host, port);
    return impl_->server.listen(host, port);
}

void Service::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

} // namespace hl
