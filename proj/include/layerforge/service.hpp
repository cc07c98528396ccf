#pragma once

#include <chrono>
#include <cstdint>
#include <semaphore>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "layerforge/canvas.hpp"
#include "layerforge/codec.hpp"
#include "layerforge/image.hpp"
#include "layerforge/manifest.hpp"
#include "layerforge/model.hpp"
#include "layerforge/sampler.hpp"

// After Eigen: <resolv.h> defines a `_res` macro that collides with Eigen internals.
#include <httplib.h>

namespace layerforge {

inline constexpr std::size_t kMaxPayloadBytes = 16u << 20;

struct ServiceResponse {
    int status = 200;
    nlohmann::json body;
};

class ClientError : public std::runtime_error {
public:
    explicit ClientError(const std::string& msg, nlohmann::json violations = nullptr)
        : std::runtime_error(msg), violations(std::move(violations)) {}
    nlohmann::json violations;
};

inline nlohmann::json violations_json(const std::vector<Violation>& vs) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : vs) {
        out.push_back({{"kind", to_string(v.kind)}, {"layer_ids", v.layer_ids}, {"message", v.message}});
    }
    return out;
}

inline ServiceResponse error_response(int status, const std::string& message, nlohmann::json violations = nullptr) {
    ServiceResponse r{status, {{"error", message}}};
    if (!violations.is_null()) {
        r.body["violations"] = std::move(violations);
    }
    return r;
}

/// Request handlers, independent of the HTTP transport. Each response body
/// carries either a payload or an `error` field.
class Service {
public:
    explicit Service(FlowModel model, int max_parallel = 2)
        : model_(std::move(model)), slots_(std::max(1, std::min(max_parallel, 64))) {}

    const FlowModel& model() const { return model_; }

    ServiceResponse health() const {
        const auto& c = model_.config();
        const auto counts = count_params(model_.base, model_.lora);
        return {200,
                {{"status", "ok"},
                 {"model",
                  {{"d_model", c.d_model},
                   {"n_blocks", c.n_blocks},
                   {"n_heads", c.n_heads},
                   {"patch", c.patch},
                   {"latent_dim", c.latent_dim()},
                   {"lora_rank", model_.lora.rank},
                   {"parameters", counts.base + counts.adapters}}}}};
    }

    ServiceResponse validate(const std::string& body) const {
        return guarded([&] {
            const auto canvas = parse_manifest(body);
            const auto vs = validate_canvas(canvas, model_.config().patch);
            if (!vs.empty()) {
                return error_response(400, std::to_string(vs.size()) + " canvas violation(s)", violations_json(vs));
            }
            return ServiceResponse{200, {{"valid", true}, {"violations", nlohmann::json::array()}}};
        });
    }

    ServiceResponse collage(const std::string& body) const {
        return guarded([&] {
            const auto canvas = checked_canvas(nlohmann::json::parse(body));
            const Image img = compose_collage(canvas);
            return ServiceResponse{200, {{"png", png_base64(img)}, {"width", img.width}, {"height", img.height}}};
        });
    }

    // Body: {"canvas": <manifest>, "steps": int, "seed": int}.
    ServiceResponse generate(const std::string& body) {
        return guarded([&] {
            const auto req = nlohmann::json::parse(body);
            if (!req.is_object() || !req.contains("canvas")) {
                throw ClientError("generate: missing field 'canvas'");
            }
            const auto canvas = checked_canvas(req.at("canvas"));
            SampleConfig cfg;
            cfg.steps = req.value("steps", cfg.steps);
            cfg.seed = req.value("seed", cfg.seed);
            if (cfg.steps < 1 || cfg.steps > 1000) {
                throw ClientError("generate: steps must lie in [1, 1000]");
            }
            slots_.acquire();
            struct Release {
                std::counting_semaphore<64>& s;
                ~Release() { s.release(); }
            } release{slots_};
            const auto start = std::chrono::steady_clock::now();
            ConditionSummary summary;
            const Image out = euler_sample(model_, canvas, cfg, &summary);
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            nlohmann::json layers = nlohmann::json::array();
            for (const auto& l : summary.layers) {
                layers.push_back(
                    {{"id", l.id}, {"locked", l.locked}, {"layer_axis", l.layer_axis}, {"tokens", l.tokens}});
            }
            return ServiceResponse{200,
                                   {{"png", png_base64(out)},
                                    {"condition_tokens", summary.total},
                                    {"layers", layers},
                                    {"steps", cfg.steps},
                                    {"seed", cfg.seed},
                                    {"elapsed_ms", ms}}};
        });
    }

private:
    LayeredCanvas checked_canvas(const nlohmann::json& doc) const {
        auto canvas = parse_manifest(doc);
        if (const auto vs = validate_canvas(canvas, model_.config().patch); !vs.empty()) {
            throw ClientError(std::to_string(vs.size()) + " canvas violation(s)", violations_json(vs));
        }
        return canvas;
    }

    template <class F>
    static ServiceResponse guarded(F&& fn) {
        try {
            return fn();
        } catch (const ClientError& e) {
            return error_response(400, e.what(), e.violations);
        } catch (const nlohmann::json::exception& e) {
            return error_response(400, std::string("malformed JSON: ") + e.what());
        } catch (const ManifestError& e) {
            return error_response(400, e.what());
        } catch (const ImageCodecError& e) {
            return error_response(400, e.what());
        } catch (const std::invalid_argument& e) {
            return error_response(400, e.what());
        } catch (const std::exception& e) {
            return error_response(500, std::string("internal error: ") + e.what());
        }
    }

    FlowModel model_;
    std::counting_semaphore<64> slots_;
};

inline void send(httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

/// Registers the endpoints on `server`, with a 16 MiB body limit and JSON
/// bodies for transport-level errors (404, 413).
inline void mount(httplib::Server& server, Service& service) {
    server.set_payload_max_length(kMaxPayloadBytes);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Get("/health", [&](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
    server.Post("/canvas/validate",
                [&](const httplib::Request& req, httplib::Response& res) { send(res, service.validate(req.body)); });
    server.Post("/canvas/collage",
                [&](const httplib::Request& req, httplib::Response& res) { send(res, service.collage(req.body)); });
    server.Post("/generate",
                [&](const httplib::Request& req, httplib::Response& res) { send(res, service.generate(req.body)); });
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) {
            return;
        }
        std::string msg = res.status == 413 ? "payload exceeds 16 MiB limit"
                          : res.status == 404 ? "no such endpoint"
                                              : "request failed";
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
        res.status = 500;
        res.set_content(nlohmann::json{{"error", "internal error"}}.dump(), "application/json");
    });
}

}  // namespace layerforge
