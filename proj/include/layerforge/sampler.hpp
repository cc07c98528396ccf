#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "layerforge/canvas.hpp"
#include "layerforge/codec.hpp"
#include "layerforge/flow.hpp"
#include "layerforge/model.hpp"

namespace layerforge {

struct SampleConfig {
    int steps = 16;
    std::uint64_t seed = 0;
    int width = 0;  // 0 = canvas size; otherwise must equal it
    int height = 0;

    void validate() const {
        if (steps < 1) {
            throw std::invalid_argument("sample config: steps must be >= 1");
        }
        if (width < 0 || height < 0) {
            throw std::invalid_argument("sample config: negative output size");
        }
    }
};

/// Euler on the uniform grid t_k = k / steps:
///   z <- z + (1 / steps) * v(z, t_k),  k = 0 .. steps - 1
template <class VelocityFn>
LatentGrid euler_integrate(LatentGrid z, int steps, VelocityFn&& velocity) {
    if (steps < 1) {
        throw std::invalid_argument("euler_integrate: steps must be >= 1");
    }
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const LatentGrid v = velocity(static_cast<const LatentGrid&>(z), static_cast<double>(k) / steps);
        if (v.data.size() != z.data.size()) {
            throw std::invalid_argument("euler_integrate: velocity shape mismatch");
        }
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            z.data[i] += dt * v.data[i];
        }
    }
    return z;
}

inline LatentGrid initial_noise(const LayeredCanvas& canvas, int patch, std::uint64_t seed) {
    return gaussian_grid(canvas.height / patch, canvas.width / patch, patch * patch * 3, seed);
}

/// Generates an RGB image for `canvas`: seeded Gaussian z_0, Euler integration
/// of the model velocity conditioned on the pruned canvas tokens, then decode.
inline Image euler_sample(const FlowModel& model, const LayeredCanvas& canvas, const SampleConfig& cfg,
                          ConditionSummary* summary = nullptr) {
    cfg.validate();
    const int patch = model.config().patch;
    if (const auto violations = validate_canvas(canvas, patch); !violations.empty()) {
        throw CanvasError("invalid canvas: " + violations.front().message);
    }
    if ((cfg.width && cfg.width != canvas.width) || (cfg.height && cfg.height != canvas.height)) {
        throw ModelError("output resolution " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height) +
                         " differs from canvas " + std::to_string(canvas.width) + "x" +
                         std::to_string(canvas.height));
    }
    const TokenSequence cond = build_condition_sequence(canvas, patch, summary);
    const LatentGrid z1 = euler_integrate(initial_noise(canvas, patch, cfg.seed), cfg.steps,
                                          [&](const LatentGrid& z, double t) {
                                              return model.velocity(z, t, cond, canvas.prompt);
                                          });
    return decode_latents(z1, patch);
}

}  // namespace layerforge
